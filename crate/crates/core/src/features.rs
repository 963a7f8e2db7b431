//! Hand-crafted descriptor for the linear ranker.
//!
//! Layout (format version 1, 1182 dims):
//!
//! | offset | length | content                                             |
//! |-------:|-------:|-----------------------------------------------------|
//! |      0 |   1024 | 32×32 box-downsampled grayscale, row-major          |
//! |   1024 |     30 | 10-bin histogram per RGB channel, each sums to 1    |
//! |   1054 |    128 | 4×4 cells × 8 unsigned Sobel orientation energies   |
//!
//! The last block is a lightweight stand-in for Gist: magnitude-weighted
//! orientation energy pooled over a coarse spatial grid, L2-normalised per
//! cell.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::attrworld::Image;
use crate::error::{Error, Result};

pub const DESCRIPTOR_VERSION: u32 = 1;
pub const GRAY_SIDE: usize = 32;
pub const GRAY_LEN: usize = GRAY_SIDE * GRAY_SIDE;
pub const HIST_BINS: usize = 10;
pub const HIST_LEN: usize = 3 * HIST_BINS;
pub const ORIENT_BINS: usize = 8;
pub const GRID: usize = 4;
pub const ORIENT_LEN: usize = GRID * GRID * ORIENT_BINS;
pub const HIST_OFFSET: usize = GRAY_LEN;
pub const ORIENT_OFFSET: usize = GRAY_LEN + HIST_LEN;
pub const DESCRIPTOR_LEN: usize = GRAY_LEN + HIST_LEN + ORIENT_LEN;

const STD_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(pub Vec<f64>);

fn gray(img: &Image, x: usize, y: usize) -> f64 {
    0.299 * img.get(x, y, 0) + 0.587 * img.get(x, y, 1) + 0.114 * img.get(x, y, 2)
}

fn block(i: usize, n_in: usize) -> (usize, usize) {
    let start = i * n_in / GRAY_SIDE;
    let end = ((i + 1) * n_in / GRAY_SIDE).max(start + 1).min(n_in);
    (start.min(n_in - 1), end)
}

/// 32×32 box downsample of the luma channel.
pub fn gray_thumbnail(img: &Image) -> Vec<f64> {
    let mut out = vec![0.0; GRAY_LEN];
    for oy in 0..GRAY_SIDE {
        let (y0, y1) = block(oy, img.height);
        for ox in 0..GRAY_SIDE {
            let (x0, x1) = block(ox, img.width);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += gray(img, x, y);
                }
            }
            out[oy * GRAY_SIDE + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

fn color_histogram(img: &Image, out: &mut [f64]) {
    let n = (img.width * img.height) as f64;
    for px in img.pixels.chunks_exact(3) {
        for (c, &v) in px.iter().enumerate() {
            let bin = ((v * HIST_BINS as f64).floor() as usize).min(HIST_BINS - 1);
            out[c * HIST_BINS + bin] += 1.0;
        }
    }
    for v in out.iter_mut() {
        *v /= n;
    }
}

fn orientation_energy(thumb: &[f64], out: &mut [f64]) {
    let s = GRAY_SIDE as isize;
    let at = |x: isize, y: isize| thumb[(y.clamp(0, s - 1) * s + x.clamp(0, s - 1)) as usize];
    let cell = GRAY_SIDE / GRID;
    for y in 0..s {
        for x in 0..s {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(PI);
            let bin = ((theta / (PI / ORIENT_BINS as f64)).floor() as usize) % ORIENT_BINS;
            let c = (y as usize / cell) * GRID + x as usize / cell;
            out[c * ORIENT_BINS + bin] += mag;
        }
    }
    for c in out.chunks_exact_mut(ORIENT_BINS) {
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            c.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

pub fn extract_descriptor(img: &Image) -> Descriptor {
    let mut d = vec![0.0; DESCRIPTOR_LEN];
    let thumb = gray_thumbnail(img);
    d[..GRAY_LEN].copy_from_slice(&thumb);
    color_histogram(img, &mut d[HIST_OFFSET..ORIENT_OFFSET]);
    orientation_energy(&thumb, &mut d[ORIENT_OFFSET..]);
    Descriptor(d)
}

/// Per-dimension z-scoring fitted on a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit<'a, I>(descriptors: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let rows: Vec<&[f64]> = descriptors.into_iter().collect();
        if rows.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "normalizer needs at least 2 descriptors, got {}",
                rows.len()
            )));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("descriptors differ in length".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in &rows {
            for ((acc, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|v| (v / (n - 1.0)).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image() {
        let img = Image::filled(64, 64, 0.37);
        let d = extract_descriptor(&img);
        assert_eq!(d.0.len(), 1182);
        assert!(d.0[ORIENT_OFFSET..].iter().all(|&v| v == 0.0));
        for c in 0..3 {
            let h = &d.0[HIST_OFFSET + c * HIST_BINS..HIST_OFFSET + (c + 1) * HIST_BINS];
            assert_eq!(h.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(h.iter().filter(|&&v| v == 0.0).count(), HIST_BINS - 1);
        }
        assert!(d.0[..GRAY_LEN].iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn histogram_sums_to_three() {
        let img = crate::attrworld::render(
            &crate::attrworld::AttributeVector(vec![0.5, 1.0, -0.5, 0.2]),
            &crate::attrworld::LatentVector(vec![0.3, -0.3, 0.7]),
            &crate::attrworld::WorldConfig::default(),
        )
        .unwrap();
        let d = extract_descriptor(&img);
        let s: f64 = d.0[HIST_OFFSET..ORIENT_OFFSET].iter().sum();
        assert!((s - 3.0).abs() < 1e-12);
    }

    fn orientation_mass(d: &Descriptor, bin: usize) -> f64 {
        d.0[ORIENT_OFFSET..].chunks_exact(ORIENT_BINS).map(|c| c[bin]).sum()
    }

    #[test]
    fn rotated_edges_swap_orientation_bins() {
        // vertical stripes: intensity varies along x only
        let mut vertical = Image::filled(64, 64, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                let v = if (x / 8) % 2 == 0 { 0.9 } else { 0.1 };
                for c in 0..3 {
                    vertical.set(x, y, c, v);
                }
            }
        }
        let mut rotated = Image::filled(64, 64, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                for c in 0..3 {
                    rotated.set(x, y, c, vertical.get(y, 63 - x, c));
                }
            }
        }
        let a = extract_descriptor(&vertical);
        let b = extract_descriptor(&rotated);
        let total_a: f64 = (0..ORIENT_BINS).map(|k| orientation_mass(&a, k)).sum();
        let total_b: f64 = (0..ORIENT_BINS).map(|k| orientation_mass(&b, k)).sum();
        assert!((orientation_mass(&a, 0) - total_a).abs() < 1e-12);
        assert!((orientation_mass(&b, 4) - total_b).abs() < 1e-12);
        assert!(orientation_mass(&a, 0) > 0.0 && orientation_mass(&b, 4) > 0.0);
    }

    #[test]
    fn normalizer_closed_form() {
        let rows = [vec![0.0, 5.0], vec![2.0, 5.0]];
        let n = Normalizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(n.mean, vec![1.0, 5.0]);
        assert!((n.std[0] - 2f64.sqrt()).abs() < 1e-12);
        let z = n.apply(&[0.0, 5.0]);
        assert!((z[0] + 0.5f64.sqrt()).abs() < 1e-6);
        assert_eq!(z[1], 0.0);
        assert!(Normalizer::fit(std::iter::once(rows[0].as_slice())).is_err());
    }

    #[test]
    fn normalizer_standardises_its_fit_set() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![i as f64 * 0.7 - 3.0, ((i * 37) % 11) as f64, 1.0])
            .collect();
        let n = Normalizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        let z: Vec<Vec<f64>> = rows.iter().map(|r| n.apply(r)).collect();
        for d in 0..2 {
            let m: f64 = z.iter().map(|r| r[d]).sum::<f64>() / 30.0;
            let v: f64 = z.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / 29.0;
            assert!(m.abs() < 1e-6 && (v.sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(z.iter().all(|r| r[2] == 0.0));
    }
}
