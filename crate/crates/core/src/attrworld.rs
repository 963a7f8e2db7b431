//! Procedural attribute-conditioned image world.
//!
//! Every image is a spiky blob on a gray background. Four attribute
//! strengths (size, pointiness, brightness, elongation) and three latent
//! factors (horizontal offset, vertical offset, rotation) map to physical
//! drawing parameters through fixed monotone squashing functions, so any
//! comparison between two rendered images has an exact answer.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ATTRIBUTES: usize = 4;
pub const MAX_LATENTS: usize = 3;

pub const ATTRIBUTE_NAMES: [&str; MAX_ATTRIBUTES] = ["size", "pointiness", "brightness", "elongation"];

const BACKGROUND: f64 = 0.9;
const SPIKE_FOLD: i32 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub n_attributes: usize,
    pub n_latents: usize,
    pub supersample_factor: usize,
    pub jnd_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_width: 64,
            image_height: 64,
            n_attributes: 4,
            n_latents: 3,
            supersample_factor: 2,
            jnd_fraction: 0.02,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_width < 16 || self.image_height < 16 {
            return Err(Error::InvalidInput(format!(
                "image must be at least 16x16, got {}x{}",
                self.image_width, self.image_height
            )));
        }
        if self.n_attributes == 0 || self.n_attributes > MAX_ATTRIBUTES {
            return Err(Error::InvalidInput(format!(
                "n_attributes must be in 1..={MAX_ATTRIBUTES}, got {}",
                self.n_attributes
            )));
        }
        if self.n_latents > MAX_LATENTS {
            return Err(Error::InvalidInput(format!(
                "n_latents must be at most {MAX_LATENTS}, got {}",
                self.n_latents
            )));
        }
        if self.supersample_factor == 0 {
            return Err(Error::InvalidInput("supersample_factor must be >= 1".into()));
        }
        if !(self.jnd_fraction > 0.0 && self.jnd_fraction < 0.5) {
            return Err(Error::InvalidInput(format!(
                "jnd_fraction must lie in (0, 0.5), got {}",
                self.jnd_fraction
            )));
        }
        Ok(())
    }

    /// Just-noticeable difference, in physical units, for an attribute.
    pub fn jnd(&self, attribute: usize) -> Result<f64> {
        Ok(self.jnd_fraction * Attribute::from_index(attribute, self)?.param_range())
    }
}

/// Attribute strengths `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector(pub Vec<f64>);

/// Non-attribute factors `z`, standard-normal units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(pub Vec<f64>);

impl AttributeVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0.get(i).copied().unwrap_or(0.0)
    }
}

impl LatentVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0.get(i).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Attribute {
    Size,
    Pointiness,
    Brightness,
    Elongation,
}

impl Attribute {
    pub fn from_index(index: usize, cfg: &WorldConfig) -> Result<Self> {
        if index >= cfg.n_attributes {
            return Err(Error::InvalidInput(format!(
                "attribute index {index} out of range for {} attributes",
                cfg.n_attributes
            )));
        }
        Ok(match index {
            0 => Attribute::Size,
            1 => Attribute::Pointiness,
            2 => Attribute::Brightness,
            _ => Attribute::Elongation,
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ATTRIBUTE_NAMES[self.index()]
    }

    /// Width of the physical parameter's attainable interval.
    pub fn param_range(self) -> f64 {
        match self {
            Attribute::Size => 14.0,
            Attribute::Pointiness => 0.45,
            Attribute::Brightness => 0.7,
            Attribute::Elongation => 0.4f64.exp() - (-0.4f64).exp(),
        }
    }

    pub fn driven_param(self, p: &PhysicalParams) -> f64 {
        match self {
            Attribute::Size => p.radius,
            Attribute::Pointiness => p.spike_amplitude,
            Attribute::Brightness => p.luminance,
            Attribute::Elongation => p.aspect,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub radius: f64,
    pub spike_amplitude: f64,
    pub luminance: f64,
    pub aspect: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub rotation: f64,
}

impl PhysicalParams {
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.radius,
            self.spike_amplitude,
            self.luminance,
            self.aspect,
            self.center_x,
            self.center_y,
            self.rotation,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparison {
    AMore,
    BMore,
    Indistinguishable,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite values")))
    }
}

pub fn param_map(y: &AttributeVector, z: &LatentVector, cfg: &WorldConfig) -> Result<PhysicalParams> {
    if y.0.len() != cfg.n_attributes {
        return Err(Error::InvalidInput(format!(
            "attribute vector has length {}, world expects {}",
            y.0.len(),
            cfg.n_attributes
        )));
    }
    if z.0.len() != cfg.n_latents {
        return Err(Error::InvalidInput(format!(
            "latent vector has length {}, world expects {}",
            z.0.len(),
            cfg.n_latents
        )));
    }
    check_finite(&y.0, "attribute vector")?;
    check_finite(&z.0, "latent vector")?;
    Ok(PhysicalParams {
        radius: 10.0 + 14.0 * sigmoid(y.get(0)),
        spike_amplitude: 0.45 * sigmoid(y.get(1)),
        luminance: 0.25 + 0.7 * sigmoid(y.get(2)),
        aspect: (0.4 * y.get(3).tanh()).exp(),
        center_x: 6.0 * z.get(0).tanh(),
        center_y: 6.0 * z.get(1).tanh(),
        rotation: (PI / 3.0) * z.get(2).tanh(),
    })
}

/// Row-major `height × width × 3` image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    /// Round-trip through 8-bit storage.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f64::from(quantize(v)) / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| quantize(v)).collect();
        let mut writer = encoder.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::format(path, e.to_string()))?;
        writer.finish().map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format(path, "image too large"))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(path, e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format(path, "expected 8-bit RGB png"));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        Ok(Image {
            width: w,
            height: h,
            pixels: buf[..w * h * 3].iter().map(|&b| f64::from(b) / 255.0).collect(),
        })
    }
}

fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn render_params(p: &PhysicalParams, cfg: &WorldConfig) -> Image {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let f = cfg.supersample_factor;
    let inv_f = 1.0 / f as f64;
    let cx = w as f64 / 2.0 + p.center_x;
    let cy = h as f64 / 2.0 + p.center_y;
    let (sin_r, cos_r) = p.rotation.sin_cos();
    let fill = [p.luminance, 0.6 * p.luminance, 0.3 * p.luminance];
    let mut img = Image::filled(w, h, BACKGROUND);
    let per_pixel = (f * f) as f64;

    for py in 0..h {
        for px in 0..w {
            let mut inside = 0usize;
            for sy in 0..f {
                let dy = py as f64 + (sy as f64 + 0.5) * inv_f - cy;
                for sx in 0..f {
                    let dx = px as f64 + (sx as f64 + 0.5) * inv_f - cx;
                    // rotate by -rotation, then undo the elongation
                    let u = (cos_r * dx + sin_r * dy) / p.aspect;
                    let v = (-sin_r * dx + cos_r * dy) * p.aspect;
                    if inside_blob(u, v, p.radius, p.spike_amplitude) {
                        inside += 1;
                    }
                }
            }
            if inside > 0 {
                let cov = inside as f64 / per_pixel;
                for (c, &col) in fill.iter().enumerate() {
                    img.set(px, py, c, cov * col + (1.0 - cov) * BACKGROUND);
                }
            }
        }
    }
    img
}

/// `r <= radius * (1 + spike * cos 5θ)` evaluated without trigonometry:
/// `r^5 cos 5θ = Re((u + iv)^5)`.
#[inline]
fn inside_blob(u: f64, v: f64, radius: f64, spike: f64) -> bool {
    let r2 = u * u + v * v;
    let r = r2.sqrt();
    if r == 0.0 {
        return true;
    }
    let (u2, v2) = (u * u, v * v);
    let re5 = u * (u2 * u2 - 10.0 * u2 * v2 + 5.0 * v2 * v2);
    let cos5 = re5 / (r2 * r2 * r);
    r <= radius * (1.0 + spike * cos5)
}

/// Inside test in the polar form used by the reference renderer; tests use it
/// as an independent oracle.
pub fn inside_polar(p: &PhysicalParams, cfg: &WorldConfig, x: f64, y: f64) -> bool {
    let dx = x - (cfg.image_width as f64 / 2.0 + p.center_x);
    let dy = y - (cfg.image_height as f64 / 2.0 + p.center_y);
    let rot = -p.rotation;
    let xr = rot.cos() * dx - rot.sin() * dy;
    let yr = rot.sin() * dx + rot.cos() * dy;
    let (u, v) = (xr / p.aspect, yr * p.aspect);
    let r = u.hypot(v);
    let theta = v.atan2(u);
    r <= p.radius * (1.0 + p.spike_amplitude * (f64::from(SPIKE_FOLD) * theta).cos())
}

pub fn render(y: &AttributeVector, z: &LatentVector, cfg: &WorldConfig) -> Result<Image> {
    cfg.validate()?;
    let p = param_map(y, z, cfg)?;
    Ok(render_params(&p, cfg))
}

pub fn compare_params(
    a: &PhysicalParams,
    b: &PhysicalParams,
    attribute: usize,
    cfg: &WorldConfig,
) -> Result<Comparison> {
    let attr = Attribute::from_index(attribute, cfg)?;
    let (pa, pb) = (attr.driven_param(a), attr.driven_param(b));
    let threshold = cfg.jnd_fraction * attr.param_range();
    Ok(if (pa - pb).abs() <= threshold {
        Comparison::Indistinguishable
    } else if pa > pb {
        Comparison::AMore
    } else {
        Comparison::BMore
    })
}

pub fn ground_truth_compare(
    y_a: &AttributeVector,
    y_b: &AttributeVector,
    attribute: usize,
    cfg: &WorldConfig,
) -> Result<Comparison> {
    let z = LatentVector::zeros(cfg.n_latents);
    let a = param_map(y_a, &z, cfg)?;
    let b = param_map(y_b, &z, cfg)?;
    compare_params(&a, &b, attribute, cfg)
}

/// Conditioning interface standing in for `p(x | y, z)`.
///
/// `y` is expressed in the generator's own attribute-strength scale;
/// `world_attributes` translates it into the procedural world's scale so the
/// ground truth of any generated image is known.
pub trait Generator: Send + Sync {
    fn config(&self) -> &WorldConfig;

    /// Length of the latent vectors this generator consumes.
    fn latent_dim(&self) -> usize {
        self.config().n_latents
    }

    fn world_attributes(&self, y: &AttributeVector) -> Result<AttributeVector>;

    fn physical(&self, y: &AttributeVector, z: &LatentVector) -> Result<PhysicalParams> {
        param_map(&self.world_attributes(y)?, z, self.config())
    }

    fn render(&self, y: &AttributeVector, z: &LatentVector) -> Result<Image> {
        let p = self.physical(y, z)?;
        Ok(render_params(&p, self.config()))
    }
}

/// The bare procedural world: strengths are world attributes.
#[derive(Clone, Debug)]
pub struct ProceduralWorld {
    pub cfg: WorldConfig,
}

impl ProceduralWorld {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

impl Generator for ProceduralWorld {
    fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    fn world_attributes(&self, y: &AttributeVector) -> Result<AttributeVector> {
        if y.len() != self.cfg.n_attributes {
            return Err(Error::InvalidInput(format!(
                "attribute vector has length {}, world expects {}",
                y.len(),
                self.cfg.n_attributes
            )));
        }
        Ok(y.clone())
    }
}

/// Procedural world behind an affine conditioning map fitted on observed
/// `(strength, world attribute)` examples:
/// `y_world = weights · y + offset + residual_factor · r`.
///
/// This is how the generator "learns" the semantics of classifier-derived
/// strengths: the map is a least-squares regression of the world attributes
/// of the generator's training images on their strengths, so one strength
/// dimension may move several world attributes at once. Whatever the
/// strengths leave unexplained lives in the latent: a latent vector is the
/// world's pose latents followed by `n_attributes` standard-normal residual
/// coordinates `r`, shared by every image of an identity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionedWorld {
    pub cfg: WorldConfig,
    /// `n_attributes × n_attributes`, row-major; row = world attribute.
    pub weights: Vec<f64>,
    pub offset: Vec<f64>,
    /// Lower-triangular Cholesky factor of the regression residual
    /// covariance, row-major.
    pub residual_factor: Vec<f64>,
}

impl ConditionedWorld {
    pub fn identity(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_attributes;
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Ok(Self {
            cfg,
            weights,
            offset: vec![0.0; n],
            residual_factor: vec![0.0; n * n],
        })
    }

    /// Ridge-regularised least squares of `world` rows on `strengths` rows
    /// (with intercept, intercept unpenalised).
    pub fn fit(cfg: WorldConfig, strengths: &[Vec<f64>], world: &[Vec<f64>], ridge: f64) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_attributes;
        let m = strengths.len();
        if m != world.len() {
            return Err(Error::InvalidInput("strength and world rows differ in count".into()));
        }
        if m < n + 1 {
            return Err(Error::InsufficientData(format!(
                "conditioning fit needs at least {} rows, got {m}",
                n + 1
            )));
        }
        let design = DMatrix::from_fn(m, n + 1, |r, c| if c < n { strengths[r][c] } else { 1.0 });
        let target = DMatrix::from_fn(m, n, |r, c| world[r][c]);
        let mut gram = design.transpose() * &design;
        for i in 0..n {
            gram[(i, i)] += ridge;
        }
        let rhs = design.transpose() * &target;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Numerical("conditioning normal equations not positive definite".into()))?;
        let coef = chol.solve(&rhs); // (n+1) × n
        let mut weights = vec![0.0; n * n];
        let mut offset = vec![0.0; n];
        for out in 0..n {
            for inp in 0..n {
                weights[out * n + inp] = coef[(inp, out)];
            }
            offset[out] = coef[(n, out)];
        }
        if weights.iter().chain(&offset).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("conditioning map is not finite".into()));
        }
        let resid = target - design * coef;
        let dof = m.saturating_sub(n + 1).max(1) as f64;
        let mut cov = resid.transpose() * &resid / dof;
        for i in 0..n {
            cov[(i, i)] += 1e-12;
        }
        let l = cov
            .cholesky()
            .ok_or_else(|| Error::Numerical("residual covariance not positive definite".into()))?
            .l();
        let residual_factor = (0..n * n).map(|k| l[(k / n, k % n)]).collect();
        Ok(Self {
            cfg,
            weights,
            offset,
            residual_factor,
        })
    }

    /// The same map with the residual switched off.
    pub fn without_residual(mut self) -> Self {
        self.residual_factor.iter_mut().for_each(|v| *v = 0.0);
        self
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let n = self.cfg.n_attributes;
        let yv = DVector::from_column_slice(y);
        let w = DMatrix::from_row_slice(n, n, &self.weights);
        let out = w * yv;
        out.iter().zip(&self.offset).map(|(a, b)| a + b).collect()
    }
}

impl Generator for ConditionedWorld {
    fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    fn world_attributes(&self, y: &AttributeVector) -> Result<AttributeVector> {
        if y.len() != self.cfg.n_attributes {
            return Err(Error::InvalidInput(format!(
                "attribute vector has length {}, generator expects {}",
                y.len(),
                self.cfg.n_attributes
            )));
        }
        check_finite(&y.0, "attribute vector")?;
        Ok(AttributeVector(self.apply(&y.0)))
    }

    fn latent_dim(&self) -> usize {
        self.cfg.n_latents + self.cfg.n_attributes
    }

    fn physical(&self, y: &AttributeVector, z: &LatentVector) -> Result<PhysicalParams> {
        let (k, n) = (self.cfg.n_latents, self.cfg.n_attributes);
        if z.0.len() != k + n {
            return Err(Error::InvalidInput(format!(
                "latent vector has length {}, generator expects {}",
                z.0.len(),
                k + n
            )));
        }
        let mut world = self.world_attributes(y)?;
        let r = &z.0[k..];
        for (i, w) in world.0.iter_mut().enumerate() {
            *w += (0..=i).map(|j| self.residual_factor[i * n + j] * r[j]).sum::<f64>();
        }
        param_map(&world, &LatentVector(z.0[..k].to_vec()), &self.cfg)
    }
}
