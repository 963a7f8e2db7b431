//! Siamese RankNet on top of a spatial transformer.
//!
//! One stack scores one image:
//!
//! 1. Localisation: a box-downsampled `loc_side × loc_side` copy of the
//!    image feeds a `tanh` hidden layer and a linear head producing
//!    `(s, t_x, t_y)`. The head starts at zero weights with bias `(1, 0, 0)`,
//!    i.e. the identity transform.
//! 2. Sampler: a `patch × patch` grid at normalised target coordinates
//!    `x_t = −1 + (2j + 1)/patch` reads the image at `s·x_t + t_x` (same for
//!    `y`) with bilinear interpolation and zero padding. At the identity
//!    this is exactly a box downsample of the whole frame when the image
//!    side is twice the patch side.
//! 3. Head: valid `k × k` convolution (`conv1` maps) → `tanh` → 2×2 average
//!    pool → convolution (`conv2` maps) → `tanh` → pool → dense `tanh` →
//!    dense scalar.
//!
//! Training minimises `log(1 + exp(−(R(more) − R(less))))` averaged over
//! mini-batches with momentum SGD. Both branches of the Siamese pair share
//! one parameter vector. Every activation is smooth, so the only
//! non-differentiable points are the bilinear sampler's integer knots.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use num_traits::Float;

use super::linalg::{gemm, gemm_nt, gemm_tn, Scalar};
use crate::attrworld::Image;
use crate::error::{Error, Result};
use crate::pairgen::OrderedPair;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankNetConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub loc_side: usize,
    pub loc_hidden: usize,
    pub patch: usize,
    pub kernel: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub dense: usize,
}

impl Default for RankNetConfig {
    fn default() -> Self {
        Self {
            image_width: 64,
            image_height: 64,
            loc_side: 16,
            loc_hidden: 32,
            patch: 32,
            kernel: 5,
            conv1: 8,
            conv2: 16,
            dense: 64,
        }
    }
}

impl RankNetConfig {
    /// Small variant (12×12 input, 16×16 patch) used for gradient checks.
    pub fn reduced() -> Self {
        Self {
            image_width: 12,
            image_height: 12,
            loc_side: 6,
            loc_hidden: 8,
            patch: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.loc_side == 0 || self.image_width % self.loc_side != 0 || self.image_height % self.loc_side != 0 {
            return bad(format!(
                "loc_side {} must divide the {}x{} image",
                self.loc_side, self.image_width, self.image_height
            ));
        }
        if [self.loc_hidden, self.kernel, self.conv1, self.conv2, self.dense].contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        let c1 = self.patch.checked_sub(self.kernel - 1).unwrap_or(0);
        if c1 == 0 || c1 % 2 != 0 {
            return bad(format!(
                "patch {} with kernel {} leaves an odd or empty first map",
                self.patch, self.kernel
            ));
        }
        let c2 = (c1 / 2).checked_sub(self.kernel - 1).unwrap_or(0);
        if c2 == 0 || c2 % 2 != 0 {
            return bad(format!("second map would be {c2}x{c2}; it must be even and non-empty"));
        }
        Ok(())
    }

    fn dims(&self) -> Dims {
        let c1 = self.patch - self.kernel + 1;
        let p1 = c1 / 2;
        let c2 = p1 - self.kernel + 1;
        let p2 = c2 / 2;
        Dims {
            loc_in: 3 * self.loc_side * self.loc_side,
            c1,
            p1,
            c2,
            col1_rows: 3 * self.kernel * self.kernel,
            col2_rows: self.conv1 * self.kernel * self.kernel,
            flat: self.conv2 * p2 * p2,
        }
    }

    pub fn layout(&self) -> Layout {
        let d = self.dims();
        let mut off = 0;
        let mut next = |len: usize| {
            let r = off..off + len;
            off += len;
            r
        };
        let loc_w1 = next(self.loc_hidden * d.loc_in);
        let loc_b1 = next(self.loc_hidden);
        let loc_w2 = next(3 * self.loc_hidden);
        let loc_b2 = next(3);
        let c1_w = next(self.conv1 * d.col1_rows);
        let c1_b = next(self.conv1);
        let c2_w = next(self.conv2 * d.col2_rows);
        let c2_b = next(self.conv2);
        let d1_w = next(self.dense * d.flat);
        let d1_b = next(self.dense);
        let d2_w = next(self.dense);
        let d2_b = next(1);
        Layout {
            loc_w1,
            loc_b1,
            loc_w2,
            loc_b2,
            c1_w,
            c1_b,
            c2_w,
            c2_b,
            d1_w,
            d1_b,
            d2_w,
            d2_b,
            total: off,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    loc_in: usize,
    c1: usize,
    p1: usize,
    c2: usize,
    col1_rows: usize,
    col2_rows: usize,
    flat: usize,
}

type Span = std::ops::Range<usize>;

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub loc_w1: Span,
    pub loc_b1: Span,
    pub loc_w2: Span,
    pub loc_b2: Span,
    pub c1_w: Span,
    pub c1_b: Span,
    pub c2_w: Span,
    pub c2_b: Span,
    pub d1_w: Span,
    pub d1_b: Span,
    pub d2_w: Span,
    pub d2_b: Span,
    pub total: usize,
}

impl Layout {
    pub fn named(&self) -> [(&'static str, Span); 12] {
        [
            ("loc_w1", self.loc_w1.clone()),
            ("loc_b1", self.loc_b1.clone()),
            ("loc_w2", self.loc_w2.clone()),
            ("loc_b2", self.loc_b2.clone()),
            ("conv1_w", self.c1_w.clone()),
            ("conv1_b", self.c1_b.clone()),
            ("conv2_w", self.c2_w.clone()),
            ("conv2_b", self.c2_b.clone()),
            ("dense1_w", self.d1_w.clone()),
            ("dense1_b", self.d1_b.clone()),
            ("dense2_w", self.d2_w.clone()),
            ("dense2_b", self.d2_b.clone()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning-rate multiplier of the localisation head.
    pub loc_lr_scale: f64,
    /// Rescales each batch gradient to at most this L2 norm; 0 disables.
    pub clip_norm: f64,
    pub precision: Precision,
    pub schedule: LrSchedule,
    /// Return the parameters of the epoch with the lowest mean training
    /// loss instead of the last epoch's.
    pub keep_best: bool,
}

/// Per-epoch learning-rate multiplier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// `½(1 + cos(π·epoch/epochs))`.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

/// Arithmetic used inside the training loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 32,
            lr: 0.01,
            momentum: 0.9,
            loc_lr_scale: 0.1,
            clip_norm: 5.0,
            precision: Precision::Single,
            schedule: LrSchedule::Cosine,
            keep_best: true,
        }
    }
}

/// Floating-point types the network runs in.
pub trait Real:
    Scalar + Float + std::iter::Sum + std::ops::AddAssign + std::ops::MulAssign + std::fmt::Debug + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
fn c<T: Real>(x: f64) -> T {
    T::from(x).expect("finite constant")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankNetModel {
    pub cfg: RankNetConfig,
    pub params: Vec<f64>,
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Cache<T> {
    loc_in: Vec<T>,
    h1: Vec<T>,
    pub transform: [T; 3],
    /// Source pixel coordinates `(u, v)` of each patch cell.
    coords: Vec<(T, T)>,
    pub patch: Vec<T>,
    col1: Vec<T>,
    t1: Vec<T>,
    q1: Vec<T>,
    col2: Vec<T>,
    t2: Vec<T>,
    q2: Vec<T>,
    h: Vec<T>,
    pub score: T,
}

impl<T: Real> Cache<T> {
    fn new(cfg: &RankNetConfig) -> Self {
        let d = cfg.dims();
        let pp = cfg.patch * cfg.patch;
        let z = T::zero();
        Self {
            loc_in: vec![z; d.loc_in],
            h1: vec![z; cfg.loc_hidden],
            transform: [T::one(), z, z],
            coords: vec![(z, z); pp],
            patch: vec![z; 3 * pp],
            col1: vec![z; d.col1_rows * d.c1 * d.c1],
            t1: vec![z; cfg.conv1 * d.c1 * d.c1],
            q1: vec![z; cfg.conv1 * d.p1 * d.p1],
            col2: vec![z; d.col2_rows * d.c2 * d.c2],
            t2: vec![z; cfg.conv2 * d.c2 * d.c2],
            q2: vec![z; d.flat],
            h: vec![z; cfg.dense],
            score: z,
        }
    }

    /// Smallest distance of any sampling coordinate to an integer knot.
    pub fn knot_margin(&self) -> T {
        self.coords
            .iter()
            .flat_map(|&(u, v)| [u, v])
            .map(|x| (x - x.round()).abs())
            .fold(T::infinity(), T::min)
    }
}

/// Scratch buffers for backward passes.
#[derive(Clone, Debug)]
struct Scratch<T> {
    dh: Vec<T>,
    dq2: Vec<T>,
    da2: Vec<T>,
    dcol2: Vec<T>,
    dq1: Vec<T>,
    da1: Vec<T>,
    dcol1: Vec<T>,
    dpatch: Vec<T>,
    dh1: Vec<T>,
}

impl<T: Real> Scratch<T> {
    fn new(cfg: &RankNetConfig) -> Self {
        let d = cfg.dims();
        let z = T::zero();
        Self {
            dh: vec![z; cfg.dense],
            dq2: vec![z; d.flat],
            da2: vec![z; cfg.conv2 * d.c2 * d.c2],
            dcol2: vec![z; d.col2_rows * d.c2 * d.c2],
            dq1: vec![z; cfg.conv1 * d.p1 * d.p1],
            da1: vec![z; cfg.conv1 * d.c1 * d.c1],
            dcol1: vec![z; d.col1_rows * d.c1 * d.c1],
            dpatch: vec![z; 3 * cfg.patch * cfg.patch],
            dh1: vec![z; cfg.loc_hidden],
        }
    }
}

/// Channel-first `3 × side × side` box downsample feeding the localiser.
pub fn localization_input(img: &Image, side: usize) -> Vec<f64> {
    let fx = img.width / side;
    let fy = img.height / side;
    let norm = 1.0 / (fx * fy) as f64;
    let mut out = vec![0.0; 3 * side * side];
    for ch in 0..3 {
        for oy in 0..side {
            for ox in 0..side {
                let mut acc = 0.0;
                for y in oy * fy..(oy + 1) * fy {
                    for x in ox * fx..(ox + 1) * fx {
                        acc += img.get(x, y, ch);
                    }
                }
                out[(ch * side + oy) * side + ox] = acc * norm;
            }
        }
    }
    out
}

/// Channel-first copy of an image in the working precision.
#[derive(Clone, Debug)]
pub struct Planes<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
    loc_in: Vec<T>,
}

impl<T: Real> Planes<T> {
    pub fn new(img: &Image, loc_side: usize) -> Self {
        let (w, h) = (img.width, img.height);
        let mut data = vec![T::zero(); 3 * w * h];
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(ch * h + y) * w + x] = c(img.get(x, y, ch));
                }
            }
        }
        let loc_in = localization_input(img, loc_side).into_iter().map(c).collect();
        Self {
            width: w,
            height: h,
            data,
            loc_in,
        }
    }

    #[inline]
    fn at(&self, x: isize, y: isize, ch: usize) -> T {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            T::zero()
        } else {
            self.data[(ch * self.height + y as usize) * self.width + x as usize]
        }
    }
}

fn im2col<T: Real>(input: &[T], channels: usize, side: usize, k: usize, out_side: usize, col: &mut [T]) {
    let n = out_side * out_side;
    for ch in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..out_side {
                    let src = &input[(ch * side + oy + ky) * side + kx..][..out_side];
                    dst[oy * out_side..(oy + 1) * out_side].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], channels: usize, side: usize, k: usize, out_side: usize, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    let n = out_side * out_side;
    for ch in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..out_side {
                    let dst = &mut out[(ch * side + oy + ky) * side + kx..][..out_side];
                    dst.iter_mut()
                        .zip(&src[oy * out_side..(oy + 1) * out_side])
                        .for_each(|(d, s)| *d += *s);
                }
            }
        }
    }
}

fn avg_pool<T: Real>(input: &[T], channels: usize, side: usize, out: &mut [T]) {
    let h = side / 2;
    let quarter = c::<T>(0.25);
    for ch in 0..channels {
        let base = ch * side * side;
        for y in 0..h {
            for x in 0..h {
                let s = input[base + 2 * y * side + 2 * x]
                    + input[base + 2 * y * side + 2 * x + 1]
                    + input[base + (2 * y + 1) * side + 2 * x]
                    + input[base + (2 * y + 1) * side + 2 * x + 1];
                out[(ch * h + y) * h + x] = quarter * s;
            }
        }
    }
}

fn avg_pool_back<T: Real>(dout: &[T], channels: usize, side: usize, din: &mut [T]) {
    let h = side / 2;
    let quarter = c::<T>(0.25);
    for ch in 0..channels {
        for y in 0..side {
            for x in 0..side {
                din[(ch * side + y) * side + x] = quarter * dout[(ch * h + y / 2) * h + x / 2];
            }
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn xavier(rng: &mut seed::Rng, out: &mut [f64], fan_in: usize, fan_out: usize) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    out.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
}

impl RankNetModel {
    pub fn new(cfg: RankNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.layout();
        let d = cfg.dims();
        let k2 = cfg.kernel * cfg.kernel;
        let mut params = vec![0.0; l.total];
        let mut rng = seed::rng(seed);
        xavier(&mut rng, &mut params[l.loc_w1.clone()], d.loc_in, cfg.loc_hidden);
        xavier(&mut rng, &mut params[l.c1_w.clone()], 3 * k2, cfg.conv1 * k2);
        xavier(&mut rng, &mut params[l.c2_w.clone()], cfg.conv1 * k2, cfg.conv2 * k2);
        xavier(&mut rng, &mut params[l.d1_w.clone()], d.flat, cfg.dense);
        xavier(&mut rng, &mut params[l.d2_w.clone()], cfg.dense, 1);
        params[l.loc_b2.start] = 1.0;
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: RankNetConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let total = cfg.layout().total;
        if params.len() != total {
            return Err(Error::InvalidInput(format!(
                "RankNet expects {total} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("RankNet parameters are not finite".into()));
        }
        Ok(Self { cfg, params })
    }

    /// Working copy of the network in precision `T`.
    pub fn engine<T: Real>(&self) -> Engine<T> {
        Engine {
            cfg: self.cfg.clone(),
            layout: self.cfg.layout(),
            dims: self.cfg.dims(),
            params: self.params.iter().map(|&v| c(v)).collect(),
        }
    }

    pub fn score(&self, img: &Image) -> Result<f64> {
        let engine = self.engine::<f64>();
        let planes = engine.planes(img)?;
        let mut cache = engine.new_cache();
        engine.forward_into(&planes, &mut cache)?;
        Ok(cache.score)
    }

    /// Scores for many images, sharing one working copy.
    pub fn score_all<'a>(&self, images: impl IntoIterator<Item = &'a Image>) -> Result<Vec<f64>> {
        let engine = self.engine::<f64>();
        let mut cache = engine.new_cache();
        images
            .into_iter()
            .map(|img| {
                engine.forward_into(&engine.planes(img)?, &mut cache)?;
                Ok(cache.score)
            })
            .collect()
    }
}

/// The network evaluated in one floating-point type.
#[derive(Clone, Debug)]
pub struct Engine<T> {
    pub cfg: RankNetConfig,
    layout: Layout,
    dims: Dims,
    pub params: Vec<T>,
}

impl<T: Real> Engine<T> {
    pub fn to_model(&self) -> Result<RankNetModel> {
        RankNetModel::from_params(
            self.cfg.clone(),
            self.params.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        )
    }

    pub fn new_cache(&self) -> Cache<T> {
        Cache::new(&self.cfg)
    }

    pub fn planes(&self, img: &Image) -> Result<Planes<T>> {
        if img.width != self.cfg.image_width || img.height != self.cfg.image_height {
            return Err(Error::InvalidInput(format!(
                "RankNet expects {}x{} images, got {}x{}",
                self.cfg.image_width, self.cfg.image_height, img.width, img.height
            )));
        }
        Ok(Planes::new(img, self.cfg.loc_side))
    }

    pub fn forward_into(&self, img: &Planes<T>, cache: &mut Cache<T>) -> Result<()> {
        let cfg = &self.cfg;
        let l = &self.layout;
        let d = self.dims;
        let p = &self.params;
        let (zero, one, half) = (T::zero(), T::one(), c::<T>(0.5));

        cache.loc_in.copy_from_slice(&img.loc_in);
        cache.h1.copy_from_slice(&p[l.loc_b1.clone()]);
        gemm(
            cfg.loc_hidden,
            d.loc_in,
            1,
            one,
            &p[l.loc_w1.clone()],
            &cache.loc_in,
            one,
            &mut cache.h1,
        );
        cache.h1.iter_mut().for_each(|v| *v = v.tanh());
        let mut theta = [zero; 3];
        for (o, t) in theta.iter_mut().enumerate() {
            *t = p[l.loc_b2.start + o] + dot(&p[l.loc_w2.start + o * cfg.loc_hidden..][..cfg.loc_hidden], &cache.h1);
        }
        cache.transform = theta;

        // sampler
        let [s, tx, ty] = theta;
        let ps = cfg.patch;
        let (w, h): (T, T) = (c(img.width as f64), c(img.height as f64));
        for i in 0..ps {
            let yt: T = c(-1.0 + (2 * i + 1) as f64 / ps as f64);
            let v = ((s * yt + ty + one) * h - one) * half;
            for j in 0..ps {
                let xt: T = c(-1.0 + (2 * j + 1) as f64 / ps as f64);
                let u = ((s * xt + tx + one) * w - one) * half;
                cache.coords[i * ps + j] = (u, v);
                let (u0, v0) = (u.floor(), v.floor());
                let (fu, fv) = (u - u0, v - v0);
                let (x0, y0) = (
                    u0.to_isize().unwrap_or(isize::MIN / 2),
                    v0.to_isize().unwrap_or(isize::MIN / 2),
                );
                for ch in 0..3 {
                    let val = (one - fv) * ((one - fu) * img.at(x0, y0, ch) + fu * img.at(x0 + 1, y0, ch))
                        + fv * ((one - fu) * img.at(x0, y0 + 1, ch) + fu * img.at(x0 + 1, y0 + 1, ch));
                    cache.patch[(ch * ps + i) * ps + j] = val;
                }
            }
        }

        // conv1 on the centred patch
        let n1 = d.c1 * d.c1;
        let centred: Vec<T> = cache.patch.iter().map(|&v| v - half).collect();
        im2col(&centred, 3, ps, cfg.kernel, d.c1, &mut cache.col1);
        for (oc, row) in cache.t1.chunks_exact_mut(n1).enumerate() {
            row.iter_mut().for_each(|v| *v = p[l.c1_b.start + oc]);
        }
        gemm(
            cfg.conv1,
            d.col1_rows,
            n1,
            one,
            &p[l.c1_w.clone()],
            &cache.col1,
            one,
            &mut cache.t1,
        );
        cache.t1.iter_mut().for_each(|v| *v = v.tanh());
        avg_pool(&cache.t1, cfg.conv1, d.c1, &mut cache.q1);

        let n2 = d.c2 * d.c2;
        im2col(&cache.q1, cfg.conv1, d.p1, cfg.kernel, d.c2, &mut cache.col2);
        for (oc, row) in cache.t2.chunks_exact_mut(n2).enumerate() {
            row.iter_mut().for_each(|v| *v = p[l.c2_b.start + oc]);
        }
        gemm(
            cfg.conv2,
            d.col2_rows,
            n2,
            one,
            &p[l.c2_w.clone()],
            &cache.col2,
            one,
            &mut cache.t2,
        );
        cache.t2.iter_mut().for_each(|v| *v = v.tanh());
        avg_pool(&cache.t2, cfg.conv2, d.c2, &mut cache.q2);

        cache.h.copy_from_slice(&p[l.d1_b.clone()]);
        gemm(
            cfg.dense,
            d.flat,
            1,
            one,
            &p[l.d1_w.clone()],
            &cache.q2,
            one,
            &mut cache.h,
        );
        cache.h.iter_mut().for_each(|v| *v = v.tanh());
        cache.score = p[l.d2_b.start] + dot(&p[l.d2_w.clone()], &cache.h);

        if !cache.score.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite RankNet score (transform s={s:?}, tx={tx:?}, ty={ty:?})"
            )));
        }
        Ok(())
    }

    /// Accumulates `dscore · ∂score/∂params` into `grad`.
    fn backward(&self, img: &Planes<T>, cache: &Cache<T>, dscore: T, grad: &mut [T], scratch: &mut Scratch<T>) {
        let cfg = &self.cfg;
        let l = &self.layout;
        let d = self.dims;
        let p = &self.params;
        let (zero, one) = (T::zero(), T::one());

        // dense 2
        grad[l.d2_b.start] += dscore;
        for ((g, &hv), (dh, &wv)) in grad[l.d2_w.clone()]
            .iter_mut()
            .zip(&cache.h)
            .zip(scratch.dh.iter_mut().zip(&p[l.d2_w.clone()]))
        {
            *g += dscore * hv;
            *dh = dscore * wv * (one - hv * hv);
        }
        // dense 1
        for (g, &dv) in grad[l.d1_b.clone()].iter_mut().zip(&scratch.dh) {
            *g += dv;
        }
        gemm(
            cfg.dense,
            1,
            d.flat,
            one,
            &scratch.dh,
            &cache.q2,
            one,
            &mut grad[l.d1_w.clone()],
        );
        gemm_tn(
            d.flat,
            cfg.dense,
            1,
            one,
            &p[l.d1_w.clone()],
            &scratch.dh,
            zero,
            &mut scratch.dq2,
        );

        // conv 2
        avg_pool_back(&scratch.dq2, cfg.conv2, d.c2, &mut scratch.da2);
        scratch
            .da2
            .iter_mut()
            .zip(&cache.t2)
            .for_each(|(g, &t)| *g *= one - t * t);
        let n2 = d.c2 * d.c2;
        for (oc, row) in scratch.da2.chunks_exact(n2).enumerate() {
            grad[l.c2_b.start + oc] += row.iter().copied().sum::<T>();
        }
        gemm_nt(
            cfg.conv2,
            n2,
            d.col2_rows,
            one,
            &scratch.da2,
            &cache.col2,
            one,
            &mut grad[l.c2_w.clone()],
        );
        gemm_tn(
            d.col2_rows,
            cfg.conv2,
            n2,
            one,
            &p[l.c2_w.clone()],
            &scratch.da2,
            zero,
            &mut scratch.dcol2,
        );
        col2im(&scratch.dcol2, cfg.conv1, d.p1, cfg.kernel, d.c2, &mut scratch.dq1);

        // conv 1
        avg_pool_back(&scratch.dq1, cfg.conv1, d.c1, &mut scratch.da1);
        scratch
            .da1
            .iter_mut()
            .zip(&cache.t1)
            .for_each(|(g, &t)| *g *= one - t * t);
        let n1 = d.c1 * d.c1;
        for (oc, row) in scratch.da1.chunks_exact(n1).enumerate() {
            grad[l.c1_b.start + oc] += row.iter().copied().sum::<T>();
        }
        gemm_nt(
            cfg.conv1,
            n1,
            d.col1_rows,
            one,
            &scratch.da1,
            &cache.col1,
            one,
            &mut grad[l.c1_w.clone()],
        );
        gemm_tn(
            d.col1_rows,
            cfg.conv1,
            n1,
            one,
            &p[l.c1_w.clone()],
            &scratch.da1,
            zero,
            &mut scratch.dcol1,
        );
        col2im(&scratch.dcol1, 3, cfg.patch, cfg.kernel, d.c1, &mut scratch.dpatch);

        // sampler: d patch / d (u, v), then chain to (s, tx, ty)
        let ps = cfg.patch;
        let (hw, hh): (T, T) = (c(0.5 * img.width as f64), c(0.5 * img.height as f64));
        let mut dtheta = [zero; 3];
        for i in 0..ps {
            let yt: T = c(-1.0 + (2 * i + 1) as f64 / ps as f64);
            for j in 0..ps {
                let xt: T = c(-1.0 + (2 * j + 1) as f64 / ps as f64);
                let (u, v) = cache.coords[i * ps + j];
                let (u0, v0) = (u.floor(), v.floor());
                let (fu, fv) = (u - u0, v - v0);
                let (x0, y0) = (
                    u0.to_isize().unwrap_or(isize::MIN / 2),
                    v0.to_isize().unwrap_or(isize::MIN / 2),
                );
                let (mut du, mut dv) = (zero, zero);
                for ch in 0..3 {
                    let g = scratch.dpatch[(ch * ps + i) * ps + j];
                    let i00 = img.at(x0, y0, ch);
                    let i10 = img.at(x0 + 1, y0, ch);
                    let i01 = img.at(x0, y0 + 1, ch);
                    let i11 = img.at(x0 + 1, y0 + 1, ch);
                    du += g * ((one - fv) * (i10 - i00) + fv * (i11 - i01));
                    dv += g * ((one - fu) * (i01 - i00) + fu * (i11 - i10));
                }
                // u = ((s·x_t + t_x + 1)·W − 1)/2
                dtheta[0] += (du * hw * xt) + (dv * hh * yt);
                dtheta[1] += du * hw;
                dtheta[2] += dv * hh;
            }
        }

        // localisation head
        let hid = cfg.loc_hidden;
        let dh1 = &mut scratch.dh1;
        dh1.iter_mut().for_each(|v| *v = zero);
        for (o, &dt) in dtheta.iter().enumerate() {
            grad[l.loc_b2.start + o] += dt;
            let w_row = &p[l.loc_w2.start + o * hid..][..hid];
            for k in 0..hid {
                grad[l.loc_w2.start + o * hid + k] += dt * cache.h1[k];
                dh1[k] += dt * w_row[k];
            }
        }
        dh1.iter_mut().zip(&cache.h1).for_each(|(g, &hv)| *g *= one - hv * hv);
        for (g, &dv) in grad[l.loc_b1.clone()].iter_mut().zip(dh1.iter()) {
            *g += dv;
        }
        gemm(
            hid,
            1,
            d.loc_in,
            one,
            &dh1[..],
            &cache.loc_in,
            one,
            &mut grad[l.loc_w1.clone()],
        );
    }

    /// Loss of one ordered pair and, when `grad` is given, accumulation of
    /// `weight · ∂loss/∂params`.
    pub fn pair_loss_grad(
        &self,
        more: &Planes<T>,
        less: &Planes<T>,
        weight: T,
        grad: Option<&mut [T]>,
        ws: &mut PairWorkspace<T>,
    ) -> Result<T> {
        self.forward_into(more, &mut ws.more)?;
        self.forward_into(less, &mut ws.less)?;
        let diff = ws.more.score - ws.less.score;
        let loss = softplus(-diff);
        if let Some(grad) = grad {
            let g = -sigmoid(-diff) * weight;
            self.backward(more, &ws.more, g, grad, &mut ws.scratch);
            self.backward(less, &ws.less, -g, grad, &mut ws.scratch);
        }
        Ok(loss)
    }
}

/// RankNet loss for one ordered pair given its two scores.
pub fn pair_loss(score_more: f64, score_less: f64) -> f64 {
    softplus(-(score_more - score_less))
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Activations of both branches plus backward scratch, reused across steps.
pub struct PairWorkspace<T> {
    pub more: Cache<T>,
    pub less: Cache<T>,
    scratch: Scratch<T>,
}

impl<T: Real> PairWorkspace<T> {
    pub fn new(cfg: &RankNetConfig) -> Self {
        Self {
            more: Cache::new(cfg),
            less: Cache::new(cfg),
            scratch: Scratch::new(cfg),
        }
    }
}

/// Item images converted once to the working precision.
pub struct ImageBank<T> {
    images: HashMap<u64, Planes<T>>,
}

impl<T: Real> ImageBank<T> {
    pub fn new<'a>(cfg: &RankNetConfig, images: impl IntoIterator<Item = (u64, &'a Image)>) -> Result<Self> {
        let mut out = HashMap::new();
        for (id, img) in images {
            if img.width != cfg.image_width || img.height != cfg.image_height {
                return Err(Error::InvalidInput(format!(
                    "item {id} is {}x{}, RankNet expects {}x{}",
                    img.width, img.height, cfg.image_width, cfg.image_height
                )));
            }
            out.insert(id, Planes::new(img, cfg.loc_side));
        }
        Ok(Self { images: out })
    }

    fn get(&self, id: u64) -> Result<&Planes<T>> {
        self.images
            .get(&id)
            .ok_or_else(|| Error::InvalidInput(format!("no image for item {id}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Epoch whose parameters were returned.
    pub kept_epoch: usize,
}

/// Trains from the images of every item the pairs reference.
pub fn train_ranknet<'a>(
    pairs: &[OrderedPair],
    images: impl Fn(u64) -> Option<&'a Image>,
    net: RankNetConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(RankNetModel, TrainReport)> {
    if pairs.is_empty() {
        return Err(Error::Config("RankNet needs at least one training pair".into()));
    }
    if train.batch == 0
        || !(train.lr > 0.0)
        || !(0.0..1.0).contains(&train.momentum)
        || !(train.loc_lr_scale >= 0.0)
        || !(train.clip_norm >= 0.0)
    {
        return Err(Error::Config(format!("invalid RankNet training config {train:?}")));
    }
    net.validate()?;
    let mut ids: Vec<u64> = super::pair_items(pairs);
    ids.sort_unstable();
    let mut lookup = Vec::with_capacity(ids.len());
    for &id in &ids {
        lookup.push((
            id,
            images(id).ok_or_else(|| Error::InvalidInput(format!("no image for item {id}")))?,
        ));
    }
    match train.precision {
        Precision::Single => {
            let bank = ImageBank::<f32>::new(&net, lookup)?;
            train_in(pairs, &bank, net, train, seed)
        }
        Precision::Double => {
            let bank = ImageBank::<f64>::new(&net, lookup)?;
            train_in(pairs, &bank, net, train, seed)
        }
    }
}

fn train_in<T: Real>(
    pairs: &[OrderedPair],
    bank: &ImageBank<T>,
    net: RankNetConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(RankNetModel, TrainReport)> {
    let ordered: Vec<(u64, u64)> = pairs.iter().map(OrderedPair::ordered).collect();
    let mut engine = RankNetModel::new(net, seed::derive_seed(seed, "ranknet-init"))?.engine::<T>();
    let n_params = engine.params.len();
    let mut grad = vec![T::zero(); n_params];
    let mut velocity = vec![T::zero(); n_params];
    let mut ws = PairWorkspace::new(&engine.cfg);
    let mut order: Vec<usize> = (0..ordered.len()).collect();
    let mut rng = seed::rng(seed::derive_seed(seed, "ranknet-shuffle"));
    let momentum: T = c(train.momentum);
    let loc_end = engine.cfg.layout().loc_b2.end;
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Vec<T>)> = None;

    for epoch in 0..train.epochs {
        let factor = train.schedule.factor(epoch, train.epochs);
        let lr: T = c(train.lr * factor);
        let loc_lr: T = c(train.lr * train.loc_lr_scale * factor);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(train.batch).enumerate() {
            grad.iter_mut().for_each(|g| *g = T::zero());
            let weight: T = c(1.0 / batch.len() as f64);
            for &i in batch {
                let (m, l) = ordered[i];
                let loss = engine
                    .pair_loss_grad(bank.get(m)?, bank.get(l)?, weight, Some(&mut grad), &mut ws)
                    .map_err(|e| Error::Numerical(format!("epoch {epoch} step {step}: {e}")))?;
                let loss = loss.to_f64().unwrap_or(f64::NAN);
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "RankNet loss diverged at epoch {epoch} step {step} (pair {m} > {l})"
                    )));
                }
                epoch_loss += loss;
            }
            if train.clip_norm > 0.0 {
                let norm = grad.iter().map(|&g| g * g).sum::<T>().sqrt();
                let cap: T = c(train.clip_norm);
                if norm > cap {
                    let k = cap / norm;
                    grad.iter_mut().for_each(|g| *g *= k);
                }
            }
            for (i, ((p, v), &g)) in engine.params.iter_mut().zip(velocity.iter_mut()).zip(&grad).enumerate() {
                let rate = if i < loc_end { loc_lr } else { lr };
                *v = momentum * *v - rate * g;
                *p += *v;
            }
        }
        let mean = epoch_loss / ordered.len() as f64;
        if !mean.is_finite() || engine.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!(
                "RankNet diverged in epoch {epoch} (mean loss {mean})"
            )));
        }
        report.epoch_losses.push(mean);
        report.kept_epoch = epoch;
        if train.keep_best && best.as_ref().is_none_or(|(loss, _)| mean < *loss) {
            best = Some((mean, engine.params.clone()));
        }
    }
    if let Some((loss, params)) = best {
        report.kept_epoch = report.epoch_losses.iter().position(|&l| l == loss).unwrap_or(0);
        engine.params = params;
    }
    Ok((engine.to_model()?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(w: usize, h: usize, phase: f64) -> Image {
        let mut img = Image::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = 0.5 + 0.4 * ((x as f64 * 0.7 + phase).sin() * (y as f64 * 0.45 + ch as f64).cos());
                    img.set(x, y, ch, v);
                }
            }
        }
        img
    }

    #[test]
    fn identity_sampler_is_box_downsample() {
        let engine = RankNetModel::new(RankNetConfig::default(), 3).unwrap().engine::<f64>();
        let img = test_image(64, 64, 0.3);
        let mut cache = engine.new_cache();
        engine.forward_into(&engine.planes(&img).unwrap(), &mut cache).unwrap();
        assert_eq!(cache.transform, [1.0, 0.0, 0.0]);
        for ch in 0..3 {
            for i in 0..32 {
                for j in 0..32 {
                    let expect = 0.25
                        * (img.get(2 * j, 2 * i, ch)
                            + img.get(2 * j + 1, 2 * i, ch)
                            + img.get(2 * j, 2 * i + 1, ch)
                            + img.get(2 * j + 1, 2 * i + 1, ch));
                    assert!((cache.patch[(ch * 32 + i) * 32 + j] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn siamese_branches_agree() {
        let model = RankNetModel::new(RankNetConfig::default(), 8).unwrap();
        let img = test_image(64, 64, 1.1);
        let copy = img.clone();
        assert_eq!(
            model.score(&img).unwrap().to_bits(),
            model.score(&copy).unwrap().to_bits()
        );
    }

    #[test]
    fn single_and_double_precision_agree() {
        let model = RankNetModel::new(RankNetConfig::default(), 5).unwrap();
        let img = test_image(64, 64, 2.0);
        let e32 = model.engine::<f32>();
        let mut cache = e32.new_cache();
        e32.forward_into(&e32.planes(&img).unwrap(), &mut cache).unwrap();
        assert!((f64::from(cache.score) - model.score(&img).unwrap()).abs() < 1e-4);
    }

    #[test]
    fn equal_scores_give_ln2() {
        assert!((pair_loss(0.7, 0.7) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(pair_loss(50.0, 0.0) < 1e-20);
        assert!((pair_loss(0.0, 800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RankNetConfig::default();
        cfg.patch = 31;
        assert!(cfg.validate().is_err());
        let mut cfg = RankNetConfig::default();
        cfg.loc_side = 15;
        assert!(cfg.validate().is_err());
        assert!(RankNetConfig::reduced().validate().is_ok());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.factor(0, 30), 1.0);
        assert!((LrSchedule::Cosine.factor(15, 30) - 0.5).abs() < 1e-12);
        assert!(LrSchedule::Cosine.factor(29, 30) < 0.01);
        assert_eq!(LrSchedule::Constant.factor(29, 30), 1.0);
    }

    #[test]
    fn keeps_lowest_loss_epoch() {
        let cfg = RankNetConfig::reduced();
        let images: Vec<Image> = (0..6).map(|i| test_image(12, 12, i as f64)).collect();
        let pairs: Vec<OrderedPair> = (0..5u64)
            .map(|i| {
                OrderedPair::new(
                    0,
                    i,
                    i + 1,
                    crate::pairgen::Label::AMore,
                    crate::pairgen::Provenance::Real,
                    crate::pairgen::PairKind::NotApplicable,
                    crate::pairgen::Split::Train,
                )
                .unwrap()
            })
            .collect();
        let train = TrainConfig {
            epochs: 6,
            batch: 2,
            lr: 0.5,
            schedule: LrSchedule::Constant,
            ..TrainConfig::default()
        };
        let (_, report) = train_ranknet(&pairs, |id| images.get(id as usize), cfg, &train, 1).unwrap();
        let best = report.epoch_losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(report.epoch_losses[report.kept_epoch], best);
    }

    #[test]
    fn wrong_image_size_rejected() {
        let model = RankNetModel::new(RankNetConfig::default(), 1).unwrap();
        assert!(model.score(&test_image(32, 32, 0.0)).is_err());
    }
}
