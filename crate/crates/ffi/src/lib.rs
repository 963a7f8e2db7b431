//! C ABI over the semjitter world renderer and persisted ranking models.
//!
//! Every function returns an [`SjStatus`]; on failure a message is kept per
//! thread and can be read with [`sj_last_error_message`]. Handles are opaque
//! and owned by the caller, who must release them with the matching `_free`.
//! Images are row-major RGB `f64` buffers of `width * height * 3` values in
//! `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use semjitter::attrworld::{
    ground_truth_compare, AttributeVector, Comparison, Generator, Image, LatentVector, ProceduralWorld, WorldConfig,
};
use semjitter::modelfile::{ModelFile, ModelKind};
use semjitter::pairgen::Label;
use semjitter::rankers::classifier::{classifier_rank, BinaryClassifierModel};
use semjitter::rankers::ranknet::RankNetModel;
use semjitter::rankers::ranksvm::{decide, score_linear, LinearRankModel, LocalRankModel, LocalRanker};
use semjitter::rankers::FeatureTable;
use semjitter::seed::derive_seed;
use semjitter::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SjStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    Format = 4,
    Io = 5,
    Numerical = 6,
    InsufficientData = 7,
    Unsupported = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SjModelKind {
    RanksvmLinear = 0,
    RanksvmLocal = 1,
    Ranknet = 2,
    Classifier = 3,
    Prior = 4,
}

/// Procedural world renderer.
pub struct SjWorld {
    world: ProceduralWorld,
}

enum Loaded {
    Linear(LinearRankModel),
    Local(Box<LocalRankModel>, LocalRanker),
    Ranknet(RankNetModel),
    Classifier(BinaryClassifierModel),
    Prior,
}

/// A model file loaded for scoring.
pub struct SjModel {
    kind: ModelKind,
    attribute: i64,
    loaded: Loaded,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SjStatus {
    match e {
        Error::InvalidInput(_) => SjStatus::InvalidInput,
        Error::Config(_) => SjStatus::Config,
        Error::Format { .. } => SjStatus::Format,
        Error::Io { .. } => SjStatus::Io,
        Error::Numerical(_) => SjStatus::Numerical,
        Error::InsufficientData(_) | Error::Shortfall { .. } => SjStatus::InsufficientData,
    }
}

struct Fail(SjStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SjStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SjStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SjStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside semjitter".into());
            SjStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SjStatus::InvalidInput, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn image_arg(p: *const f64, width: usize, height: usize, what: &str) -> Result<Image, Fail> {
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Fail(SjStatus::InvalidInput, format!("{what} dimensions overflow")))?;
    if len == 0 {
        return Err(Fail(SjStatus::InvalidInput, format!("{what} is empty")));
    }
    Ok(Image {
        width,
        height,
        pixels: slice_arg(p, len, what)?.to_vec(),
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn sj_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Stable 64-bit seed for `label` under `master_seed`.
///
/// # Safety
/// `label` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sj_derive_seed(master_seed: u64, label: *const c_char, out: *mut u64) -> SjStatus {
    guard(|| {
        let label = str_arg(label, "label")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = derive_seed(master_seed, label);
        Ok(())
    })
}

/// World with the library's default configuration and the given JND
/// fraction.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sj_world_new(jnd_fraction: f64, out: *mut *mut SjWorld) -> SjStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = WorldConfig {
            jnd_fraction,
            ..WorldConfig::default()
        };
        let world = ProceduralWorld::new(cfg)?;
        *out = Box::into_raw(Box::new(SjWorld { world }));
        Ok(())
    })
}

/// # Safety
/// `world` must come from [`sj_world_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sj_world_free(world: *mut SjWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Image width, height, attribute count and latent count.
///
/// # Safety
/// `world` must be live; every out pointer must be writable.
#[no_mangle]
pub unsafe extern "C" fn sj_world_shape(
    world: *const SjWorld,
    width: *mut usize,
    height: *mut usize,
    n_attributes: *mut usize,
    n_latents: *mut usize,
) -> SjStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        if width.is_null() || height.is_null() || n_attributes.is_null() || n_latents.is_null() {
            return Err(null("out"));
        }
        let cfg = w.world.config();
        *width = cfg.image_width;
        *height = cfg.image_height;
        *n_attributes = cfg.n_attributes;
        *n_latents = w.world.latent_dim();
        Ok(())
    })
}

/// Renders `(y, z)` into `out_pixels`, which must hold `out_len ==
/// width * height * 3` values.
///
/// # Safety
/// Buffers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sj_world_render(
    world: *const SjWorld,
    y: *const f64,
    n_y: usize,
    z: *const f64,
    n_z: usize,
    out_pixels: *mut f64,
    out_len: usize,
) -> SjStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        let y = AttributeVector(slice_arg(y, n_y, "y")?.to_vec());
        let z = LatentVector(slice_arg(z, n_z, "z")?.to_vec());
        let img = w.world.render(&y, &z)?;
        if out_pixels.is_null() {
            return Err(null("out_pixels"));
        }
        if out_len != img.pixels.len() {
            return Err(Fail(
                SjStatus::InvalidInput,
                format!("out_len is {out_len}, image needs {}", img.pixels.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out_pixels, out_len).copy_from_slice(&img.pixels);
        Ok(())
    })
}

/// Ground-truth order of two strength vectors on `attribute`: 1 when A
/// shows more, -1 when B does, 0 when the gap is below the JND.
///
/// # Safety
/// `y_a` and `y_b` hold `n_y` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sj_world_compare(
    world: *const SjWorld,
    attribute: usize,
    y_a: *const f64,
    y_b: *const f64,
    n_y: usize,
    out: *mut i32,
) -> SjStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let a = AttributeVector(slice_arg(y_a, n_y, "y_a")?.to_vec());
        let b = AttributeVector(slice_arg(y_b, n_y, "y_b")?.to_vec());
        *out = match ground_truth_compare(&a, &b, attribute, w.world.config())? {
            Comparison::AMore => 1,
            Comparison::BMore => -1,
            Comparison::Indistinguishable => 0,
        };
        Ok(())
    })
}

/// Loads a model file written by the `semjitter` tool.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sj_model_load(path: *const c_char, out: *mut *mut SjModel) -> SjStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let file = ModelFile::load(Path::new(path))?;
        let loaded = match file.kind() {
            ModelKind::RanksvmLinear => Loaded::Linear(file.to_linear()?),
            ModelKind::RanksvmLocal => {
                let m = file.to_local()?;
                let ranker = m.ranker()?;
                Loaded::Local(Box::new(m), ranker)
            }
            ModelKind::Ranknet => Loaded::Ranknet(file.to_ranknet()?),
            ModelKind::Classifier => Loaded::Classifier(file.to_classifier()?),
            ModelKind::Prior => Loaded::Prior,
        };
        *out = Box::into_raw(Box::new(SjModel {
            kind: file.kind(),
            attribute: file.manifest.attribute.map_or(-1, |a| a as i64),
            loaded,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`sj_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sj_model_free(model: *mut SjModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model kind and ranked attribute (-1 when the model has none).
///
/// # Safety
/// `model` must be live; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sj_model_info(model: *const SjModel, kind: *mut SjModelKind, attribute: *mut i64) -> SjStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if kind.is_null() || attribute.is_null() {
            return Err(null("out"));
        }
        *kind = match m.kind {
            ModelKind::RanksvmLinear => SjModelKind::RanksvmLinear,
            ModelKind::RanksvmLocal => SjModelKind::RanksvmLocal,
            ModelKind::Ranknet => SjModelKind::Ranknet,
            ModelKind::Classifier => SjModelKind::Classifier,
            ModelKind::Prior => SjModelKind::Prior,
        };
        *attribute = m.attribute;
        Ok(())
    })
}

/// Attribute score of one image. Local RankSVM models only compare pairs
/// and return `Unsupported` here.
///
/// # Safety
/// `pixels` holds `width * height * 3` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sj_model_score(
    model: *const SjModel,
    pixels: *const f64,
    width: usize,
    height: usize,
    out: *mut f64,
) -> SjStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let img = image_arg(pixels, width, height, "pixels")?;
        *out = single_score(m, &img)?;
        Ok(())
    })
}

fn single_score(m: &SjModel, img: &Image) -> Result<f64, Fail> {
    Ok(match &m.loaded {
        Loaded::Linear(l) => score_linear(l, img)?,
        Loaded::Ranknet(r) => r.score(img)?,
        Loaded::Classifier(c) => classifier_rank(c, img)?,
        Loaded::Local(..) => {
            return Err(Fail(SjStatus::Unsupported, "local models only compare pairs".into()));
        }
        Loaded::Prior => {
            return Err(Fail(
                SjStatus::Unsupported,
                "a prior model does not score images".into(),
            ))
        }
    })
}

/// Writes 1 to `out` when image A is predicted to show the attribute more
/// than image B, otherwise 0.
///
/// # Safety
/// `pixels_a` and `pixels_b` hold `width * height * 3` values each; `out`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn sj_model_compare(
    model: *const SjModel,
    pixels_a: *const f64,
    pixels_b: *const f64,
    width: usize,
    height: usize,
    out: *mut i32,
) -> SjStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let a = image_arg(pixels_a, width, height, "pixels_a")?;
        let b = image_arg(pixels_b, width, height, "pixels_b")?;
        let label = match &m.loaded {
            Loaded::Local(model, ranker) => {
                let mut t = FeatureTable::new(model.items.dim());
                t.insert(0, &model.prepare(&a))?;
                t.insert(1, &model.prepare(&b))?;
                ranker.predict_all(&t, &[(0, 1)])?[0].label
            }
            _ => decide(single_score(m, &a)? - single_score(m, &b)?),
        };
        *out = i32::from(label == Label::AMore);
        Ok(())
    })
}
