use std::ffi::{CStr, CString};
use std::ptr;

use semjitter::attrworld::{render, AttributeVector, LatentVector, WorldConfig};
use semjitter::modelfile::ModelFile;
use semjitter::rankers::ranknet::{RankNetConfig, RankNetModel, TrainConfig};
use semjitter::seed::derive_seed;
use semjitter_ffi::*;

fn last_error() -> String {
    let p = sj_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct World(*mut SjWorld);

impl World {
    fn new(jnd: f64) -> Self {
        let mut w = ptr::null_mut();
        assert_eq!(unsafe { sj_world_new(jnd, &mut w) }, SjStatus::Ok);
        World(w)
    }
}

impl Drop for World {
    fn drop(&mut self) {
        unsafe { sj_world_free(self.0) }
    }
}

#[test]
fn derive_seed_matches_library() {
    let label = CString::new("prior").unwrap();
    let mut out = 0;
    assert_eq!(unsafe { sj_derive_seed(42, label.as_ptr(), &mut out) }, SjStatus::Ok);
    assert_eq!(out, derive_seed(42, "prior"));
    assert_eq!(
        unsafe { sj_derive_seed(42, ptr::null(), &mut out) },
        SjStatus::NullPointer
    );
    assert!(last_error().contains("label"));
    assert_eq!(
        unsafe { sj_derive_seed(42, label.as_ptr(), ptr::null_mut()) },
        SjStatus::NullPointer
    );
}

#[test]
fn world_render_and_compare() {
    let world = World::new(0.02);
    let (mut w, mut h, mut na, mut nl) = (0, 0, 0, 0);
    assert_eq!(
        unsafe { sj_world_shape(world.0, &mut w, &mut h, &mut na, &mut nl) },
        SjStatus::Ok
    );
    let cfg = WorldConfig::default();
    assert_eq!(
        (w, h, na, nl),
        (cfg.image_width, cfg.image_height, cfg.n_attributes, cfg.n_latents)
    );

    let y = vec![0.3, -0.5, 1.0, 0.1];
    let z = vec![0.2, -0.1, 0.4];
    let mut pixels = vec![0.0; w * h * 3];
    let status = unsafe {
        sj_world_render(
            world.0,
            y.as_ptr(),
            na,
            z.as_ptr(),
            nl,
            pixels.as_mut_ptr(),
            pixels.len(),
        )
    };
    assert_eq!(status, SjStatus::Ok);
    let expect = render(&AttributeVector(y.clone()), &LatentVector(z.clone()), &cfg).unwrap();
    assert_eq!(pixels, expect.pixels);

    let short = unsafe { sj_world_render(world.0, y.as_ptr(), na, z.as_ptr(), nl, pixels.as_mut_ptr(), 10) };
    assert_eq!(short, SjStatus::InvalidInput);

    let bigger = vec![2.0, -0.5, 1.0, 0.1];
    let mut order = 0;
    assert_eq!(
        unsafe { sj_world_compare(world.0, 0, bigger.as_ptr(), y.as_ptr(), na, &mut order) },
        SjStatus::Ok
    );
    assert_eq!(order, 1);
    assert_eq!(
        unsafe { sj_world_compare(world.0, 0, y.as_ptr(), bigger.as_ptr(), na, &mut order) },
        SjStatus::Ok
    );
    assert_eq!(order, -1);
    assert_eq!(
        unsafe { sj_world_compare(world.0, 1, y.as_ptr(), bigger.as_ptr(), na, &mut order) },
        SjStatus::Ok
    );
    assert_eq!(order, 0);
    assert_ne!(
        unsafe { sj_world_compare(world.0, 9, y.as_ptr(), y.as_ptr(), na, &mut order) },
        SjStatus::Ok
    );
}

#[test]
fn invalid_world_and_null_handles() {
    let mut w = ptr::null_mut();
    assert_eq!(unsafe { sj_world_new(-1.0, &mut w) }, SjStatus::InvalidInput);
    assert!(w.is_null());
    let mut width = 0;
    let status = unsafe {
        sj_world_shape(
            ptr::null(),
            &mut width,
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, SjStatus::NullPointer);
    unsafe {
        sj_world_free(ptr::null_mut());
        sj_model_free(ptr::null_mut());
    }
}

#[test]
fn model_load_score_compare() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.model");
    let net = RankNetModel::new(RankNetConfig::default(), 9).unwrap();
    ModelFile::from_ranknet(&net, &TrainConfig::default(), 2, 9)
        .unwrap()
        .save(&path)
        .unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { sj_model_load(c_path.as_ptr(), &mut model) }, SjStatus::Ok);
    let (mut kind, mut attribute) = (SjModelKind::Prior, 0);
    assert_eq!(unsafe { sj_model_info(model, &mut kind, &mut attribute) }, SjStatus::Ok);
    assert_eq!((kind, attribute), (SjModelKind::Ranknet, 2));

    let cfg = WorldConfig::default();
    let a = render(
        &AttributeVector(vec![1.0, 0.0, 0.5, 0.0]),
        &LatentVector(vec![0.0; 3]),
        &cfg,
    )
    .unwrap();
    let b = render(
        &AttributeVector(vec![-1.0, 0.3, -0.5, 0.2]),
        &LatentVector(vec![0.5; 3]),
        &cfg,
    )
    .unwrap();
    let (w, h) = (a.width, a.height);
    let (mut sa, mut sb) = (0.0, 0.0);
    assert_eq!(
        unsafe { sj_model_score(model, a.pixels.as_ptr(), w, h, &mut sa) },
        SjStatus::Ok
    );
    assert_eq!(
        unsafe { sj_model_score(model, b.pixels.as_ptr(), w, h, &mut sb) },
        SjStatus::Ok
    );
    assert_eq!(sa, net.score(&a).unwrap());
    let mut more = -1;
    assert_eq!(
        unsafe { sj_model_compare(model, a.pixels.as_ptr(), b.pixels.as_ptr(), w, h, &mut more) },
        SjStatus::Ok
    );
    assert_eq!(more, i32::from(sa > sb));
    assert_eq!(
        unsafe { sj_model_score(model, a.pixels.as_ptr(), 32, 32, &mut sa) },
        SjStatus::InvalidInput
    );
    unsafe { sj_model_free(model) };
}

#[test]
fn model_load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.model").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { sj_model_load(missing.as_ptr(), &mut model) }, SjStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("none.model"));

    let garbage = dir.path().join("garbage.model");
    std::fs::write(&garbage, b"not a model").unwrap();
    let garbage = CString::new(garbage.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sj_model_load(garbage.as_ptr(), &mut model) }, SjStatus::Format);
    assert_eq!(unsafe { sj_model_load(ptr::null(), &mut model) }, SjStatus::NullPointer);
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/semjitter.h");
    for name in [
        "sj_last_error_message",
        "sj_derive_seed",
        "sj_world_new",
        "sj_world_free",
        "sj_world_shape",
        "sj_world_render",
        "sj_world_compare",
        "sj_model_load",
        "sj_model_free",
        "sj_model_info",
        "sj_model_score",
        "sj_model_compare",
        "SJ_STATUS_NULL_POINTER = 1",
        "SJ_STATUS_PANIC = 9",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
