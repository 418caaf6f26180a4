use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use dice_core::encoder::{write_feature_bundle, ClassToken, FeatureBundle, PatchTokenGrid};
use dice_ffi::*;
use ndarray::Array2;

fn bundle(dir: &Path, id: &str, h: usize, w: usize, offset: f64) -> std::path::PathBuf {
    let d = 4;
    let tokens = Array2::from_shape_fn((h * w, d), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37 + offset).sin());
    let b = FeatureBundle {
        id: id.into(),
        class_token: ClassToken::new(vec![1.0, offset, 0.5, -0.25]).unwrap(),
        patch_grid: PatchTokenGrid::new(h, w, tokens).unwrap(),
        pseudo_patch_grid: None,
        pseudo_mask: None,
    };
    let path = dir.join(id);
    write_feature_bundle(&b, &path).unwrap();
    path
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = dice_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn load(path: &Path) -> *mut DiceFeatureBundle {
    let mut h = ptr::null_mut();
    assert_eq!(dice_bundle_load(cstr(path).as_ptr(), &mut h), DiceStatus::Ok);
    assert!(!h.is_null());
    h
}

unsafe fn text(d: usize) -> *mut DiceTextTokens {
    let mut n = vec![0.0; d];
    let mut a = vec![0.0; d];
    n[0] = 1.0;
    a[1] = 1.0;
    let mut t = ptr::null_mut();
    assert_eq!(dice_text_tokens_new(n.as_ptr(), a.as_ptr(), d, 0.01, &mut t), DiceStatus::Ok);
    t
}

#[test]
fn bundle_roundtrip_and_maps() {
    let dir = tempfile::tempdir().unwrap();
    let q = bundle(dir.path(), "q", 2, 3, 0.0);
    let r = bundle(dir.path(), "r", 2, 3, 0.4);
    unsafe {
        let qb = load(&q);
        let rb = load(&r);
        let (mut h, mut w, mut d) = (0, 0, 0);
        assert_eq!(dice_bundle_dims(qb, &mut h, &mut w, &mut d), DiceStatus::Ok);
        assert_eq!((h, w, d), (2, 3, 4));

        let t = text(d);
        let mut s = f64::NAN;
        assert_eq!(dice_language_score(qb, t, &mut s), DiceStatus::Ok);
        assert!((0.0..=1.0).contains(&s));

        let mut lmap = vec![f64::NAN; 6];
        assert_eq!(dice_language_map(qb, t, lmap.as_mut_ptr(), 6), DiceStatus::Ok);
        assert!(lmap.iter().all(|v| (0.0..=1.0).contains(v)));

        // Against itself every patch has an exact match.
        let refs = [qb as *const DiceFeatureBundle];
        let mut vmap = vec![f64::NAN; 6];
        assert_eq!(dice_visual_reference_map(qb, refs.as_ptr(), 1, vmap.as_mut_ptr(), 6), DiceStatus::Ok);
        assert!(vmap.iter().all(|v| v.abs() < 1e-6));

        let refs = [rb as *const DiceFeatureBundle];
        assert_eq!(dice_visual_reference_map(qb, refs.as_ptr(), 1, vmap.as_mut_ptr(), 6), DiceStatus::Ok);
        assert!(vmap.iter().all(|v| (0.0..=2.0).contains(v)));

        assert_eq!(dice_language_map(qb, t, lmap.as_mut_ptr(), 5), DiceStatus::ShapeMismatch);
        assert!(last_error().contains("5"));

        dice_text_tokens_free(t);
        dice_bundle_free(qb);
        dice_bundle_free(rb);
    }
}

#[test]
fn null_and_missing_inputs() {
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(dice_bundle_load(ptr::null(), &mut h), DiceStatus::NullPointer);
        assert!(last_error().contains("dir"));
        let missing = CString::new("/nonexistent/bundle").unwrap();
        assert_eq!(dice_bundle_load(missing.as_ptr(), &mut h), DiceStatus::Io);
        assert!(h.is_null());
        assert_eq!(dice_bundle_load(missing.as_ptr(), ptr::null_mut()), DiceStatus::NullPointer);
        let mut s = 0.0;
        assert_eq!(dice_language_score(ptr::null(), ptr::null(), &mut s), DiceStatus::NullPointer);
        dice_bundle_free(ptr::null_mut());
        dice_text_tokens_free(ptr::null_mut());
        dice_string_free(ptr::null_mut());
    }
}

#[test]
fn metrics_through_the_abi() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [0u8, 0, 1, 1];
    let mut v = 0.0;
    unsafe {
        assert_eq!(dice_auroc(scores.as_ptr(), labels.as_ptr(), 4, &mut v), DiceStatus::Ok);
        assert!((v - 0.75).abs() < 1e-12);
        assert_eq!(dice_average_precision(scores.as_ptr(), labels.as_ptr(), 4, &mut v), DiceStatus::Ok);
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(dice_f1_max(scores.as_ptr(), labels.as_ptr(), 4, &mut v), DiceStatus::Ok);
        assert!((v - 0.8).abs() < 1e-12);

        let one_class = [1u8; 4];
        assert_eq!(dice_auroc(scores.as_ptr(), one_class.as_ptr(), 4, &mut v), DiceStatus::UndefinedMetric);
        let bad = [0u8, 2, 1, 0];
        assert_eq!(dice_auroc(scores.as_ptr(), bad.as_ptr(), 4, &mut v), DiceStatus::InvalidArgument);
    }
}

#[test]
fn text_tokens_reject_bad_input() {
    let z = [0.0; 3];
    let mut t = ptr::null_mut();
    unsafe {
        assert_ne!(dice_text_tokens_new(z.as_ptr(), z.as_ptr(), 3, 0.01, &mut t), DiceStatus::Ok);
        assert!(t.is_null());
        let a = [1.0, 0.0, 0.0];
        assert_ne!(dice_text_tokens_new(a.as_ptr(), a.as_ptr(), 3, 0.0, &mut t), DiceStatus::Ok);
    }
}

#[test]
fn eval_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    dice_core::cli::fixture::make_synthetic_fixture(3, 4, &dir.path().join("data")).unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"manifest": "data/manifest.json", "mode": "dual", "seeds": [1]}"#,
    )
    .unwrap();
    let out = dir.path().join("report.json");
    unsafe {
        assert_eq!(dice_run_eval(cstr(&config).as_ptr(), cstr(&out).as_ptr()), DiceStatus::Ok);
        assert!(out.exists());
        let mut json = ptr::null_mut();
        assert_eq!(dice_run_eval_json(cstr(&config).as_ptr(), &mut json), DiceStatus::Ok);
        let s = CStr::from_ptr(json).to_str().unwrap().to_owned();
        dice_string_free(json);
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["mode"], "dual");

        std::fs::write(&config, r#"{"bogus": 1}"#).unwrap();
        assert_eq!(dice_run_eval(cstr(&config).as_ptr(), ptr::null()), DiceStatus::Config);
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(dice_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dice.h")).unwrap();
    for name in [
        "dice_last_error_message",
        "dice_version",
        "dice_bundle_load",
        "dice_bundle_free",
        "dice_bundle_dims",
        "dice_text_tokens_new",
        "dice_text_tokens_free",
        "dice_language_score",
        "dice_language_map",
        "dice_visual_reference_map",
        "dice_auroc",
        "dice_average_precision",
        "dice_f1_max",
        "dice_run_eval",
        "dice_run_eval_json",
        "dice_string_free",
        "DICE_STATUS_UNDEFINED_METRIC",
        "typedef struct DiceFeatureBundle DiceFeatureBundle",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
