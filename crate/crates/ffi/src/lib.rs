//! C ABI over `dice-core`.
//!
//! Every fallible function returns a [`DiceStatus`]; on failure the message
//! is available from [`dice_last_error_message`] on the same thread until
//! the next failing call. Handles are opaque and must be released with the
//! matching `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dice_core::cli::config::RunConfig;
use dice_core::cli::eval::run_eval;
use dice_core::encoder::{load_feature_bundle, FeatureBundle, PatchTokenGrid};
use dice_core::metrics::{self, ScoredSet};
use dice_core::prompts::TextTokenPair;
use dice_core::scoring::{language_map, language_score, visual_reference_map, AnomalyMap};
use dice_core::DiceError;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiceStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Data = 4,
    Io = 5,
    UndefinedMetric = 6,
    Config = 7,
    Panic = 8,
}

impl From<&DiceError> for DiceStatus {
    fn from(e: &DiceError) -> Self {
        match e {
            DiceError::ShapeMismatch(_) | DiceError::NotPatchAligned { .. } | DiceError::InvalidDims(_) => {
                DiceStatus::ShapeMismatch
            }
            DiceError::InvalidArgument(_) | DiceError::NoReference | DiceError::EmptyMap => {
                DiceStatus::InvalidArgument
            }
            DiceError::UndefinedAuroc | DiceError::UndefinedAp | DiceError::UndefinedF1 | DiceError::UndefinedPro => {
                DiceStatus::UndefinedMetric
            }
            DiceError::Config(_) => DiceStatus::Config,
            DiceError::Io(_) => DiceStatus::Io,
            _ => DiceStatus::Data,
        }
    }
}

/// A loaded feature bundle (class token plus patch grid).
pub struct DiceFeatureBundle {
    inner: FeatureBundle,
}

/// Averaged normal/anomalous text tokens with their temperature.
pub struct DiceTextTokens {
    inner: TextTokenPair,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: DiceStatus, msg: impl Into<String>) -> DiceStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), DiceStatus>) -> DiceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DiceStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(DiceStatus::Panic, "internal panic"),
    }
}

fn core_err(e: DiceError) -> DiceStatus {
    fail(DiceStatus::from(&e), e.to_string())
}

fn null(name: &str) -> DiceStatus {
    fail(DiceStatus::NullPointer, format!("{name} is null"))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, DiceStatus> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(DiceStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], DiceStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_map(map: &AnomalyMap, out: *mut f64, len: usize) -> Result<(), DiceStatus> {
    let values = map.values();
    if out.is_null() {
        return Err(null("out"));
    }
    if len != values.len() {
        return Err(fail(
            DiceStatus::ShapeMismatch,
            format!("output buffer holds {len} values, map has {}", values.len()),
        ));
    }
    let dst = std::slice::from_raw_parts_mut(out, len);
    for (d, v) in dst.iter_mut().zip(values.iter()) {
        *d = *v;
    }
    Ok(())
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dice_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dice_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a feature bundle directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dice_bundle_load(dir: *const c_char, out: *mut *mut DiceFeatureBundle) -> DiceStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = path_arg(dir, "dir")?;
        let inner = load_feature_bundle(&dir).map_err(core_err)?;
        *out = Box::into_raw(Box::new(DiceFeatureBundle { inner }));
        Ok(())
    })
}

/// Releases a bundle; null is ignored.
///
/// # Safety
/// `bundle` must come from [`dice_bundle_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dice_bundle_free(bundle: *mut DiceFeatureBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Patch grid height, width and token dimension.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dice_bundle_dims(
    bundle: *const DiceFeatureBundle,
    h: *mut usize,
    w: *mut usize,
    d: *mut usize,
) -> DiceStatus {
    guard(|| {
        let b = bundle.as_ref().ok_or_else(|| null("bundle"))?;
        if h.is_null() || w.is_null() || d.is_null() {
            return Err(null("dims output"));
        }
        let g = &b.inner.patch_grid;
        *h = g.height();
        *w = g.width();
        *d = g.dim();
        Ok(())
    })
}

/// Builds text tokens from two `d`-vectors; both are renormalized.
///
/// # Safety
/// `normal` and `anomalous` must point to `d` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dice_text_tokens_new(
    normal: *const f64,
    anomalous: *const f64,
    d: usize,
    tau: f64,
    out: *mut *mut DiceTextTokens,
) -> DiceStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let n = slice_arg(normal, d, "normal")?.to_vec();
        let a = slice_arg(anomalous, d, "anomalous")?.to_vec();
        let inner = TextTokenPair::new(n, a, tau).map_err(core_err)?;
        *out = Box::into_raw(Box::new(DiceTextTokens { inner }));
        Ok(())
    })
}

/// Releases text tokens; null is ignored.
///
/// # Safety
/// `text` must come from [`dice_text_tokens_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dice_text_tokens_free(text: *mut DiceTextTokens) {
    if !text.is_null() {
        drop(Box::from_raw(text));
    }
}

/// Image-level language score of the bundle's class token.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dice_language_score(
    bundle: *const DiceFeatureBundle,
    text: *const DiceTextTokens,
    out: *mut f64,
) -> DiceStatus {
    guard(|| {
        let b = bundle.as_ref().ok_or_else(|| null("bundle"))?;
        let t = text.as_ref().ok_or_else(|| null("text"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = language_score(&b.inner.class_token, &t.inner).map_err(core_err)?;
        Ok(())
    })
}

/// Per-patch language scores, row-major into `out` (`len` must be `h*w`).
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dice_language_map(
    bundle: *const DiceFeatureBundle,
    text: *const DiceTextTokens,
    out: *mut f64,
    len: usize,
) -> DiceStatus {
    guard(|| {
        let b = bundle.as_ref().ok_or_else(|| null("bundle"))?;
        let t = text.as_ref().ok_or_else(|| null("text"))?;
        let map = language_map(&b.inner.patch_grid, &t.inner).map_err(core_err)?;
        write_map(&map, out, len)
    })
}

/// Nearest-reference cosine distance per query patch, row-major into `out`.
///
/// # Safety
/// `refs` must point to `n_refs` valid bundle pointers; `out` to `len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dice_visual_reference_map(
    query: *const DiceFeatureBundle,
    refs: *const *const DiceFeatureBundle,
    n_refs: usize,
    out: *mut f64,
    len: usize,
) -> DiceStatus {
    guard(|| {
        let q = query.as_ref().ok_or_else(|| null("query"))?;
        let refs = slice_arg(refs, n_refs, "refs")?;
        let grids: Vec<&PatchTokenGrid> = refs
            .iter()
            .map(|r| r.as_ref().map(|b| &b.inner.patch_grid).ok_or_else(|| null("reference")))
            .collect::<Result<_, _>>()?;
        let map = visual_reference_map(&q.inner.patch_grid, &grids).map_err(core_err)?;
        write_map(&map, out, len)
    })
}

unsafe fn metric(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
    f: fn(&ScoredSet) -> dice_core::Result<f64>,
) -> DiceStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = slice_arg(scores, n, "scores")?.to_vec();
        let l = slice_arg(labels, n, "labels")?;
        if let Some(bad) = l.iter().find(|&&v| v > 1) {
            return Err(fail(DiceStatus::InvalidArgument, format!("label {bad} is not 0 or 1")));
        }
        let set = ScoredSet::from_u8(s, l).map_err(core_err)?;
        *out = f(&set).map_err(core_err)?;
        Ok(())
    })
}

/// Area under the ROC curve; ties count one half.
///
/// # Safety
/// `scores` and `labels` must point to `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dice_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> DiceStatus {
    metric(scores, labels, n, out, metrics::auroc)
}

/// Step-wise average precision.
///
/// # Safety
/// `scores` and `labels` must point to `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dice_average_precision(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> DiceStatus {
    metric(scores, labels, n, out, metrics::average_precision)
}

/// Maximum F1 over all thresholds.
///
/// # Safety
/// `scores` and `labels` must point to `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dice_f1_max(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> DiceStatus {
    metric(scores, labels, n, out, metrics::f1_max)
}

unsafe fn eval_config(config_path: *const c_char, out_path: *const c_char) -> Result<RunConfig, DiceStatus> {
    let path = path_arg(config_path, "config_path")?;
    let mut config = RunConfig::from_file(&path).map_err(core_err)?;
    if let Some(m) = config.manifest.take() {
        // Relative manifest paths are taken relative to the config file.
        config.manifest = Some(if m.is_relative() {
            path.parent().map_or(m.clone(), |p| p.join(&m))
        } else {
            m
        });
    }
    if !out_path.is_null() {
        config.out = Some(path_arg(out_path, "out_path")?);
    }
    Ok(config)
}

/// Runs a full evaluation from a JSON config file. When `out_path` is not
/// null it overrides the config's report path.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out_path` may be null.
#[no_mangle]
pub unsafe extern "C" fn dice_run_eval(config_path: *const c_char, out_path: *const c_char) -> DiceStatus {
    guard(|| {
        let config = eval_config(config_path, out_path)?;
        run_eval(&config).map_err(core_err)?;
        Ok(())
    })
}

/// Like [`dice_run_eval`] but hands the report JSON back as a string that
/// must be released with [`dice_string_free`].
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dice_run_eval_json(config_path: *const c_char, out_json: *mut *mut c_char) -> DiceStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        *out_json = ptr::null_mut();
        let config = eval_config(config_path, ptr::null())?;
        let report = run_eval(&config).map_err(core_err)?;
        let json = report.to_json().map_err(core_err)?;
        let c = CString::new(json).map_err(|_| fail(DiceStatus::Data, "report contains NUL"))?;
        *out_json = c.into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dice_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
