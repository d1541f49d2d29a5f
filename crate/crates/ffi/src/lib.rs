//! C interface to saved adherence models.
//!
//! Every fallible call returns an [`AdhStatus`]; on failure the message is
//! available from [`adh_last_error`] on the same thread until the next call.
//! Models are opaque handles released with [`adh_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use adherence::config::RunConfig;
use adherence::learners::{Family, FittedModel, LearnerError};
use adherence::pipeline::{self, PipelineError};

/// Result codes shared by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// The model file is missing, unreadable or malformed.
    Load = 3,
    /// The row length or input kind does not fit the model.
    WrongInput = 4,
    Config = 5,
    /// Claims loading, labeling or feature building failed.
    Pipeline = 6,
    /// The output buffer is smaller than the number of scores.
    BufferTooSmall = 7,
    Panic = 8,
}

/// A fitted model loaded from a `.model` file.
pub struct AdhModel {
    inner: FittedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Runs `f`, recording its error message and turning panics into
/// [`AdhStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), (AdhStatus, String)>) -> AdhStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdhStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AdhStatus::Panic
        }
    }
}

fn learner_status(e: &LearnerError) -> AdhStatus {
    match e {
        LearnerError::Load { .. } => AdhStatus::Load,
        _ => AdhStatus::WrongInput,
    }
}

fn pipeline_status(e: &PipelineError) -> AdhStatus {
    match e {
        PipelineError::Config(_) => AdhStatus::Config,
        PipelineError::Learner(l) => learner_status(l),
        _ => AdhStatus::Pipeline,
    }
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn path_arg(s: *const c_char, what: &str) -> Result<PathBuf, (AdhStatus, String)> {
    if s.is_null() {
        return Err((AdhStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and NUL-terminated per the caller contract.
    let text = unsafe { CStr::from_ptr(s) }.to_str().map_err(|_| (AdhStatus::InvalidUtf8, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(text))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn adh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn adh_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a model file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adh_model_load(path: *const c_char, out: *mut *mut AdhModel) -> AdhStatus {
    guard(|| {
        if out.is_null() {
            return Err((AdhStatus::NullPointer, "out is null".into()));
        }
        // SAFETY: forwarded caller contract.
        let path = unsafe { path_arg(path, "path") }?;
        let inner = FittedModel::load(&path).map_err(|e| (learner_status(&e), e.to_string()))?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(AdhModel { inner })) };
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`adh_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn adh_model_free(model: *mut AdhModel) {
    if !model.is_null() {
        // SAFETY: the handle came from Box::into_raw in adh_model_load.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Short family name ("logistic", "tree", "gbt", "mlp", "lstm"), static.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn adh_model_family(model: *const AdhModel) -> *const c_char {
    // SAFETY: caller contract.
    match unsafe { model.as_ref() } {
        None => ptr::null(),
        Some(m) => match m.inner.family() {
            Family::Logistic => c"logistic".as_ptr(),
            Family::DecisionTree => c"tree".as_ptr(),
            Family::GradientBoosting => c"gbt".as_ptr(),
            Family::Mlp => c"mlp".as_ptr(),
            Family::LstmHybrid => c"lstm".as_ptr(),
        },
    }
}

/// Number of phase-level features the model expects per row; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn adh_model_n_features(model: *const AdhModel) -> usize {
    // SAFETY: caller contract.
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.dictionary.len())
}

/// Risk for one unscaled feature row laid out as in features.csv.
/// Tabular models only.
///
/// # Safety
/// `model` must be a live handle, `row` must point to `len` doubles and
/// `risk` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn adh_model_score_row(model: *const AdhModel, row: *const f64, len: usize, risk: *mut f64) -> AdhStatus {
    guard(|| {
        // SAFETY: caller contract.
        let Some(m) = (unsafe { model.as_ref() }) else {
            return Err((AdhStatus::NullPointer, "model is null".into()));
        };
        if row.is_null() || risk.is_null() {
            return Err((AdhStatus::NullPointer, "row or risk is null".into()));
        }
        let expected = m.inner.dictionary.len();
        if len != expected {
            return Err((AdhStatus::WrongInput, format!("row has {len} values, model expects {expected}")));
        }
        // SAFETY: row points to len doubles.
        let values = unsafe { std::slice::from_raw_parts(row, len) };
        let p = m.inner.predict_risk(&m.inner.fingerprint, values).map_err(|e| (learner_status(&e), e.to_string()))?;
        // SAFETY: checked non-null above.
        unsafe { *risk = p };
        Ok(())
    })
}

/// Scores a claims directory: one risk per phase for tabular models, one
/// per transaction for the recurrent model, in scores.csv row order.
/// `config_path` may be null for the default configuration. The number of
/// scores is stored in `*written` even when `capacity` is too small, so a
/// first call with `capacity` 0 sizes the buffer.
///
/// # Safety
/// `model` must be a live handle, the strings NUL-terminated (or
/// `config_path` null), `out` valid for `capacity` doubles (may be null
/// when `capacity` is 0) and `written` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn adh_model_score_claims(
    model: *const AdhModel,
    config_path: *const c_char,
    claims_dir: *const c_char,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> AdhStatus {
    guard(|| {
        // SAFETY: caller contract.
        let Some(m) = (unsafe { model.as_ref() }) else {
            return Err((AdhStatus::NullPointer, "model is null".into()));
        };
        if written.is_null() || (out.is_null() && capacity > 0) {
            return Err((AdhStatus::NullPointer, "out or written is null".into()));
        }
        // SAFETY: forwarded caller contract.
        let claims = unsafe { path_arg(claims_dir, "claims_dir") }?;
        let cfg = if config_path.is_null() {
            RunConfig::default().validated().map_err(|e| (AdhStatus::Config, e.to_string()))?
        } else {
            // SAFETY: forwarded caller contract.
            let path = unsafe { path_arg(config_path, "config_path") }?;
            RunConfig::load(&path).map_err(|e| (AdhStatus::Config, e.to_string()))?
        };
        let rows = score(&cfg, &m.inner, &claims)?;
        // SAFETY: checked non-null above.
        unsafe { *written = rows.len() };
        if rows.len() > capacity {
            return Err((AdhStatus::BufferTooSmall, format!("{} scores, capacity {capacity}", rows.len())));
        }
        if !rows.is_empty() {
            // SAFETY: out holds at least capacity >= rows.len() doubles.
            unsafe { std::slice::from_raw_parts_mut(out, rows.len()) }.copy_from_slice(&rows);
        }
        Ok(())
    })
}

fn score(cfg: &RunConfig, model: &FittedModel, claims: &Path) -> Result<Vec<f64>, (AdhStatus, String)> {
    let rows = pipeline::score_rows(cfg, model, claims, None).map_err(|e| (pipeline_status(&e), e.to_string()))?;
    Ok(rows.into_iter().map(|r| r.risk).collect())
}
