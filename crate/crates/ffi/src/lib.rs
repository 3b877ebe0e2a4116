//! C interface: load a checkpoint, score feature stacks, and compute EER and
//! linear CKA.
//!
//! Every function returns an [`MgsdStatus`]. On failure the message is kept
//! per thread and read with [`mgsd_last_error_message`]. Panics are caught
//! at the boundary and reported as `MGSD_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mgsd_core::features::{read_features, HiddenStack};
use mgsd_core::model::Model;
use mgsd_core::objectives::{eer_from_scores, linear_cka, llr, Matrix};
use mgsd_core::train::Checkpoint;
use mgsd_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgsdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed checkpoint or feature file.
    Format = 4,
    Config = 5,
    Shape = 6,
    Data = 7,
    Degenerate = 8,
    Panic = 9,
}

/// A loaded model. Opaque to C.
pub struct MgsdModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MgsdStatus {
    match e {
        Error::Shape(_) => MgsdStatus::Shape,
        Error::Config(_) | Error::Toml(_) | Error::Usage(_) => MgsdStatus::Config,
        Error::Data(_) | Error::Diverged(_) => MgsdStatus::Data,
        Error::Degenerate(_) => MgsdStatus::Degenerate,
        Error::Format { .. } | Error::Json(_) => MgsdStatus::Format,
        Error::Io { .. } => MgsdStatus::Io,
    }
}

struct Fail(MgsdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MgsdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MgsdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MgsdStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(MgsdStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(MgsdStatus::InvalidArgument, format!("path is not UTF-8: {e}")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

/// Loads a checkpoint. On success `*out` owns a model to be released with
/// [`mgsd_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mgsd_model_load(path: *const c_char, out: *mut *mut MgsdModel) -> MgsdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let model = Checkpoint::load(&path)?.to_model()?;
        *out = Box::into_raw(Box::new(MgsdModel { model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`mgsd_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mgsd_model_free(model: *mut MgsdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of SSL layers and feature width the model expects.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mgsd_model_dims(model: *const MgsdModel, layers: *mut usize, dim: *mut usize) -> MgsdStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(layers, "layers")?;
        non_null(dim, "dim")?;
        let a = &(*model).model.config.aggregator;
        *layers = a.layers;
        *dim = a.feat_dim;
        Ok(())
    })
}

fn score_stack(model: &Model, stack: &HiddenStack) -> Result<f64, Fail> {
    let a = &model.config.aggregator;
    if stack.layers != a.layers || stack.dim != a.feat_dim {
        return Err(Fail(
            MgsdStatus::Shape,
            format!(
                "features have L={} D={} but the model expects L={} D={}",
                stack.layers, stack.dim, a.layers, a.feat_dim
            ),
        ));
    }
    Ok(llr(&model.logits_one(stack)?)[0])
}

/// Scores one utterance given as `[layers][frames][dim]` float32 values,
/// writing its log-likelihood ratio (bona fide over spoof) to `out_llr`.
///
/// # Safety
/// `features` must hold `layers * frames * dim` floats.
#[no_mangle]
pub unsafe extern "C" fn mgsd_model_score(
    model: *const MgsdModel,
    features: *const f32,
    layers: usize,
    frames: usize,
    dim: usize,
    out_llr: *mut f64,
) -> MgsdStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out_llr, "out_llr")?;
        let n = layers
            .checked_mul(frames)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Fail(MgsdStatus::InvalidArgument, "feature size overflows".into()))?;
        let values = slice(features, n, "features")?.to_vec();
        let stack = HiddenStack::new("ffi", layers, frames, dim, values)?;
        *out_llr = score_stack(&(*model).model, &stack)?;
        Ok(())
    })
}

/// Scores a feature file.
///
/// # Safety
/// `path` must be a NUL-terminated string; the other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mgsd_model_score_file(
    model: *const MgsdModel,
    path: *const c_char,
    out_llr: *mut f64,
) -> MgsdStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out_llr, "out_llr")?;
        let stack = read_features(&path_arg(path)?)?;
        *out_llr = score_stack(&(*model).model, &stack)?;
        Ok(())
    })
}

/// Equal error rate (a fraction) of bona fide and spoof scores, higher
/// meaning more bona fide. `out_threshold` may be null.
///
/// # Safety
/// Arrays must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn mgsd_eer(
    bona: *const f64,
    n_bona: usize,
    spoof: *const f64,
    n_spoof: usize,
    out_eer: *mut f64,
    out_threshold: *mut f64,
) -> MgsdStatus {
    guard(|| {
        non_null(out_eer, "out_eer")?;
        let r = eer_from_scores(slice(bona, n_bona, "bona")?, slice(spoof, n_spoof, "spoof")?)?;
        *out_eer = r.eer;
        if !out_threshold.is_null() {
            *out_threshold = r.threshold;
        }
        Ok(())
    })
}

/// Linear CKA between row-major `rows × cols_a` and `rows × cols_b`
/// matrices.
///
/// # Safety
/// Arrays must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn mgsd_linear_cka(
    a: *const f64,
    cols_a: usize,
    b: *const f64,
    cols_b: usize,
    rows: usize,
    out: *mut f64,
) -> MgsdStatus {
    guard(|| {
        non_null(out, "out")?;
        let size = |c: usize| {
            rows.checked_mul(c)
                .ok_or_else(|| Fail(MgsdStatus::InvalidArgument, "matrix size overflows".into()))
        };
        let a = Matrix::new(rows, cols_a, slice(a, size(cols_a)?, "a")?.to_vec())?;
        let b = Matrix::new(rows, cols_b, slice(b, size(cols_b)?, "b")?.to_vec())?;
        *out = linear_cka(&a, &b)?;
        Ok(())
    })
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mgsd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mgsd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
