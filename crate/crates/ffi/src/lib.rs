//! C ABI over `anlab`.
//!
//! Every fallible function returns an [`AnlabStatus`]; on failure the
//! message is available from [`anlab_last_error`] on the same thread.
//! Models are opaque [`AnlabModel`] handles in f32 precision, released
//! with [`anlab_model_free`]. No function panics across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use anlab::arch::{param_count, Model, ModelConfig};
use anlab::normfactor::{classic_residual_factor, lerp_factor, linear_factor};
use anlab::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnlabStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    ShapeMismatch = 4,
    Numerical = 5,
    Io = 6,
    Format = 7,
    /// Output buffer too small; the required size was reported.
    BufferTooSmall = 8,
    /// Internal error; the library caught a panic.
    Internal = 9,
}

/// Opaque model handle.
pub struct AnlabModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn status_of(e: &Error) -> AnlabStatus {
    match e {
        Error::ShapeMismatch { .. } => AnlabStatus::ShapeMismatch,
        Error::DegenerateInput { .. } | Error::InvalidArgument(_) => AnlabStatus::InvalidArgument,
        Error::NumericalFailure { .. } => AnlabStatus::Numerical,
        Error::Config(_) | Error::Json(_) => AnlabStatus::Config,
        Error::Format(_) => AnlabStatus::Format,
        Error::Io { .. } => AnlabStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (AnlabStatus, String)>) -> AnlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AnlabStatus::Ok
        }
        Ok(Err((s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal error");
            AnlabStatus::Internal
        }
    }
}

fn lib(e: Error) -> (AnlabStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AnlabStatus, String) {
    (AnlabStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (AnlabStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (AnlabStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (AnlabStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn model_ref<'a>(p: *const AnlabModel) -> Result<&'a AnlabModel, (AnlabStatus, String)> {
    p.as_ref().ok_or_else(|| null("model"))
}

fn parse_config(json: &str) -> Result<ModelConfig, (AnlabStatus, String)> {
    let cfg: ModelConfig =
        serde_json::from_str(json).map_err(|e| (AnlabStatus::Config, format!("model config: {e}")))?;
    cfg.validate().map_err(lib)?;
    Ok(cfg)
}

/// Message of the last failed call on this thread; empty after a
/// success. Valid until the next call into the library.
#[no_mangle]
pub extern "C" fn anlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Residual factor `(1 − 2α + 2α²)^(−1/2)`.
#[no_mangle]
pub extern "C" fn anlab_lerp_factor(alpha: f64) -> f64 {
    lerp_factor(alpha)
}

/// `1/√2`.
#[no_mangle]
pub extern "C" fn anlab_classic_residual_factor() -> f64 {
    classic_residual_factor()
}

/// `√(d_in/d_out)`.
///
/// # Safety
/// `out` must be null or point to writable memory for one double.
#[no_mangle]
pub unsafe extern "C" fn anlab_linear_factor(d_in: usize, d_out: usize, out: *mut f64) -> AnlabStatus {
    guard(|| {
        let o = out_ref(out, "out")?;
        *o = linear_factor(d_in, d_out).map_err(lib)?;
        Ok(())
    })
}

/// Parameter count of a model config given as JSON, without building it.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn anlab_param_count_for_config(config_json: *const c_char, out: *mut u64) -> AnlabStatus {
    guard(|| {
        let cfg = parse_config(c_str(config_json, "config_json")?)?;
        *out_ref(out, "out")? = param_count(&cfg) as u64;
        Ok(())
    })
}

/// Builds a freshly initialized model.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` null or
/// writable. On success `*out` owns a handle for [`anlab_model_free`].
#[no_mangle]
pub unsafe extern "C" fn anlab_model_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut AnlabModel,
) -> AnlabStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let cfg = parse_config(c_str(config_json, "config_json")?)?;
        let inner = Model::<f32>::build(&cfg, seed).map_err(lib)?;
        *slot = Box::into_raw(Box::new(AnlabModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn anlab_model_free(model: *mut AnlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle or null; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn anlab_model_param_count(model: *const AnlabModel, out: *mut u64) -> AnlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_ref(out, "out")? = m.inner.param_count() as u64;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle or null; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn anlab_model_vocab_size(model: *const AnlabModel, out: *mut usize) -> AnlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_ref(out, "out")? = m.inner.config().vocab_size;
        Ok(())
    })
}

/// Logits for `batch × seq` token ids, written row-major as
/// `batch × seq × vocab` floats into `logits` of capacity `logits_len`.
///
/// # Safety
/// `tokens` must point to `batch·seq` ids and `logits` to `logits_len`
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn anlab_model_forward(
    model: *const AnlabModel,
    tokens: *const u32,
    batch: usize,
    seq: usize,
    logits: *mut f32,
    logits_len: usize,
) -> AnlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let n = batch
            .checked_mul(seq)
            .ok_or_else(|| (AnlabStatus::InvalidArgument, "batch·seq overflows".to_string()))?;
        let need = n * m.inner.config().vocab_size;
        if logits_len < need {
            return Err((
                AnlabStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len} floats, {need} needed"),
            ));
        }
        let ids: Vec<usize> = std::slice::from_raw_parts(tokens, n).iter().map(|&t| t as usize).collect();
        let out = m.inner.logits(&ids, batch, seq).map_err(lib)?;
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(out.data());
        Ok(())
    })
}

/// Writes the model as a checkpoint file.
///
/// # Safety
/// `model` must be a live handle or null; `path` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn anlab_model_save(model: *const AnlabModel, path: *const c_char) -> AnlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = c_str(path, "path")?;
        m.inner.save(Path::new(p)).map_err(lib)
    })
}

/// Loads an f32 checkpoint; optimizer records are ignored.
///
/// # Safety
/// `path` must be null or NUL-terminated; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn anlab_model_load(path: *const c_char, out: *mut *mut AnlabModel) -> AnlabStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let p = c_str(path, "path")?;
        let inner = Model::<f32>::load(Path::new(p)).map_err(lib)?;
        *slot = Box::into_raw(Box::new(AnlabModel { inner }));
        Ok(())
    })
}

/// Materialized model config as JSON. Writes at most `buf_len` bytes
/// including the NUL; `*needed` receives the full size with NUL.
///
/// # Safety
/// `buf` must be null (size query) or hold `buf_len` bytes; `needed`
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn anlab_model_config_json(
    model: *const AnlabModel,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> AnlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        let json = serde_json::to_string(&m.inner.config().materialized())
            .map_err(|e| (AnlabStatus::Internal, e.to_string()))?;
        let n = json.len() + 1;
        if let Some(w) = needed.as_mut() {
            *w = n;
        }
        if buf.is_null() {
            return Ok(());
        }
        if buf_len < n {
            return Err((
                AnlabStatus::BufferTooSmall,
                format!("buffer holds {buf_len} bytes, {n} needed"),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(buf as *mut u8, n);
        dst[..n - 1].copy_from_slice(json.as_bytes());
        dst[n - 1] = 0;
        Ok(())
    })
}
