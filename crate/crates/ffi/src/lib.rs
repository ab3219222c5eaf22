//! C ABI over `csc-core`: load a trained checkpoint, separate mixtures,
//! extract speaker embeddings and score verification trials.
//!
//! Every function returns a `CscStatus`. On failure the message is kept per
//! thread and can be read with `csc_last_error`. Handles are opaque and must
//! be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use csc_core::checkpoint;
use csc_core::metrics::{eer, roc, score_trial};
use csc_core::model::CscModel;
use csc_core::params::ParamStore;
use csc_core::pit::si_snr;
use csc_core::report::{verify_claims, SuiteOptions};
use csc_core::CscError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CscStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Checkpoint = 4,
    Numeric = 5,
    Io = 6,
    CheckFailed = 7,
    Panic = 8,
}

/// A trained separation model with its parameters.
pub struct CscModelHandle {
    model: CscModel,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &CscError) -> CscStatus {
    match e {
        CscError::Config(_) | CscError::Refused(_) => CscStatus::Config,
        CscError::Checkpoint(_) | CscError::Json(_) => CscStatus::Checkpoint,
        CscError::Io(_) => CscStatus::Io,
        CscError::NonFinite { .. } | CscError::NanLoss { .. } | CscError::DegenerateSignal(_) | CscError::DegenerateReference(_) => CscStatus::Numeric,
        _ => CscStatus::InvalidArgument,
    }
}

/// Runs `f`, recording its error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (CscStatus, String)>) -> CscStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CscStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CscStatus::Panic
        }
    }
}

fn lib_err(e: CscError) -> (CscStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CscStatus, String) {
    (CscStatus::NullPointer, format!("{what} is null"))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (CscStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: the caller guarantees `p` points at `len` readable doubles.
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (CscStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: the caller guarantees `p` points at `len` writable doubles.
    Ok(unsafe { slice::from_raw_parts_mut(p, len) })
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point at `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn csc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            // SAFETY: `buf` has room for `len` bytes and `n < len`.
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Loads a checkpoint directory (the one holding `checkpoint.json`).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn csc_model_load(path: *const c_char, out: *mut *mut CscModelHandle) -> CscStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null; the caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| (CscStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let t = checkpoint::load(Path::new(path)).map_err(lib_err)?;
        let handle = Box::new(CscModelHandle { model: t.model, store: t.store });
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(handle) };
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `h` must be null or a handle from `csc_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csc_model_free(h: *mut CscModelHandle) {
    if !h.is_null() {
        // SAFETY: the handle came from Box::into_raw in csc_model_load.
        drop(unsafe { Box::from_raw(h) });
    }
}

/// Number of separated sources; zero for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csc_model_sources(h: *const CscModelHandle) -> usize {
    // SAFETY: null or live, per the contract.
    unsafe { h.as_ref() }.map_or(0, |h| h.model.sources())
}

/// Speaker embedding dimension; zero for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csc_model_embedding_dim(h: *const CscModelHandle) -> usize {
    // SAFETY: null or live, per the contract.
    unsafe { h.as_ref() }.map_or(0, |h| h.model.cfg.encoder.feature_dim)
}

/// Separates a mixture of `len` samples. `estimates` receives
/// `sources * len` values, source-major; `embeddings`, if not null,
/// receives `sources * embedding_dim` values.
///
/// # Safety
/// `h` must be a live handle and the buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn csc_model_separate(h: *const CscModelHandle, mixture: *const f64, len: usize, estimates: *mut f64, embeddings: *mut f64) -> CscStatus {
    guard(|| {
        // SAFETY: null or live, per the contract.
        let h = unsafe { h.as_ref() }.ok_or_else(|| null("model handle"))?;
        // SAFETY: sizes are part of the contract.
        let x = unsafe { input(mixture, len, "mixture") }?;
        let c = h.model.sources();
        let geo = h.model.geometry(len).map_err(lib_err)?;
        let inf = h.model.infer(&h.store, &geo, x).map_err(lib_err)?;
        // SAFETY: as above.
        let est = unsafe { output(estimates, c * len, "estimates") }?;
        for (dst, src) in est.chunks_mut(len).zip(&inf.estimates) {
            dst.copy_from_slice(src);
        }
        if !embeddings.is_null() {
            let d = h.model.cfg.encoder.feature_dim;
            // SAFETY: as above.
            let emb = unsafe { output(embeddings, c * d, "embeddings") }?;
            for (dst, src) in emb.chunks_mut(d).zip(&inf.embeddings) {
                dst.copy_from_slice(src);
            }
        }
        Ok(())
    })
}

/// Scale-invariant SNR in dB of `est` against `reference`.
///
/// # Safety
/// Both inputs must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csc_si_snr(est: *const f64, reference: *const f64, len: usize, out: *mut f64) -> CscStatus {
    guard(|| {
        // SAFETY: sizes are part of the contract.
        let (e, r) = unsafe { (input(est, len, "est")?, input(reference, len, "reference")?) };
        // SAFETY: as above.
        let o = unsafe { output(out, 1, "out") }?;
        o[0] = si_snr(e, r).map_err(lib_err)?;
        Ok(())
    })
}

/// Trial score `-||z - e||^2` of a probe embedding against an enrollment
/// vector, both of dimension `dim`.
///
/// # Safety
/// Both inputs must hold `dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csc_score_trial(enroll: *const f64, probe: *const f64, dim: usize, out: *mut f64) -> CscStatus {
    guard(|| {
        // SAFETY: sizes are part of the contract.
        let (e, z) = unsafe { (input(enroll, dim, "enroll")?, input(probe, dim, "probe")?) };
        // SAFETY: as above.
        let o = unsafe { output(out, 1, "out") }?;
        o[0] = score_trial(e, z).map_err(lib_err)?;
        Ok(())
    })
}

/// Equal error rate and area under the ROC curve of `n` scored trials;
/// `labels[i]` is nonzero for a same-speaker trial.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; the outputs must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn csc_eer_auc(scores: *const f64, labels: *const u8, n: usize, eer_out: *mut f64, auc_out: *mut f64) -> CscStatus {
    guard(|| {
        // SAFETY: sizes are part of the contract.
        let s = unsafe { input(scores, n, "scores") }?;
        if labels.is_null() && n > 0 {
            return Err(null("labels"));
        }
        // SAFETY: checked non-null when n > 0.
        let l: &[u8] = if n == 0 { &[] } else { unsafe { slice::from_raw_parts(labels, n) } };
        let pairs: Vec<(f64, bool)> = s.iter().zip(l).map(|(&x, &y)| (x, y != 0)).collect();
        let a = roc(&pairs).map_err(lib_err)?.auc;
        let e = eer(&pairs).map_err(lib_err)?;
        // SAFETY: as above.
        unsafe {
            output(eer_out, 1, "eer_out")?[0] = e;
            output(auc_out, 1, "auc_out")?[0] = a;
        }
        Ok(())
    })
}

/// Runs the loss identity and mutual information oracle suite.
/// `perturb` is added to one identity as a negative control. Returns
/// `CheckFailed` when any check fails.
#[no_mangle]
pub extern "C" fn csc_verify_claims(perturb: f64) -> CscStatus {
    guard(|| {
        let r = verify_claims(&SuiteOptions { perturb, ..SuiteOptions::default() }).map_err(lib_err)?;
        match r.checks.iter().find(|c| !c.passed) {
            None => Ok(()),
            Some(c) => Err((CscStatus::CheckFailed, format!("check {} failed: worst {} against tolerance {}", c.name, c.worst, c.tolerance))),
        }
    })
}
