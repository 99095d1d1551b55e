//! C ABI over `mlrfit`.
//!
//! Models and inverses are opaque heap handles released with the matching
//! `*_free` function. Every fallible call returns an [`MlrStatus`]; the
//! message of the last failure on the calling thread is available through
//! [`mlr_last_error_message`]. Matrices are passed row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use mlrfit::em::{fit, Dataset, EmOptions, FitStatus};
use mlrfit::io::{ModelFile, ModelMetadata};
use mlrfit::{
    invert, CompressedForm, HierarchicalPartition, InverseMlr, MlrError, PsdMlr, RankAllocation,
};
use nalgebra::{DMatrix, DVector};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Structural = 4,
    Numerical = 5,
    Io = 6,
    Parse = 7,
    NotConverged = 8,
    Panic = 9,
}

/// Opaque PSD MLR covariance model.
pub struct MlrModel {
    inner: PsdMlr,
}

/// Opaque inverse of a model, with its log-determinant.
pub struct MlrInverse {
    inner: InverseMlr,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &MlrError) -> MlrStatus {
    match e {
        MlrError::Dimension { .. } | MlrError::PartitionMismatch { .. } => MlrStatus::Dimension,
        MlrError::Structural(_)
        | MlrError::NotNested { .. }
        | MlrError::EmptyGroup { .. }
        | MlrError::SchemaVersion { .. } => MlrStatus::Structural,
        MlrError::Numerical(_)
        | MlrError::NonFiniteLikelihood { .. }
        | MlrError::Singular(_)
        | MlrError::RankDeficientCovariates { .. } => MlrStatus::Numerical,
        MlrError::Io(_) => MlrStatus::Io,
        MlrError::Parse { .. } | MlrError::Json(_) | MlrError::Csv(_) => MlrStatus::Parse,
        _ => MlrStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), MlrStatus>) -> MlrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MlrStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic".into());
            MlrStatus::Panic
        }
    }
}

fn fail(e: MlrError) -> MlrStatus {
    let status = status_of(&e);
    set_error(e.to_string());
    status
}

fn null(what: &str) -> MlrStatus {
    set_error(format!("{what} is null"));
    MlrStatus::NullPointer
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], MlrStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], MlrStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, MlrStatus> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("path is not valid UTF-8".into());
        MlrStatus::InvalidArgument
    })?;
    Ok(Path::new(s))
}

/// Rebuilds a partition from `num_levels` block counts and the concatenated
/// block sizes of every level. A trailing singleton level is implied when
/// the last level listed is not made of singletons.
unsafe fn partition_arg(
    num_levels: usize,
    block_counts: *const usize,
    block_sizes: *const usize,
) -> Result<HierarchicalPartition, MlrStatus> {
    let counts = slice(block_counts, num_levels, "block_counts")?;
    let total: usize = counts.iter().sum();
    let sizes = slice(block_sizes, total, "block_sizes")?;
    let mut levels = Vec::with_capacity(num_levels);
    let mut at = 0;
    for &c in counts {
        levels.push(sizes[at..at + c].to_vec());
        at += c;
    }
    HierarchicalPartition::from_sizes(&levels).map_err(fail)
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mlr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mlr_model_load(path: *const c_char, out: *mut *mut MlrModel) -> MlrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let (model, _) = ModelFile::read(path)
            .and_then(|f| f.to_model())
            .map_err(fail)?;
        *out = Box::into_raw(Box::new(MlrModel { inner: model }));
        Ok(())
    })
}

/// Writes a model JSON file.
///
/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mlr_model_save(model: *const MlrModel, path: *const c_char) -> MlrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path)?;
        ModelFile::from_model(&model.inner, None, None, ModelMetadata::default())
            .write(path)
            .map_err(fail)
    })
}

/// Builds a model from its compressed form.
///
/// `block_counts[l]` is the number of blocks of level `l` and
/// `block_sizes` lists all block sizes level after level. The singleton
/// level may be omitted. `ranks` has one entry per level including the
/// singleton level, whose rank must be 1. `fbar` is `n × (r − 1)` row-major
/// and `d` has length `n`.
///
/// # Safety
/// All arrays must have the lengths implied above.
#[no_mangle]
pub unsafe extern "C" fn mlr_model_from_compressed(
    num_levels: usize,
    block_counts: *const usize,
    block_sizes: *const usize,
    ranks: *const usize,
    fbar: *const f64,
    d: *const f64,
    out: *mut *mut MlrModel,
) -> MlrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let partition = Arc::new(partition_arg(num_levels, block_counts, block_sizes)?);
        let ranks = slice(ranks, partition.num_levels(), "ranks")?;
        let ranks = RankAllocation::new(ranks.to_vec()).map_err(fail)?;
        let n = partition.n();
        let width = ranks.factor_width();
        let fbar = DMatrix::from_row_slice(n, width, slice(fbar, n * width, "fbar")?);
        let d = DVector::from_column_slice(slice(d, n, "d")?);
        let model = PsdMlr::unpack_compressed(partition, ranks, &CompressedForm { fbar, d })
            .map_err(fail)?;
        *out = Box::into_raw(Box::new(MlrModel { inner: model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mlr_model_free(model: *mut MlrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of features, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mlr_model_n(model: *const MlrModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.n())
}

/// `out = Σx`.
///
/// # Safety
/// `x` and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mlr_model_matvec(
    model: *const MlrModel,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> MlrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let x = DVector::from_column_slice(slice(x, len, "x")?);
        let y = model.inner.matvec(&x).map_err(fail)?;
        slice_mut(out, len, "out")?.copy_from_slice(y.as_slice());
        Ok(())
    })
}

/// Computes the inverse and log-determinant.
///
/// # Safety
/// `model` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn mlr_model_invert(
    model: *const MlrModel,
    out: *mut *mut MlrInverse,
) -> MlrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inv = invert(&model.inner).map_err(fail)?;
        *out = Box::into_raw(Box::new(MlrInverse { inner: inv }));
        Ok(())
    })
}

/// Releases an inverse. Null is ignored.
///
/// # Safety
/// `inverse` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mlr_inverse_free(inverse: *mut MlrInverse) {
    if !inverse.is_null() {
        drop(Box::from_raw(inverse));
    }
}

/// `out = Σ⁻¹x`.
///
/// # Safety
/// `x` and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mlr_inverse_apply(
    inverse: *const MlrInverse,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> MlrStatus {
    guard(|| {
        let inverse = inverse.as_ref().ok_or_else(|| null("inverse"))?;
        let x = DVector::from_column_slice(slice(x, len, "x")?);
        let y = inverse.inner.apply_vec(&x).map_err(fail)?;
        slice_mut(out, len, "out")?.copy_from_slice(y.as_slice());
        Ok(())
    })
}

/// `log det Σ`.
///
/// # Safety
/// `inverse` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn mlr_inverse_logdet(
    inverse: *const MlrInverse,
    out: *mut f64,
) -> MlrStatus {
    guard(|| {
        let inverse = inverse.as_ref().ok_or_else(|| null("inverse"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = inverse.inner.logdet();
        Ok(())
    })
}

/// Observed-data log-likelihood of `n_samples × n_features` data `y`.
///
/// # Safety
/// `y` must hold `n_samples · n_features` doubles.
#[no_mangle]
pub unsafe extern "C" fn mlr_model_log_likelihood(
    model: *const MlrModel,
    y: *const f64,
    n_samples: usize,
    n_features: usize,
    out: *mut f64,
) -> MlrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let data = Dataset::new(DMatrix::from_row_slice(
            n_samples,
            n_features,
            slice(y, n_samples * n_features, "y")?,
        ))
        .map_err(fail)?;
        *out = mlrfit::log_likelihood(&model.inner, &data).map_err(fail)?;
        Ok(())
    })
}

/// Fits a model by EM from the Frobenius-sweep start. The hierarchy is
/// given as in [`mlr_model_from_compressed`]. Returns
/// `MLR_STATUS_NOT_CONVERGED` (with the model still written to `out`) when
/// `max_iters` was reached.
///
/// # Safety
/// Arrays must have the implied lengths and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn mlr_fit(
    num_levels: usize,
    block_counts: *const usize,
    block_sizes: *const usize,
    ranks: *const usize,
    y: *const f64,
    n_samples: usize,
    n_features: usize,
    max_iters: usize,
    rel_tol: f64,
    out: *mut *mut MlrModel,
) -> MlrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let partition = Arc::new(partition_arg(num_levels, block_counts, block_sizes)?);
        let ranks = slice(ranks, partition.num_levels(), "ranks")?;
        let ranks = RankAllocation::new(ranks.to_vec()).map_err(fail)?;
        let data = Dataset::new(DMatrix::from_row_slice(
            n_samples,
            n_features,
            slice(y, n_samples * n_features, "y")?,
        ))
        .map_err(fail)?;
        let opts = EmOptions {
            max_iters,
            rel_tol,
            ..Default::default()
        };
        let result = fit(&data, partition, ranks, &opts).map_err(fail)?;
        let converged = result.trace.status == FitStatus::Converged;
        *out = Box::into_raw(Box::new(MlrModel {
            inner: result.model,
        }));
        if converged {
            Ok(())
        } else {
            set_error(format!("EM stopped after {max_iters} iterations"));
            Err(MlrStatus::NotConverged)
        }
    })
}
