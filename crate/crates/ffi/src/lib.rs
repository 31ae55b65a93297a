//! C ABI over the estimator.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `sg_*_free`. Every fallible call returns an
//! [`SgStatus`]; on failure the message is available from
//! [`sg_last_error`] until the next failing call on the same thread.
//! Matrices are caller-owned column-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DMatrix;
use subspace_gmm::estimator::{self, GmmOptions, RankRule, RankSpec, WeightMatrix};
use subspace_gmm::models::{load_csv, Dataset};
use subspace_gmm::moments::{materialize, MomentFunctionSet, Storage};
use subspace_gmm::{Error, SubspaceEstimate};

/// Status codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidDimension = 2,
    InvalidParameter = 3,
    MissingResponse = 4,
    NonFinite = 5,
    Numerical = 6,
    Parse = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Covariates and optional response.
pub struct SgDataset(Dataset);

/// A list of moment functions.
pub struct SgMomentSet(MomentFunctionSet);

/// An estimated subspace.
pub struct SgEstimate(SubspaceEstimate);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SgStatus {
    match e {
        Error::InvalidDimension(_) | Error::EmptyDataset => SgStatus::InvalidDimension,
        Error::InvalidParameter(_) | Error::Config(_) | Error::Unbound(_) | Error::Precondition(_) => {
            SgStatus::InvalidParameter
        }
        Error::MissingResponse => SgStatus::MissingResponse,
        Error::NonFinite { .. } | Error::NonFiniteMoment { .. } => SgStatus::NonFinite,
        Error::DegenerateMoment(_) | Error::Singular(_) => SgStatus::Numerical,
        Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => SgStatus::Parse,
        Error::Io { .. } => SgStatus::Io,
        Error::Shard { source, .. } => status_of(source),
    }
}

struct Failure(SgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SgStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            SgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SgStatus::InvalidParameter, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn copy_out(values: &[f64], buf: *mut f64, len: usize) -> Result<(), Failure> {
    if buf.is_null() {
        return Err(null("buffer"));
    }
    if len < values.len() {
        return Err(Failure(
            SgStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    Ok(())
}

/// Message of the last failing call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a dataset from an `n × p` column-major covariate buffer and an
/// optional length-`n` response (`y` may be NULL). The buffers are copied.
///
/// # Safety
/// `x` must point to `n·p` doubles and `y`, if non-null, to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_new(x: *const f64, n: usize, p: usize, y: *const f64, out: *mut *mut SgDataset) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if x.is_null() {
            return Err(null("x"));
        }
        let len = n.checked_mul(p).ok_or_else(|| Failure(SgStatus::InvalidDimension, "n·p overflows".into()))?;
        let xs = if len == 0 { &[][..] } else { std::slice::from_raw_parts(x, len) };
        let ys = (!y.is_null() && n > 0).then(|| std::slice::from_raw_parts(y, n).to_vec());
        let data = Dataset::from_matrix(&DMatrix::from_column_slice(n, p, xs), ys)?;
        *out = Box::into_raw(Box::new(SgDataset(data)));
        Ok(())
    })
}

/// Reads a headered CSV file. `response` names the response column and may
/// be NULL.
///
/// # Safety
/// `path` and `response` must be NUL-terminated strings (or NULL for `response`).
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_load_csv(path: *const c_char, response: *const c_char, out: *mut *mut SgDataset) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let response = if response.is_null() { None } else { Some(str_arg(response, "response")?) };
        *out = Box::into_raw(Box::new(SgDataset(load_csv(path, response)?)));
        Ok(())
    })
}

/// Writes the sample size and dimension.
///
/// # Safety
/// `data` must be a live dataset handle; `n` and `p` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_dims(data: *const SgDataset, n: *mut usize, p: *mut usize) -> SgStatus {
    guard(|| {
        let d = &handle(data, "data")?.0;
        *out_arg(n, "n")? = d.n();
        *out_arg(p, "p")? = d.p();
        Ok(())
    })
}

/// # Safety
/// `data` must be NULL or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_free(data: *mut SgDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Parses a moment-set JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sg_moment_set_from_json(json: *const c_char, out: *mut *mut SgMomentSet) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let set = MomentFunctionSet::from_json(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(SgMomentSet(set)));
        Ok(())
    })
}

/// The first- and second-moment set of a factor model with noise level `sigma`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_moment_set_factor(p: usize, sigma: f64, out: *mut *mut SgMomentSet) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(SgMomentSet(MomentFunctionSet::factor(p, sigma)?)));
        Ok(())
    })
}

/// Number of moment functions `m`.
///
/// # Safety
/// `set` must be a live handle and `m` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_moment_set_len(set: *const SgMomentSet, m: *mut usize) -> SgStatus {
    guard(|| {
        *out_arg(m, "m")? = handle(set, "set")?.0.m();
        Ok(())
    })
}

/// # Safety
/// `set` must be NULL or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn sg_moment_set_free(set: *mut SgMomentSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Two-step GMM estimate. `r = 0` estimates the rank with the τ rule; pass
/// `tau <= 0` for the default threshold. `diagonal` selects a diagonal
/// weight.
///
/// # Safety
/// `data` and `set` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_estimate_gmm(
    data: *const SgDataset,
    set: *const SgMomentSet,
    r: usize,
    delta: f64,
    tau: f64,
    diagonal: bool,
    out: *mut *mut SgEstimate,
) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let v = materialize(&handle(data, "data")?.0, &handle(set, "set")?.0, Storage::Auto)?;
        let rank = if r == 0 {
            RankSpec::Auto { rule: RankRule::Tau, tau: (tau > 0.0).then_some(tau), eta_quantile: 0.95 }
        } else {
            RankSpec::Fixed { r }
        };
        let shape = if diagonal { estimator::WeightShape::Diagonal } else { estimator::WeightShape::Full };
        let opts = GmmOptions { rank, ..GmmOptions::fixed(1) }.with_delta(delta).with_shape(shape);
        let est = estimator::two_step_gmm(&v, &opts)?.estimate;
        *out = Box::into_raw(Box::new(SgEstimate(est)));
        Ok(())
    })
}

/// Top-`r` eigenvectors of `V Vᵀ` (identity weight).
///
/// # Safety
/// `data` and `set` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_estimate_identity(data: *const SgDataset, set: *const SgMomentSet, r: usize, out: *mut *mut SgEstimate) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let v = materialize(&handle(data, "data")?.0, &handle(set, "set")?.0, Storage::Auto)?;
        let est = estimator::weighted_eigen(v.v(), &WeightMatrix::identity(v.m()), r)?;
        *out = Box::into_raw(Box::new(SgEstimate(est)));
        Ok(())
    })
}

/// Writes the ambient dimension `p` and the subspace dimension `r`.
///
/// # Safety
/// `est` must be a live handle; `p` and `r` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_estimate_dims(est: *const SgEstimate, p: *mut usize, r: *mut usize) -> SgStatus {
    guard(|| {
        let e = &handle(est, "est")?.0;
        *out_arg(p, "p")? = e.p();
        *out_arg(r, "r")? = e.r;
        Ok(())
    })
}

/// Copies the `p × r` orthonormal basis, column-major, into `buf`.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_estimate_basis(est: *const SgEstimate, buf: *mut f64, len: usize) -> SgStatus {
    guard(|| copy_out(handle(est, "est")?.0.u.as_slice(), buf, len))
}

/// Copies the `p` eigenvalues, in descending order, into `buf`.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_estimate_eigenvalues(est: *const SgEstimate, buf: *mut f64, len: usize) -> SgStatus {
    guard(|| copy_out(handle(est, "est")?.0.eigenvalues.as_slice(), buf, len))
}

/// Frobenius distance between the projections of two estimates.
///
/// # Safety
/// `a` and `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_estimate_distance(a: *const SgEstimate, b: *const SgEstimate, out: *mut f64) -> SgStatus {
    guard(|| {
        let m = estimator::subspace_metrics(&handle(a, "a")?.0.u, &handle(b, "b")?.0.u)?;
        *out_arg(out, "out")? = m.distance;
        Ok(())
    })
}

/// Serializes the estimate as JSON. Release the string with [`sg_string_free`].
///
/// # Safety
/// `est` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_estimate_to_json(est: *const SgEstimate, out: *mut *mut c_char) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let json = handle(est, "est")?.0.to_json()?;
        *out = CString::new(json).expect("JSON has no NUL bytes").into_raw();
        Ok(())
    })
}

/// # Safety
/// `est` must be NULL or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn sg_estimate_free(est: *mut SgEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// # Safety
/// `s` must be NULL or a string returned by this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn sg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
