//! C ABI over `sbridge-core`.
//!
//! Objects cross the boundary as opaque handles created by `sbd_*_new`-style
//! constructors and released by the matching `sbd_*_free`. Every fallible call
//! returns an [`SbdStatus`]; on failure [`sbd_last_error`] describes the cause.
//! Matrices are dense row-major `f64` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use sbridge_core::bridge::TimeGrid;
use sbridge_core::dimf_gauss::{dimf_run, DimfOptions, DimfResult, GaussianCoupling};
use sbridge_core::error::Error;
use sbridge_core::experiment::benchmark::make_benchmark_gaussians;
use sbridge_core::gauss::{bw2_metrics, Gaussian};
use sbridge_core::grid::GridSpace;
use sbridge_core::oracle::{gaussian_sb_plan, grid_sinkhorn};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NotPositiveDefinite = 4,
    NonConvergence = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

impl From<&Error> for SbdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::DimensionMismatch { .. } => SbdStatus::DimensionMismatch,
            Error::NotPositiveDefinite { .. } | Error::NotPositiveSemiDefinite { .. } => SbdStatus::NotPositiveDefinite,
            Error::NonConvergence { .. } => SbdStatus::NonConvergence,
            Error::Underflow(_) | Error::UnderResolvedGrid(_) | Error::AbsoluteContinuity(_) => SbdStatus::Numerical,
            Error::InvalidBlock(_)
            | Error::InvalidGrid(_)
            | Error::InvalidArgument(_)
            | Error::MarginalMismatch(_)
            | Error::Config(_) => SbdStatus::InvalidArgument,
            Error::Io(_) | Error::Json(_) => SbdStatus::Internal,
        }
    }
}

/// Opaque Gaussian distribution on `R^D`.
pub struct SbdGaussian(Gaussian);

/// Opaque Gaussian coupling on `R^D × R^D`.
pub struct SbdCoupling(GaussianCoupling);

/// Opaque result of [`sbd_dimf_run`].
pub struct SbdDimfResult(DimfResult);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: SbdStatus, msg: impl Into<String>) -> SbdStatus {
    set_error(msg);
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), SbdStatus>) -> SbdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SbdStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(SbdStatus::Internal, "panic inside sbridge"),
    }
}

fn core_err(e: Error) -> SbdStatus {
    let status = SbdStatus::from(&e);
    fail(status, e.to_string())
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), SbdStatus> {
    if p.is_null() {
        Err(fail(SbdStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null-checked and point to `len` readable values.
unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], SbdStatus> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `out` must point to `len` writable values when non-null.
unsafe fn write_out(out: *mut f64, len: usize, values: &[f64]) -> Result<(), SbdStatus> {
    non_null(out, "output buffer")?;
    if len < values.len() {
        return Err(fail(
            SbdStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message describing the last failure on this thread; empty after a success.
/// Valid until the next `sbd_*` call on the same thread.
#[no_mangle]
pub extern "C" fn sbd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates `N(mean, cov)` from `dim` means and a `dim × dim` covariance.
///
/// # Safety
/// `mean` must hold `dim` values, `cov` `dim * dim` values, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_gaussian_new(
    dim: usize,
    mean: *const f64,
    cov: *const f64,
    out: *mut *mut SbdGaussian,
) -> SbdStatus {
    guard(|| {
        non_null(out, "out")?;
        if dim == 0 {
            return Err(fail(SbdStatus::InvalidArgument, "dim must be positive"));
        }
        let m = DVector::from_column_slice(slice(mean, dim, "mean")?);
        let c = DMatrix::from_row_slice(dim, dim, slice(cov, dim * dim, "cov")?);
        let g = Gaussian::new(m, c).map_err(core_err)?;
        *out = boxed(SbdGaussian(g));
        Ok(())
    })
}

/// Draws the seeded benchmark pair used by the convergence experiments.
///
/// # Safety
/// `out_p0` and `out_p1` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_benchmark_gaussians(
    dim: usize,
    seed: u64,
    out_p0: *mut *mut SbdGaussian,
    out_p1: *mut *mut SbdGaussian,
) -> SbdStatus {
    guard(|| {
        non_null(out_p0, "out_p0")?;
        non_null(out_p1, "out_p1")?;
        let (p0, p1) = make_benchmark_gaussians(dim, seed).map_err(core_err)?;
        *out_p0 = boxed(SbdGaussian(p0));
        *out_p1 = boxed(SbdGaussian(p1));
        Ok(())
    })
}

/// # Safety
/// `g` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn sbd_gaussian_free(g: *mut SbdGaussian) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Dimension of `g`, or 0 when `g` is null.
///
/// # Safety
/// `g` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbd_gaussian_dim(g: *const SbdGaussian) -> usize {
    g.as_ref().map_or(0, |g| g.0.dim())
}

/// `KL(p ‖ q)` in nats.
///
/// # Safety
/// `p`, `q` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_gaussian_kl(p: *const SbdGaussian, q: *const SbdGaussian, out: *mut f64) -> SbdStatus {
    guard(|| {
        non_null(p, "p")?;
        non_null(q, "q")?;
        non_null(out, "out")?;
        *out = (*p).0.kl(&(*q).0).map_err(core_err)?;
        Ok(())
    })
}

/// Squared Bures-Wasserstein distance and its unexplained-variance percentage relative to `p`.
///
/// # Safety
/// `p`, `q` must be live handles; `out_bw2` and `out_uvp_percent` writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_gaussian_bw2(
    p: *const SbdGaussian,
    q: *const SbdGaussian,
    out_bw2: *mut f64,
    out_uvp_percent: *mut f64,
) -> SbdStatus {
    guard(|| {
        non_null(p, "p")?;
        non_null(q, "q")?;
        non_null(out_bw2, "out_bw2")?;
        non_null(out_uvp_percent, "out_uvp_percent")?;
        let m = bw2_metrics(&(*p).0, &(*q).0).map_err(core_err)?;
        *out_bw2 = m.bw2_squared;
        *out_uvp_percent = m.uvp_percent;
        Ok(())
    })
}

/// Closed-form entropic optimal coupling of `p0` and `p1` at noise level `epsilon`.
///
/// # Safety
/// `p0`, `p1` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_coupling_sb_plan(
    p0: *const SbdGaussian,
    p1: *const SbdGaussian,
    epsilon: f64,
    out: *mut *mut SbdCoupling,
) -> SbdStatus {
    guard(|| {
        non_null(p0, "p0")?;
        non_null(p1, "p1")?;
        non_null(out, "out")?;
        let c = gaussian_sb_plan(&(*p0).0, &(*p1).0, epsilon).map_err(core_err)?;
        *out = boxed(SbdCoupling(c));
        Ok(())
    })
}

/// Product coupling `p0 ⊗ p1`.
///
/// # Safety
/// `p0`, `p1` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_coupling_independent(
    p0: *const SbdGaussian,
    p1: *const SbdGaussian,
    out: *mut *mut SbdCoupling,
) -> SbdStatus {
    guard(|| {
        non_null(p0, "p0")?;
        non_null(p1, "p1")?;
        non_null(out, "out")?;
        let c = GaussianCoupling::independent(&(*p0).0, &(*p1).0).map_err(core_err)?;
        *out = boxed(SbdCoupling(c));
        Ok(())
    })
}

/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbd_coupling_free(c: *mut SbdCoupling) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Per-endpoint dimension `D`; the joint has dimension `2D`. Zero when `c` is null.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbd_coupling_dim(c: *const SbdCoupling) -> usize {
    c.as_ref().map_or(0, |c| c.0.dim())
}

/// Copies the `2D` joint mean into `out`.
///
/// # Safety
/// `c` must be a live handle and `out` hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn sbd_coupling_mean(c: *const SbdCoupling, out: *mut f64, len: usize) -> SbdStatus {
    guard(|| {
        non_null(c, "coupling")?;
        write_out(out, len, (*c).0.mean().as_slice())
    })
}

/// Copies the `2D × 2D` joint covariance, row-major, into `out`.
///
/// # Safety
/// `c` must be a live handle and `out` hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn sbd_coupling_cov(c: *const SbdCoupling, out: *mut f64, len: usize) -> SbdStatus {
    guard(|| {
        non_null(c, "coupling")?;
        write_out(out, len, &row_major((*c).0.cov()))
    })
}

/// `KL(a ‖ b)` between joint laws, in nats.
///
/// # Safety
/// `a`, `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_coupling_kl(a: *const SbdCoupling, b: *const SbdCoupling, out: *mut f64) -> SbdStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        *out = (*a).0.kl(&(*b).0).map_err(core_err)?;
        Ok(())
    })
}

/// Runs Gaussian D-IMF from `init` on a uniform grid with `n_inner` interior
/// times, tracking KL to the closed-form optimum, until it drops below
/// `threshold` or `max_iters` iterations have run.
///
/// # Safety
/// `p0`, `p1`, `init` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_dimf_run(
    p0: *const SbdGaussian,
    p1: *const SbdGaussian,
    init: *const SbdCoupling,
    n_inner: usize,
    epsilon: f64,
    threshold: f64,
    max_iters: usize,
    out: *mut *mut SbdDimfResult,
) -> SbdStatus {
    guard(|| {
        non_null(p0, "p0")?;
        non_null(p1, "p1")?;
        non_null(init, "init")?;
        non_null(out, "out")?;
        let (p0, p1) = (&(*p0).0, &(*p1).0);
        let grid = TimeGrid::uniform(n_inner).map_err(core_err)?;
        let oracle = gaussian_sb_plan(p0, p1, epsilon).map_err(core_err)?;
        let mut opts = DimfOptions::new(oracle);
        opts.threshold = threshold;
        opts.max_iters = max_iters;
        let res = dimf_run(p0, p1, &(*init).0, &grid, epsilon, &opts).map_err(core_err)?;
        *out = boxed(SbdDimfResult(res));
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbd_dimf_result_free(r: *mut SbdDimfResult) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Number of iterations run; zero when `r` is null.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbd_dimf_result_iterations(r: *const SbdDimfResult) -> usize {
    r.as_ref().map_or(0, |r| r.0.trace.len())
}

/// Whether the threshold was reached.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbd_dimf_result_converged(r: *const SbdDimfResult) -> bool {
    r.as_ref().is_some_and(|r| r.0.converged)
}

/// Copies the per-iteration KL to the optimum and KL between consecutive
/// iterates. Either output may be null to skip it.
///
/// # Safety
/// `r` must be a live handle; non-null outputs must hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn sbd_dimf_result_trace(
    r: *const SbdDimfResult,
    kl_to_oracle: *mut f64,
    kl_step: *mut f64,
    len: usize,
) -> SbdStatus {
    guard(|| {
        non_null(r, "result")?;
        let records = (*r).0.trace.records();
        if !kl_to_oracle.is_null() {
            write_out(kl_to_oracle, len, &records.iter().map(|x| x.kl_to_oracle).collect::<Vec<_>>())?;
        }
        if !kl_step.is_null() {
            write_out(kl_step, len, &records.iter().map(|x| x.kl_step).collect::<Vec<_>>())?;
        }
        Ok(())
    })
}

/// Final coupling of the run, as a new handle.
///
/// # Safety
/// `r` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_dimf_result_coupling(r: *const SbdDimfResult, out: *mut *mut SbdCoupling) -> SbdStatus {
    guard(|| {
        non_null(r, "result")?;
        non_null(out, "out")?;
        *out = boxed(SbdCoupling((*r).0.coupling.clone()));
        Ok(())
    })
}

/// Entropic optimal coupling of two pmfs on `n` evenly spaced points of
/// `[lo, hi]`, written row-major into `out_pi` (`n * n` values).
///
/// # Safety
/// `p0`, `p1` must hold `n` values and `out_pi` `n * n` writable values.
#[no_mangle]
pub unsafe extern "C" fn sbd_grid_sinkhorn_1d(
    n: usize,
    lo: f64,
    hi: f64,
    p0: *const f64,
    p1: *const f64,
    epsilon: f64,
    tol: f64,
    out_pi: *mut f64,
) -> SbdStatus {
    guard(|| {
        let space = GridSpace::uniform_1d(n, lo, hi).map_err(core_err)?;
        let (a, b) = (slice(p0, n, "p0")?, slice(p1, n, "p1")?);
        let pi = grid_sinkhorn(a, b, &space, epsilon, tol).map_err(core_err)?;
        write_out(out_pi, n * n, &row_major(pi.pi()))
    })
}
