//! C ABI over the vcreg estimator.
//!
//! Every function returns a [`VcregStatus`]. On failure the message is kept
//! per thread and can be read with [`vcreg_last_error`]. Handles are opaque
//! and must be released with their matching `_free` function. Matrices cross
//! the boundary row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use vcreg::correction::{correct_dirichlet_multinomial, correct_multinomial, zero_replace};
use vcreg::overdispersion::{estimate_alpha_all, pair_halves};
use vcreg::selection::{cv_select_lambda, CvConfig};
use vcreg::simulator::{simulate, SimDataset, SimScenario};
use vcreg::{ConstraintSpec, CountMatrix, Error, FitResult, RegressionData, SolverConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VcregStatus {
    Ok = 0,
    Parse = 2,
    InvalidInput = 3,
    RankDeficient = 4,
    InsufficientReplicates = 5,
    Infeasible = 6,
    BudgetExceeded = 7,
    Numerical = 8,
    Io = 9,
    NullPointer = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

impl From<&Error> for VcregStatus {
    fn from(e: &Error) -> Self {
        match e.category() {
            "parse" | "csv" | "json" => VcregStatus::Parse,
            "invalid_input" => VcregStatus::InvalidInput,
            "rank_deficient" => VcregStatus::RankDeficient,
            "insufficient_replicates" => VcregStatus::InsufficientReplicates,
            "infeasible" => VcregStatus::Infeasible,
            "budget_exceeded" => VcregStatus::BudgetExceeded,
            "numerical" => VcregStatus::Numerical,
            _ => VcregStatus::Io,
        }
    }
}

/// How counts become a design matrix.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VcregCorrection {
    /// `log(W + 1/2)`.
    Multinomial = 0,
    /// Dirichlet-multinomial offset with one shared concentration.
    DirichletMultinomial = 1,
    /// Dirichlet-multinomial offset with concentrations estimated from
    /// rows `i` and `i + n/2` as replicate pairs.
    DirichletMultinomialPaired = 2,
    /// `log(max(W, c))`.
    ZeroReplace = 3,
}

pub struct VcregCounts(CountMatrix);

pub struct VcregFit(FitResult);

pub struct VcregSimulation(SimDataset);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Fail(VcregStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(VcregStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(VcregStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VcregStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VcregStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            VcregStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn out_slice<'a>(data: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Fail> {
    if len < need {
        return Err(Fail(VcregStatus::BufferTooSmall, format!("buffer holds {len} values, need {need}")));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if data.is_null() {
        return Err(null("output buffer"));
    }
    Ok(std::slice::from_raw_parts_mut(data, need))
}

unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Fail> {
    h.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn row_major(data: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

fn shape(n: usize, p: usize) -> Result<usize, Fail> {
    n.checked_mul(p).ok_or_else(|| Fail(VcregStatus::InvalidInput, "matrix size overflows".into()))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn vcreg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a count table from `n * p` row-major counts.
///
/// # Safety
/// `data` must point to `n * p` readable values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vcreg_counts_new(data: *const u64, n: usize, p: usize, out: *mut *mut VcregCounts) -> VcregStatus {
    guard(|| {
        let values = slice(data, shape(n, p)?, "data")?;
        let rows: Vec<Vec<u64>> = if p == 0 { vec![Vec::new(); n] } else { values.chunks(p).map(<[u64]>::to_vec).collect() };
        put(out, VcregCounts(CountMatrix::from_rows(&rows)?))
    })
}

/// Reads a count table from a CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vcreg_counts_load(path: *const c_char, out: *mut *mut VcregCounts) -> VcregStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|e| Fail(VcregStatus::InvalidInput, e.to_string()))?;
        put(out, VcregCounts(vcreg::load_counts(path)?))
    })
}

/// # Safety
/// `counts` must be a live handle; `n` and `p` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn vcreg_counts_shape(counts: *const VcregCounts, n: *mut usize, p: *mut usize) -> VcregStatus {
    guard(|| {
        let c = &handle(counts, "counts")?.0;
        if !n.is_null() {
            *n = c.nrows();
        }
        if !p.is_null() {
            *p = c.ncols();
        }
        Ok(())
    })
}

/// # Safety
/// `counts` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vcreg_counts_free(counts: *mut VcregCounts) {
    if !counts.is_null() {
        drop(Box::from_raw(counts));
    }
}

/// Writes the corrected `n * p` design, row-major, into `design`.
/// `param` is the concentration for `DirichletMultinomial` (infinity allowed)
/// and the replacement constant for `ZeroReplace`; it is ignored otherwise.
///
/// # Safety
/// `counts` must be a live handle and `design` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn vcreg_correct(
    counts: *const VcregCounts,
    method: VcregCorrection,
    param: f64,
    design: *mut f64,
    len: usize,
) -> VcregStatus {
    guard(|| {
        let c = &handle(counts, "counts")?.0;
        let out = out_slice(design, len, shape(c.nrows(), c.ncols())?)?;
        let corrected = match method {
            VcregCorrection::Multinomial => correct_multinomial(c),
            VcregCorrection::DirichletMultinomial => correct_dirichlet_multinomial(c, &vec![param; c.nrows()])?,
            VcregCorrection::DirichletMultinomialPaired => {
                let (alpha, _) = estimate_alpha_all(c, &pair_halves(c.nrows())?)?;
                correct_dirichlet_multinomial(c, &alpha)?
            }
            VcregCorrection::ZeroReplace => zero_replace(c, param)?,
        };
        let p = c.ncols();
        for (k, v) in out.iter_mut().enumerate() {
            *v = corrected.matrix[(k / p, k % p)];
        }
        Ok(())
    })
}

unsafe fn regression(
    design: *const f64,
    n: usize,
    p: usize,
    response: *const f64,
    constraint: *const f64,
    k: usize,
) -> Result<RegressionData, Fail> {
    let b = row_major(slice(design, shape(n, p)?, "design")?, n, p);
    let y = DVector::from_column_slice(slice(response, n, "response")?);
    let c = if constraint.is_null() {
        ConstraintSpec::sum_to_zero(p)
    } else {
        ConstraintSpec::new(row_major(slice(constraint, shape(p, k)?, "constraint")?, p, k))?
    };
    Ok(RegressionData::new(b, y, c)?)
}

/// Fits the constrained Lasso at a fixed `lambda`. `constraint` is a
/// row-major `p * k` matrix `C` imposing `C^T beta = 0`; pass null for the
/// sum-to-zero constraint.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vcreg_fit(
    design: *const f64,
    n: usize,
    p: usize,
    response: *const f64,
    constraint: *const f64,
    k: usize,
    lambda: f64,
    out: *mut *mut VcregFit,
) -> VcregStatus {
    guard(|| {
        let data = regression(design, n, p, response, constraint, k)?;
        put(out, VcregFit(vcreg::solve_constrained_lasso(&data, lambda, &SolverConfig::default())?))
    })
}

/// Chooses `lambda` by K-fold cross-validation and refits on all rows.
///
/// # Safety
/// Same contract as [`vcreg_fit`].
#[no_mangle]
pub unsafe extern "C" fn vcreg_fit_cv(
    design: *const f64,
    n: usize,
    p: usize,
    response: *const f64,
    constraint: *const f64,
    k: usize,
    folds: usize,
    seed: u64,
    out: *mut *mut VcregFit,
) -> VcregStatus {
    guard(|| {
        let data = regression(design, n, p, response, constraint, k)?;
        let config = CvConfig { folds, seed, ..CvConfig::default() };
        let cv = cv_select_lambda(&data, &config, None)?;
        put(out, VcregFit(vcreg::solve_constrained_lasso(&data, cv.lambda_star, &config.solver)?))
    })
}

/// Copies the coefficients into `beta`, which must hold at least `p` values.
///
/// # Safety
/// `fit` must be a live handle and `beta` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn vcreg_fit_coefficients(fit: *const VcregFit, beta: *mut f64, len: usize) -> VcregStatus {
    guard(|| {
        let f = &handle(fit, "fit")?.0;
        out_slice(beta, len, f.beta_hat.len())?.copy_from_slice(&f.beta_hat);
        Ok(())
    })
}

/// Number of coefficients, or zero for a null handle.
///
/// # Safety
/// `fit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn vcreg_fit_len(fit: *const VcregFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.beta_hat.len())
}

/// Penalty the fit was solved at, or NaN for a null handle.
///
/// # Safety
/// `fit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn vcreg_fit_lambda(fit: *const VcregFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.0.lambda)
}

/// KKT certificate of the fit, or NaN for a null handle.
///
/// # Safety
/// `fit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn vcreg_fit_kkt_gap(fit: *const VcregFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.0.kkt_gap)
}

/// # Safety
/// `fit` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vcreg_fit_free(fit: *mut VcregFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Draws the reference synthetic dataset: paired rows, negative binomial
/// depths, noise sd 0.5. `alpha` may be infinity for multinomial counts.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vcreg_simulate(n: usize, p: usize, alpha: f64, seed: u64, out: *mut *mut VcregSimulation) -> VcregStatus {
    guard(|| put(out, VcregSimulation(simulate(&SimScenario::reference(n, p, alpha, seed))?)))
}

/// Copies the simulated counts into a new handle.
///
/// # Safety
/// `sim` must be a live handle and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vcreg_simulation_counts(sim: *const VcregSimulation, out: *mut *mut VcregCounts) -> VcregStatus {
    guard(|| {
        let s = &handle(sim, "simulation")?.0;
        put(out, VcregCounts(s.counts.clone()))
    })
}

/// Copies the `n` responses.
///
/// # Safety
/// `sim` must be a live handle and `y` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn vcreg_simulation_response(sim: *const VcregSimulation, y: *mut f64, len: usize) -> VcregStatus {
    guard(|| {
        let s = &handle(sim, "simulation")?.0;
        out_slice(y, len, s.y.len())?.copy_from_slice(s.y.as_slice());
        Ok(())
    })
}

/// Copies the `p` true coefficients.
///
/// # Safety
/// `sim` must be a live handle and `beta` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn vcreg_simulation_beta(sim: *const VcregSimulation, beta: *mut f64, len: usize) -> VcregStatus {
    guard(|| {
        let s = &handle(sim, "simulation")?.0;
        out_slice(beta, len, s.beta_star.len())?.copy_from_slice(&s.beta_star);
        Ok(())
    })
}

/// # Safety
/// `sim` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vcreg_simulation_free(sim: *mut VcregSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}
