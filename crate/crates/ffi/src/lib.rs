//! C ABI over the bilevel library.
//!
//! Problems live behind an opaque `BlProblem` handle. Every call returns a
//! `BlStatus`; on failure the message is available from `bl_last_error` on
//! the same thread. Panics are caught at the boundary and reported as
//! `BL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::DMatrix;

use bilevel::dynamics::DynamicsSpec;
use bilevel::experiment::{run, RunConfig};
use bilevel::hypergrad::{f_value, hypergrad, Mode};
use bilevel::model::{BilevelProblem, Dataset, HyperVector, Vector};
use bilevel::problems::hyperclean::{hyperclean_problem, HyperCleanSpec};
use bilevel::problems::ridge::{ridge_problem, RidgeSpec};
use bilevel::problems::synthetic::{hyperclean_corrupted, HyperCleanParams};
use bilevel::problems::{ClassificationData, RegressionData};
use bilevel::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    Io = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlMode {
    Reverse = 0,
    Forward = 1,
    FiniteDiff = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlDynamicsKind {
    Gd = 0,
    /// Gradient descent with the step size learned as a hyperparameter.
    HyperLr = 1,
    Momentum = 2,
}

/// Inner optimizer. `mu` is read only for momentum.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct BlDynamics {
    pub kind: BlDynamicsKind,
    pub eta: f64,
    pub mu: f64,
}

enum Handle {
    Regression(BilevelProblem<RegressionData>),
    Classification(BilevelProblem<ClassificationData>),
}

/// Opaque problem handle.
pub struct BlProblem {
    handle: Handle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(BlStatus, String);

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let status = match &err {
            Error::Config(_) => BlStatus::Config,
            Error::Io(_) => BlStatus::Io,
            Error::NonFiniteGradient
            | Error::NonFiniteState { .. }
            | Error::NotPositiveDefinite
            | Error::NonContractive(_)
            | Error::DivergenceDetected { .. } => BlStatus::Numerical,
            _ => BlStatus::InvalidArgument,
        };
        Failure(status, err.to_string())
    }
}

fn fail(status: BlStatus, msg: &str) -> Failure {
    Failure(status, msg.to_string())
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BlStatus::Ok,
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
            set_error(format!("panic: {msg}"));
            BlStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(BlStatus::NullPointer, &format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(fail(BlStatus::NullPointer, &format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn problem_ref<'a>(problem: *const BlProblem) -> Result<&'a BlProblem, Failure> {
    problem
        .as_ref()
        .ok_or_else(|| fail(BlStatus::NullPointer, "problem is null"))
}

unsafe fn c_path(ptr: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(fail(BlStatus::NullPointer, &format!("{what} is null")));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(BlStatus::InvalidArgument, &format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn dynamics_spec(d: &BlDynamics) -> DynamicsSpec {
    match d.kind {
        BlDynamicsKind::Gd => DynamicsSpec::Gd { eta: d.eta },
        BlDynamicsKind::HyperLr => DynamicsSpec::HyperLr { eta: d.eta },
        BlDynamicsKind::Momentum => DynamicsSpec::Momentum { eta: d.eta, mu: d.mu },
    }
}

fn matrix(x: &[f64], rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>, Failure> {
    if rows.checked_mul(cols) != Some(x.len()) {
        return Err(fail(BlStatus::InvalidArgument, &format!("{what} has the wrong size")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, x))
}

fn labels(raw: &[u32]) -> Vec<usize> {
    raw.iter().map(|&l| l as usize).collect()
}

fn store(problem: Handle, out: *mut *mut BlProblem) -> Result<(), Failure> {
    unsafe { *out = Box::into_raw(Box::new(BlProblem { handle: problem })) };
    Ok(())
}

fn check_out<T>(out: *mut T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(BlStatus::NullPointer, "output pointer is null"));
    }
    Ok(())
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next `bl_*` call on the same thread.
#[no_mangle]
pub extern "C" fn bl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Ridge regression with the penalty as hyperparameter. Matrices are
/// row-major: `x` is `n × p`, `x_val` is `n_val × p`.
///
/// # Safety
/// Array arguments must point to at least the stated number of elements and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bl_ridge_new(
    x: *const f64,
    y: *const f64,
    n: usize,
    p: usize,
    x_val: *const f64,
    y_val: *const f64,
    n_val: usize,
    reg: f64,
    dynamics: BlDynamics,
    horizon: usize,
    out: *mut *mut BlProblem,
) -> BlStatus {
    guard(|| {
        check_out(out)?;
        let train = RegressionData::new(
            matrix(slice(x, n * p, "x")?, n, p, "x")?,
            Vector::from_column_slice(slice(y, n, "y")?),
        )?;
        let val = RegressionData::new(
            matrix(slice(x_val, n_val * p, "x_val")?, n_val, p, "x_val")?,
            Vector::from_column_slice(slice(y_val, n_val, "y_val")?),
        )?;
        let spec = RidgeSpec {
            reg,
            dynamics: dynamics_spec(&dynamics),
            horizon,
        };
        store(Handle::Regression(ridge_problem(train, val, &spec)?), out)
    })
}

/// Binary hyper-cleaning with one weight in `[0, 1]` per training example.
/// Labels are 0 or 1.
///
/// # Safety
/// Array arguments must point to at least the stated number of elements and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bl_hyperclean_new(
    x: *const f64,
    labels_train: *const u32,
    n: usize,
    p: usize,
    x_val: *const f64,
    labels_val: *const u32,
    n_val: usize,
    dynamics: BlDynamics,
    horizon: usize,
    out: *mut *mut BlProblem,
) -> BlStatus {
    guard(|| {
        check_out(out)?;
        let train = ClassificationData::new(
            matrix(slice(x, n * p, "x")?, n, p, "x")?,
            labels(slice(labels_train, n, "labels_train")?),
            2,
        )?;
        let val = ClassificationData::new(
            matrix(slice(x_val, n_val * p, "x_val")?, n_val, p, "x_val")?,
            labels(slice(labels_val, n_val, "labels_val")?),
            2,
        )?;
        let spec = HyperCleanSpec::new(&train, dynamics_spec(&dynamics), horizon);
        store(Handle::Classification(hyperclean_problem(train, val, &spec)?), out)
    })
}

/// Hyper-cleaning on two synthetic Gaussians with a fraction `corruption`
/// of flipped training labels.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bl_hyperclean_synthetic_new(
    n_train: usize,
    n_val: usize,
    features: usize,
    corruption: f64,
    seed: u64,
    dynamics: BlDynamics,
    horizon: usize,
    out: *mut *mut BlProblem,
) -> BlStatus {
    guard(|| {
        check_out(out)?;
        let data = hyperclean_corrupted(
            &HyperCleanParams {
                n_train,
                n_val,
                features,
                separation: 2.0,
                noise: 1.0,
                corruption,
            },
            seed,
        )?;
        let spec = HyperCleanSpec {
            mask: Some(data.mask),
            ..HyperCleanSpec::new(&data.train, dynamics_spec(&dynamics), horizon)
        };
        store(Handle::Classification(hyperclean_problem(data.train, data.val, &spec)?), out)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `problem` must come from a `bl_*_new` call and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn bl_problem_free(problem: *mut BlProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

fn template(problem: &BlProblem) -> &HyperVector {
    match &problem.handle {
        Handle::Regression(p) => p.template(),
        Handle::Classification(p) => p.template(),
    }
}

fn with_hyper(problem: &BlProblem, values: &[f64]) -> Result<HyperVector, Failure> {
    let t = template(problem);
    if values.len() != t.len() {
        return Err(fail(
            BlStatus::InvalidArgument,
            &format!("hyperparameter length {} != {}", values.len(), t.len()),
        ));
    }
    Ok(t.with_values(Vector::from_column_slice(values))?)
}

/// Number of hyperparameters.
///
/// # Safety
/// `problem` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bl_problem_hyper_dim(problem: *const BlProblem, out: *mut usize) -> BlStatus {
    guard(|| {
        check_out(out)?;
        *out = template(problem_ref(problem)?).len();
        Ok(())
    })
}

/// Writes the initial hyperparameters into `out[0..len]`; `len` must equal
/// the hyperparameter dimension.
///
/// # Safety
/// `problem` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bl_problem_initial_hyper(problem: *const BlProblem, out: *mut f64, len: usize) -> BlStatus {
    guard(|| {
        let t = template(problem_ref(problem)?);
        if len < t.len() {
            return Err(fail(BlStatus::BufferTooSmall, "output buffer too small"));
        }
        slice_mut(out, len, "out")?[..t.len()].copy_from_slice(t.values().as_slice());
        Ok(())
    })
}

fn run_value<D: Dataset>(p: &BilevelProblem<D>, h: &HyperVector) -> Result<f64, Failure> {
    Ok(f_value(p, h, None)?)
}

/// Truncated outer objective at `hyper`.
///
/// # Safety
/// `problem` must be a live handle, `hyper` must hold `len` doubles and
/// `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bl_problem_value(
    problem: *const BlProblem,
    hyper: *const f64,
    len: usize,
    value: *mut f64,
) -> BlStatus {
    guard(|| {
        check_out(value)?;
        let problem = problem_ref(problem)?;
        let h = with_hyper(problem, slice(hyper, len, "hyper")?)?;
        *value = match &problem.handle {
            Handle::Regression(p) => run_value(p, &h)?,
            Handle::Classification(p) => run_value(p, &h)?,
        };
        Ok(())
    })
}

fn run_grad<D: Dataset>(p: &BilevelProblem<D>, h: &HyperVector, mode: Mode) -> Result<(f64, Vector), Failure> {
    let r = hypergrad(p, h, mode, None)?;
    Ok((r.f_value, r.grad))
}

/// Hypergradient at `hyper` in the requested mode. `value` may be null.
///
/// # Safety
/// `problem` must be a live handle, `hyper` and `grad` must hold `len`
/// doubles and `value` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn bl_problem_hypergrad(
    problem: *const BlProblem,
    hyper: *const f64,
    len: usize,
    mode: BlMode,
    value: *mut f64,
    grad: *mut f64,
) -> BlStatus {
    guard(|| {
        let problem = problem_ref(problem)?;
        let h = with_hyper(problem, slice(hyper, len, "hyper")?)?;
        let mode = match mode {
            BlMode::Reverse => Mode::Reverse,
            BlMode::Forward => Mode::Forward,
            BlMode::FiniteDiff => Mode::FiniteDiff,
        };
        let (f, g) = match &problem.handle {
            Handle::Regression(p) => run_grad(p, &h, mode)?,
            Handle::Classification(p) => run_grad(p, &h, mode)?,
        };
        slice_mut(grad, len, "grad")?.copy_from_slice(g.as_slice());
        if !value.is_null() {
            *value = f;
        }
        Ok(())
    })
}

/// Runs the experiment described by a TOML config. `output_dir` may be null
/// to use the config's own resolution. `passed` receives 1 when every
/// verdict passed and 0 otherwise.
///
/// # Safety
/// Strings must be NUL-terminated and `passed` writable.
#[no_mangle]
pub unsafe extern "C" fn bl_run_config(
    config_path: *const c_char,
    output_dir: *const c_char,
    passed: *mut i32,
) -> BlStatus {
    guard(|| {
        check_out(passed)?;
        let cfg = RunConfig::from_path(&c_path(config_path, "config_path")?)?;
        let dir = if output_dir.is_null() {
            cfg.resolved_output_dir()
        } else {
            c_path(output_dir, "output_dir")?
        };
        *passed = i32::from(run(&cfg, &dir)?.passed());
        Ok(())
    })
}
