//! C ABI for the steinlab library.
//!
//! Conventions:
//! * Every constructor hands back an opaque pointer; destroy it with the
//!   matching `*_free`. All pointers are owned by exactly one side.
//! * Every fallible call returns a [`SteinStatus`]; on failure the
//!   thread-local message is readable via `steinlab_last_error_message`
//!   (free the returned string with `steinlab_string_free`).
//! * Point buffers are particle-major: particle `i` occupies
//!   `data[i*dim .. (i+1)*dim]`.
//! * Kernels, targets and whole experiments are configured by the same
//!   JSON documents the CLI consumes.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use libc::{c_char, c_double, c_int};

use steinlab::cli::ExperimentConfig;
use steinlab::diagnostics::{drift_rkhs_norm_squared, ksd_squared, KsdEstimator};
use steinlab::dynamics::{
    run_trajectory, Ensemble, IntegratorConfig, IntegratorMode,
};
use steinlab::kernels::Kernel;
use steinlab::targets::Target;
use steinlab::Error;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteinStatus {
    Ok = 0,
    /// A pointer argument was null or a buffer length was wrong.
    NullPointer = 1,
    ConfigInvalid = 2,
    NoConvergence = 3,
    NonFinite = 4,
    Io = 5,
    DiagonalUndefined = 6,
    NotPositiveSemidefinite = 7,
    /// Numeric failure (mass defect, ill conditioning, unsupported op).
    Numeric = 8,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 9,
    /// The library panicked; state may be inconsistent.
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let cleaned: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).ok();
    });
}

fn status_of(err: &Error) -> SteinStatus {
    match err {
        Error::DiagonalUndefined(_) => SteinStatus::DiagonalUndefined,
        Error::NotPositiveSemidefinite { .. } => SteinStatus::NotPositiveSemidefinite,
        Error::NonFinite(_) => SteinStatus::NonFinite,
        Error::NoConvergence(_) => SteinStatus::NoConvergence,
        Error::ConfigInvalid(_) | Error::Serde(_) => SteinStatus::ConfigInvalid,
        Error::Io(_) => SteinStatus::Io,
        Error::MassDefect(_) | Error::IllConditioned(_) | Error::Unsupported(_) => {
            SteinStatus::Numeric
        }
    }
}

fn guard(f: impl FnOnce() -> SteinStatus) -> SteinStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic inside steinlab");
            SteinStatus::Panic
        }
    }
}

fn fail(err: Error) -> SteinStatus {
    set_error(&err.to_string());
    status_of(&err)
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, SteinStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(SteinStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        SteinStatus::InvalidUtf8
    })
}

/// Opaque kernel handle.
pub struct SteinlabKernel(Kernel);
/// Opaque target handle.
pub struct SteinlabTarget(Target);
/// Opaque ensemble handle.
pub struct SteinlabEnsemble(Ensemble);

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn steinlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Last error message for this thread, or null when none was recorded.
/// The caller owns the returned string (`steinlab_string_free`).
#[no_mangle]
pub extern "C" fn steinlab_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// Free a string previously returned by this library.
///
/// # Safety
/// `s` must be a pointer returned by a steinlab function and not yet
/// freed; null is accepted and ignored.
#[no_mangle]
pub unsafe extern "C" fn steinlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a kernel from its JSON spec, e.g.
/// `{"family":"exp-power","p":2.0,"sigma":1.0}`.
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid
/// location to store the handle.
#[no_mangle]
pub unsafe extern "C" fn steinlab_kernel_from_json(
    json: *const c_char,
    out: *mut *mut SteinlabKernel,
) -> SteinStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output handle");
            return SteinStatus::NullPointer;
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match serde_json::from_str::<Kernel>(text) {
            Ok(kernel) => {
                *out = Box::into_raw(Box::new(SteinlabKernel(kernel)));
                SteinStatus::Ok
            }
            Err(e) => fail(Error::ConfigInvalid(e.to_string())),
        }
    })
}

/// # Safety
/// `kernel` must come from `steinlab_kernel_from_json` and not be freed
/// twice; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn steinlab_kernel_free(kernel: *mut SteinlabKernel) {
    if !kernel.is_null() {
        drop(Box::from_raw(kernel));
    }
}

/// Evaluate `k(x, y)` for `dim`-dimensional points.
///
/// # Safety
/// `x` and `y` must point to `dim` readable doubles; `out` to one
/// writable double.
#[no_mangle]
pub unsafe extern "C" fn steinlab_kernel_eval(
    kernel: *const SteinlabKernel,
    x: *const c_double,
    y: *const c_double,
    dim: usize,
    out: *mut c_double,
) -> SteinStatus {
    guard(|| {
        if kernel.is_null() || x.is_null() || y.is_null() || out.is_null() || dim == 0 {
            set_error("null argument to kernel_eval");
            return SteinStatus::NullPointer;
        }
        let xs = std::slice::from_raw_parts(x, dim);
        let ys = std::slice::from_raw_parts(y, dim);
        *out = (*kernel).0.eval(xs, ys);
        SteinStatus::Ok
    })
}

/// Write `∇_y k(x,y)` into `out` (`dim` doubles).
///
/// # Safety
/// As for `steinlab_kernel_eval`, with `out` holding `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn steinlab_kernel_grad_y(
    kernel: *const SteinlabKernel,
    x: *const c_double,
    y: *const c_double,
    dim: usize,
    out: *mut c_double,
) -> SteinStatus {
    guard(|| {
        if kernel.is_null() || x.is_null() || y.is_null() || out.is_null() || dim == 0 {
            set_error("null argument to kernel_grad_y");
            return SteinStatus::NullPointer;
        }
        let xs = std::slice::from_raw_parts(x, dim);
        let ys = std::slice::from_raw_parts(y, dim);
        let g = (*kernel).0.grad_y(xs, ys);
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(&g);
        SteinStatus::Ok
    })
}

/// `∇_x · ∇_y k(x,y)`; errors when undefined on the diagonal.
///
/// # Safety
/// As for `steinlab_kernel_eval`.
#[no_mangle]
pub unsafe extern "C" fn steinlab_kernel_cross_trace(
    kernel: *const SteinlabKernel,
    x: *const c_double,
    y: *const c_double,
    dim: usize,
    out: *mut c_double,
) -> SteinStatus {
    guard(|| {
        if kernel.is_null() || x.is_null() || y.is_null() || out.is_null() || dim == 0 {
            set_error("null argument to kernel_cross_trace");
            return SteinStatus::NullPointer;
        }
        let xs = std::slice::from_raw_parts(x, dim);
        let ys = std::slice::from_raw_parts(y, dim);
        match (*kernel).0.cross_trace(xs, ys) {
            Ok(v) => {
                *out = v;
                SteinStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Parse a target from its JSON spec, e.g.
/// `{"family":"gaussian","mean":[0,0],"cov":[[1,0],[0,1]]}`.
///
/// # Safety
/// As for `steinlab_kernel_from_json`.
#[no_mangle]
pub unsafe extern "C" fn steinlab_target_from_json(
    json: *const c_char,
    out: *mut *mut SteinlabTarget,
) -> SteinStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output handle");
            return SteinStatus::NullPointer;
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match serde_json::from_str::<Target>(text) {
            Ok(target) => {
                *out = Box::into_raw(Box::new(SteinlabTarget(target)));
                SteinStatus::Ok
            }
            Err(e) => fail(Error::ConfigInvalid(e.to_string())),
        }
    })
}

/// # Safety
/// `target` must come from `steinlab_target_from_json`; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn steinlab_target_free(target: *mut SteinlabTarget) {
    if !target.is_null() {
        drop(Box::from_raw(target));
    }
}

/// Dimension of a target.
///
/// # Safety
/// `target` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn steinlab_target_dim(target: *const SteinlabTarget) -> usize {
    if target.is_null() {
        return 0;
    }
    (*target).0.dim()
}

/// Potential `V(x)`.
///
/// # Safety
/// `x` must hold `dim` doubles matching the target's dimension.
#[no_mangle]
pub unsafe extern "C" fn steinlab_target_potential(
    target: *const SteinlabTarget,
    x: *const c_double,
    dim: usize,
    out: *mut c_double,
) -> SteinStatus {
    guard(|| {
        if target.is_null() || x.is_null() || out.is_null() {
            set_error("null argument to target_potential");
            return SteinStatus::NullPointer;
        }
        if dim != (*target).0.dim() {
            set_error("dimension mismatch");
            return SteinStatus::ConfigInvalid;
        }
        let xs = std::slice::from_raw_parts(x, dim);
        *out = (*target).0.potential(xs);
        SteinStatus::Ok
    })
}

/// Score `∇V(x)` written into `out` (`dim` doubles).
///
/// # Safety
/// As for `steinlab_target_potential`.
#[no_mangle]
pub unsafe extern "C" fn steinlab_target_score(
    target: *const SteinlabTarget,
    x: *const c_double,
    dim: usize,
    out: *mut c_double,
) -> SteinStatus {
    guard(|| {
        if target.is_null() || x.is_null() || out.is_null() {
            set_error("null argument to target_score");
            return SteinStatus::NullPointer;
        }
        if dim != (*target).0.dim() {
            set_error("dimension mismatch");
            return SteinStatus::ConfigInvalid;
        }
        let xs = std::slice::from_raw_parts(x, dim);
        let s = (*target).0.score(xs);
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(&s);
        SteinStatus::Ok
    })
}

/// Create an ensemble of `n` particles in `dim` dimensions from a
/// particle-major buffer.
///
/// # Safety
/// `data` must hold `n*dim` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn steinlab_ensemble_new(
    data: *const c_double,
    n: usize,
    dim: usize,
    out: *mut *mut SteinlabEnsemble,
) -> SteinStatus {
    guard(|| {
        if data.is_null() || out.is_null() || n == 0 || dim == 0 {
            set_error("null argument to ensemble_new");
            return SteinStatus::NullPointer;
        }
        let slice = std::slice::from_raw_parts(data, n * dim);
        let mut positions = steinlab::nalgebra::DMatrix::zeros(dim, n);
        for i in 0..n {
            for a in 0..dim {
                positions[(a, i)] = slice[i * dim + a];
            }
        }
        if !positions.iter().all(|v| v.is_finite()) {
            return fail(Error::NonFinite("ensemble positions".into()));
        }
        *out = Box::into_raw(Box::new(SteinlabEnsemble(Ensemble::new(positions))));
        SteinStatus::Ok
    })
}

/// # Safety
/// `ensemble` must come from this library; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn steinlab_ensemble_free(ensemble: *mut SteinlabEnsemble) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// Number of particles.
///
/// # Safety
/// `ensemble` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn steinlab_ensemble_len(ensemble: *const SteinlabEnsemble) -> usize {
    if ensemble.is_null() {
        return 0;
    }
    (*ensemble).0.n_particles()
}

/// Dimension of the particles.
///
/// # Safety
/// `ensemble` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn steinlab_ensemble_dim(ensemble: *const SteinlabEnsemble) -> usize {
    if ensemble.is_null() {
        return 0;
    }
    (*ensemble).0.dim()
}

/// Copy the positions into a particle-major buffer of `n*dim` doubles.
///
/// # Safety
/// `out` must hold `n*dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn steinlab_ensemble_positions(
    ensemble: *const SteinlabEnsemble,
    out: *mut c_double,
) -> SteinStatus {
    guard(|| {
        if ensemble.is_null() || out.is_null() {
            set_error("null argument to ensemble_positions");
            return SteinStatus::NullPointer;
        }
        let e = &(*ensemble).0;
        let (n, d) = (e.n_particles(), e.dim());
        let slice = std::slice::from_raw_parts_mut(out, n * d);
        for i in 0..n {
            for a in 0..d {
                slice[i * d + a] = e.positions[(a, i)];
            }
        }
        SteinStatus::Ok
    })
}

/// Squared kernelised Stein discrepancy of the ensemble's empirical
/// measure; `use_ustat != 0` selects the diagonal-free U-statistic.
///
/// # Safety
/// All handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn steinlab_ksd_squared(
    kernel: *const SteinlabKernel,
    target: *const SteinlabTarget,
    ensemble: *const SteinlabEnsemble,
    use_ustat: c_int,
    out: *mut c_double,
) -> SteinStatus {
    guard(|| {
        if kernel.is_null() || target.is_null() || ensemble.is_null() || out.is_null() {
            set_error("null argument to ksd_squared");
            return SteinStatus::NullPointer;
        }
        let estimator = if use_ustat != 0 {
            KsdEstimator::UStat
        } else {
            KsdEstimator::VStat
        };
        match ksd_squared(&(*kernel).0, &(*target).0, &(*ensemble).0, estimator) {
            Ok(v) => {
                *out = v;
                SteinStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Squared RKHS norm of the SVGD drift (equal to the V-statistic KSD²).
///
/// # Safety
/// As for `steinlab_ksd_squared`.
#[no_mangle]
pub unsafe extern "C" fn steinlab_drift_rkhs_norm_squared(
    kernel: *const SteinlabKernel,
    target: *const SteinlabTarget,
    ensemble: *const SteinlabEnsemble,
    out: *mut c_double,
) -> SteinStatus {
    guard(|| {
        if kernel.is_null() || target.is_null() || ensemble.is_null() || out.is_null() {
            set_error("null argument to drift_rkhs_norm_squared");
            return SteinStatus::NullPointer;
        }
        match drift_rkhs_norm_squared(&(*kernel).0, &(*target).0, &(*ensemble).0) {
            Ok(v) => {
                *out = v;
                SteinStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Integrate the ensemble in place: `mode` 0 = Euler ODE, 1 = RK4 ODE,
/// 2 = Euler–Maruyama SDE (seeded).
///
/// # Safety
/// All handles must be live; the ensemble is mutated.
#[no_mangle]
pub unsafe extern "C" fn steinlab_run(
    kernel: *const SteinlabKernel,
    target: *const SteinlabTarget,
    ensemble: *mut SteinlabEnsemble,
    mode: c_int,
    dt: c_double,
    steps: usize,
    seed: u64,
) -> SteinStatus {
    guard(|| {
        if kernel.is_null() || target.is_null() || ensemble.is_null() {
            set_error("null argument to run");
            return SteinStatus::NullPointer;
        }
        let mode = match mode {
            0 => IntegratorMode::OdeEuler,
            1 => IntegratorMode::OdeRk4,
            2 => IntegratorMode::SdeEulerMaruyama,
            _ => {
                set_error("mode must be 0 (euler), 1 (rk4) or 2 (sde)");
                return SteinStatus::ConfigInvalid;
            }
        };
        let config = IntegratorConfig {
            mode,
            dt,
            steps,
            seed,
            record_every: steps.max(1),
        };
        match run_trajectory(&config, &(*kernel).0, &(*target).0, &(*ensemble).0, None) {
            Ok(trajectory) => {
                (*ensemble).0 = trajectory.ensembles.last().unwrap().clone();
                SteinStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Run a full experiment from a config JSON (same schema as the CLI);
/// returns the run summary as JSON in `summary_out` (caller frees with
/// `steinlab_string_free`). Artefact files are written as configured.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string; `summary_out`
/// may be null when the summary is not wanted.
#[no_mangle]
pub unsafe extern "C" fn steinlab_run_experiment(
    config_json: *const c_char,
    summary_out: *mut *mut c_char,
) -> SteinStatus {
    guard(|| {
        let text = match read_str(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let config = match ExperimentConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => return fail(e),
        };
        match steinlab::cli::run(&config) {
            Ok(artifacts) => {
                if !summary_out.is_null() {
                    let summary = serde_json::json!({
                        "experiment": artifacts.experiment,
                        "artefacts": artifacts.files,
                        "summary": artifacts.summary,
                    });
                    match CString::new(summary.to_string()) {
                        Ok(s) => *summary_out = s.into_raw(),
                        Err(_) => *summary_out = ptr::null_mut(),
                    }
                }
                SteinStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
