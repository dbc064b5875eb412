//! C ABI for algebroid-lab.
//!
//! Every function returns an [`AlStatus`]. On failure the message is kept
//! per thread and read with [`al_last_error`]. Models are opaque handles
//! released with [`al_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use algebroid_lab::cli;
use algebroid_lab::dynamics::{integrate, Flow};
use algebroid_lab::killing::{killing_check, killing_find};
use algebroid_lab::model::{bundled, parse_model, Model};
use algebroid_lab::sigma::relax;
use algebroid_lab::Error;

/// Result codes. The first four match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlStatus {
    Ok = 0,
    /// A validation check failed or an integration blew up.
    Failed = 1,
    /// Schema, shape or usage error, including underdetermined searches.
    Invalid = 2,
    /// Relaxation stopped before reaching its tolerance.
    NotConverged = 3,
    NullPointer = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// A loaded and validated model.
pub struct AlModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn from_error(e: &Error) -> AlStatus {
    set_error(e.to_string());
    match cli::exit_code(e) {
        1 => AlStatus::Failed,
        _ => AlStatus::Invalid,
    }
}

fn guard(f: impl FnOnce() -> AlStatus) -> AlStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            AlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, AlStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(AlStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not UTF-8"));
        AlStatus::Invalid
    })
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], AlStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(AlStatus::NullPointer);
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn model_arg<'a>(m: *const AlModel) -> Result<&'a Model, AlStatus> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| {
        set_error("model handle is null");
        AlStatus::NullPointer
    })
}

unsafe fn write_out<T>(p: *mut T, v: T) {
    if !p.is_null() {
        *p = v;
    }
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! core {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return from_error(&e),
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn al_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL, or 0
/// when there is no error.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn al_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Parses a model from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn al_model_from_json(
    json: *const c_char,
    out: *mut *mut AlModel,
) -> AlStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return AlStatus::NullPointer;
        }
        let text = tri!(str_arg(json, "json"));
        let m = core!(parse_model(text));
        *out = Box::into_raw(Box::new(AlModel { inner: m }));
        AlStatus::Ok
    })
}

/// Loads one of the bundled models by name.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn al_model_bundled(name: *const c_char, out: *mut *mut AlModel) -> AlStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return AlStatus::NullPointer;
        }
        let name = tri!(str_arg(name, "name"));
        let m = core!(bundled(name));
        *out = Box::into_raw(Box::new(AlModel { inner: m }));
        AlStatus::Ok
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn al_model_free(m: *mut AlModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Base dimension and fiber rank.
///
/// # Safety
/// `m` must be a live handle; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn al_model_shape(
    m: *const AlModel,
    dim: *mut usize,
    rank: *mut usize,
) -> AlStatus {
    guard(|| {
        let m = tri!(model_arg(m));
        write_out(dim, m.algebroid().dim());
        write_out(rank, m.algebroid().rank());
        AlStatus::Ok
    })
}

/// Axiom residuals and Levi-Civita certification. Writes the largest
/// residual relative to its tolerance to `worst_ratio`; returns `Failed`
/// when it is not below 1.
///
/// # Safety
/// `m` must be a live handle; `worst_ratio` may be null.
#[no_mangle]
pub unsafe extern "C" fn al_validate(
    m: *const AlModel,
    samples: usize,
    seed: u64,
    worst_ratio: *mut f64,
) -> AlStatus {
    guard(|| {
        let m = tri!(model_arg(m));
        let ax = core!(m.algebroid().validate(samples, seed));
        let sym = core!(m.metric.validate_symmetry(samples, seed));
        let cert = core!(m.metric.certify(samples, seed));
        let ratio = [
            ax.antisymmetry.value,
            ax.anchor_morphism.value,
            ax.jacobi.value,
            sym.value,
        ]
        .iter()
        .map(|v| v / cli::AXIOM_TOL)
        .chain([cert.worst() / algebroid_lab::riemann::CERTIFICATION_TOL])
        .fold(
            0.0,
            |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) },
        );
        write_out(worst_ratio, ratio);
        if ratio < 1.0 {
            AlStatus::Ok
        } else {
            set_error(format!("worst residual is {ratio:e} times its tolerance"));
            AlStatus::Failed
        }
    })
}

/// Integrates the geodesic flow `(x, y)` and writes the final state
/// (`dim + rank` values) and the maximum energy drift.
///
/// # Safety
/// `x0` and `y0` must hold `dim` and `rank` values; `state_out` must hold
/// `state_len` values; `drift` may be null.
#[no_mangle]
pub unsafe extern "C" fn al_geodesic(
    m: *const AlModel,
    x0: *const f64,
    y0: *const f64,
    t_end: f64,
    h: f64,
    state_out: *mut f64,
    state_len: usize,
    drift: *mut f64,
) -> AlStatus {
    guard(|| {
        let m = tri!(model_arg(m));
        let (dim, rank) = (m.algebroid().dim(), m.algebroid().rank());
        let x0 = tri!(slice_arg(x0, dim, "x0"));
        let y0 = tri!(slice_arg(y0, rank, "y0"));
        if state_len < dim + rank {
            set_error(format!(
                "state buffer holds {state_len} values, {} needed",
                dim + rank
            ));
            return AlStatus::BufferTooSmall;
        }
        if state_out.is_null() {
            set_error("state_out is null");
            return AlStatus::NullPointer;
        }
        let t = core!(integrate(&m.metric, Flow::Geodesic, x0, y0, t_end, h));
        let last = &t.states[t.len() - 1];
        ptr::copy_nonoverlapping(last.as_ptr(), state_out, dim + rank);
        write_out(drift, t.energy_drift());
        AlStatus::Ok
    })
}

/// Killing test of a named section. `residuals` receives the lemma,
/// Poisson and connection residuals, normalized.
///
/// # Safety
/// `section` must be NUL-terminated; `residuals` null or valid for 3 values.
#[no_mangle]
pub unsafe extern "C" fn al_killing_check(
    m: *const AlModel,
    section: *const c_char,
    samples: usize,
    seed: u64,
    is_killing: *mut c_int,
    residuals: *mut f64,
) -> AlStatus {
    guard(|| {
        let m = tri!(model_arg(m));
        let name = tri!(str_arg(section, "section"));
        let u = core!(m.section(name));
        let r = core!(killing_check(&m.metric, u, samples, seed));
        write_out(is_killing, c_int::from(r.verdict));
        if !residuals.is_null() {
            ptr::copy_nonoverlapping(r.normalized().as_ptr(), residuals, 3);
        }
        if r.consistent {
            AlStatus::Ok
        } else {
            set_error("the residual forms disagree on the verdict");
            AlStatus::Failed
        }
    })
}

/// Dimension of the Killing algebra within polynomials up to `degree`, with
/// the bound `n(n+1)/2` and the closure residual of the structure constants.
///
/// # Safety
/// Outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn al_killing_find(
    m: *const AlModel,
    degree: usize,
    dim: *mut usize,
    bound: *mut usize,
    closure_residual: *mut f64,
) -> AlStatus {
    guard(|| {
        let m = tri!(model_arg(m));
        let b = core!(killing_find(&m.metric, degree));
        write_out(dim, b.dim);
        write_out(bound, b.bound);
        write_out(closure_residual, b.closure_residual);
        AlStatus::Ok
    })
}

/// Relaxes the model's sigma configuration. Writes the final action and
/// maximum tension; returns `NotConverged` if the tolerance was not reached.
///
/// # Safety
/// Outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn al_sigma_solve(
    m: *const AlModel,
    step: f64,
    iters: usize,
    action: *mut f64,
    max_tension: *mut f64,
) -> AlStatus {
    guard(|| {
        let m = tri!(model_arg(m));
        let Some(block) = &m.file.sigma else {
            set_error("the model has no sigma block");
            return AlStatus::Invalid;
        };
        let source = core!(block.source());
        let cfg = core!(block.initial(&source, m.algebroid()));
        let out = core!(relax(&cfg, &m.metric, &source, step, iters));
        write_out(action, out.action);
        write_out(max_tension, out.max_tension.value);
        if out.converged {
            AlStatus::Ok
        } else {
            set_error(format!(
                "relaxation stopped with tension {:e}",
                out.max_tension.value
            ));
            AlStatus::NotConverged
        }
    })
}

/// Runs the command-line tool in-process with `argv[0..argc]` and returns
/// its exit code. Output goes to the process's stdout and stderr.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn al_cli_run(argc: c_int, argv: *const *const c_char) -> c_int {
    let mut args = Vec::new();
    if argc > 0 {
        if argv.is_null() {
            return 2;
        }
        for i in 0..argc as usize {
            match str_arg(*argv.add(i), "argv") {
                Ok(s) => args.push(s.to_string()),
                Err(_) => return 2,
            }
        }
    } else {
        args.push("algebroid-lab".to_string());
    }
    catch_unwind(|| cli::run(args, &mut std::io::stdout(), &mut std::io::stderr()))
        .unwrap_or(AlStatus::Panic as c_int)
}
