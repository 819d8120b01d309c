//! C interface to `switchctl`.
//!
//! Every function returns an [`ScStatus`]. On failure the message of the
//! last error on the calling thread is available through
//! [`sc_last_error_message`]. Matrices cross the boundary as row-major
//! `double` arrays. Handles are opaque and released with their `_free`
//! function; passing a null handle to `_free` is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use switchctl::data_window::{compute_n, rank_condition, DataWindow};
use switchctl::error::Error;
use switchctl::experiments::{emit_outputs, parse_config, run_experiment, RunResult};
use switchctl::numerics::{solve_discrete_lyapunov, spectral_radius, Matrix, Vector};
use switchctl::supervisor::{warm_start, SupervisorConfig, SupervisorState};
use switchctl::synthesis::{
    extract_gain, solve_robust_sdp, InteriorPoint, SdpProblemData, SdpStatus, SynthesisSettings,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    InvalidArgument = 3,
    Config = 4,
    WarmStart = 5,
    Unstable = 6,
    Numerical = 7,
    Io = 8,
    Panic = 9,
}

/// Outcome of a synthesis call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScSdpStatus {
    Optimal = 0,
    Infeasible = 1,
    NumericalFailure = 2,
}

/// Supervisor parameters. `delta_x < 0` means unset; `window == 0` selects
/// the minimal window.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ScSupervisorParams {
    pub lambda0: f64,
    pub delta_v: f64,
    pub delta_eps: f64,
    pub delta_x: f64,
    pub alpha: f64,
    pub window: usize,
    pub excitation_seed: u64,
    pub pe_target: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ScStepResult {
    pub solved_sdp: bool,
    pub aux_value: f64,
    /// 0 excite, 1 solve, 2 hold, 3 dormant; phase after the step.
    pub phase: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ScRunSummary {
    pub steps: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub sup_norm: f64,
    pub max_gain_norm: f64,
    /// -1 when no ISpS report was produced.
    pub isps_verdict: i32,
}

/// Sliding window of input-state samples.
pub struct ScWindow(DataWindow);

/// Online supervisor state.
pub struct ScController(SupervisorState);

/// A completed closed-loop run.
pub struct ScRun(RunResult);

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend_from_slice(msg.as_bytes());
    });
}

fn status_of(e: &Error) -> ScStatus {
    match e {
        Error::Dimension(_) => ScStatus::Dimension,
        Error::Config { .. } => ScStatus::Config,
        Error::WarmStart(_) => ScStatus::WarmStart,
        Error::Unstable(_) => ScStatus::Unstable,
        Error::Io(_) => ScStatus::Io,
        Error::NotOptimal(_) | Error::RankDeficient { .. } | Error::Excitation { .. } => ScStatus::Numerical,
        _ => ScStatus::InvalidArgument,
    }
}

struct Failure(ScStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(ScStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ScStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScStatus::Ok,
        Ok(Err(Failure(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            ScStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, Failure> {
    Ok(Matrix::from_row_slice(rows, cols, slice(p, rows * cols, what)?))
}

unsafe fn write_matrix(m: &Matrix, out: *mut f64, what: &str) -> Result<(), Failure> {
    let dst = slice_mut(out, m.len(), what)?;
    for (i, r) in m.row_iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            dst[i * m.ncols() + j] = *v;
        }
    }
    Ok(())
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ScStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length without the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes `N` and the minimal window `2N - 1` for the given dimensions.
///
/// # Safety
/// `n_excite` and `window` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sc_compute_n(n_x: usize, n_u: usize, n_excite: *mut usize, window: *mut usize) -> ScStatus {
    guard(|| {
        let (n, t) = compute_n(n_x, n_u);
        *out_ref(n_excite, "n_excite")? = n;
        *out_ref(window, "window")? = t;
        Ok(())
    })
}

/// Spectral radius of the `n x n` matrix `a`.
///
/// # Safety
/// `a` must hold `n * n` doubles and `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sc_spectral_radius(a: *const f64, n: usize, out: *mut f64) -> ScStatus {
    guard(|| {
        let m = matrix(a, n, n, "a")?;
        *out_ref(out, "out")? = spectral_radius(&m)?;
        Ok(())
    })
}

/// Solves `A' P A - P + beta I = 0` for a Schur stable `A`.
///
/// # Safety
/// `a` must hold `n * n` doubles and `p_out` room for `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sc_discrete_lyapunov(a: *const f64, n: usize, beta: f64, p_out: *mut f64) -> ScStatus {
    guard(|| {
        let m = matrix(a, n, n, "a")?;
        write_matrix(&solve_discrete_lyapunov(&m, beta)?, p_out, "p_out")
    })
}

/// Solves the robust program on `U- (n_u x t)`, `X- (n_x x t)` and
/// `X+ (n_x x t)`. On `Optimal` the gain is written to `k_out (n_u x n_x)`
/// and the cost to `gamma_out`; otherwise both are left untouched.
///
/// # Safety
/// Input arrays must hold the stated number of doubles; output pointers
/// must be valid for writes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sc_solve_robust_sdp(
    u_minus: *const f64,
    x_minus: *const f64,
    x_plus: *const f64,
    n_x: usize,
    n_u: usize,
    t: usize,
    alpha: f64,
    status_out: *mut ScSdpStatus,
    k_out: *mut f64,
    gamma_out: *mut f64,
) -> ScStatus {
    guard(|| {
        let d = SdpProblemData::new(
            matrix(u_minus, n_u, t, "u_minus")?,
            matrix(x_minus, n_x, t, "x_minus")?,
            matrix(x_plus, n_x, t, "x_plus")?,
            alpha,
        )?;
        let status = out_ref(status_out, "status_out")?;
        let sol = solve_robust_sdp(&d, &InteriorPoint::default())?;
        *status = match sol.status {
            SdpStatus::Optimal => ScSdpStatus::Optimal,
            SdpStatus::Infeasible => ScSdpStatus::Infeasible,
            SdpStatus::NumericalFailure => ScSdpStatus::NumericalFailure,
        };
        if sol.is_optimal() {
            write_matrix(&extract_gain(&d.u_minus, &sol)?, k_out, "k_out")?;
            *out_ref(gamma_out, "gamma_out")? = sol.gamma;
        }
        Ok(())
    })
}

/// Creates an empty window of `capacity` samples whose latest state is
/// `x0 (n_x)` at time `k0`.
///
/// # Safety
/// `x0` must hold `n_x` doubles and `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sc_window_new(
    capacity: usize,
    n_x: usize,
    n_u: usize,
    k0: i64,
    x0: *const f64,
    out: *mut *mut ScWindow,
) -> ScStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let x = Vector::from_column_slice(slice(x0, n_x, "x0")?);
        let w = DataWindow::new(capacity, n_u, k0, x)?;
        *out = Box::into_raw(Box::new(ScWindow(w)));
        Ok(())
    })
}

/// # Safety
/// `w` must be null or a handle from [`sc_window_new`] not freed before.
#[no_mangle]
pub unsafe extern "C" fn sc_window_free(w: *mut ScWindow) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Appends the input applied at the latest time and the state it led to.
///
/// # Safety
/// `w` must be a live handle; `u` and `x_next` must hold `n_u` and `n_x`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn sc_window_push(w: *mut ScWindow, u: *const f64, x_next: *const f64) -> ScStatus {
    guard(|| {
        let w = &mut out_ref(w, "window")?.0;
        let u = Vector::from_column_slice(slice(u, w.n_u(), "u")?);
        let x = Vector::from_column_slice(slice(x_next, w.n_x(), "x_next")?);
        w.push(u, x)?;
        Ok(())
    })
}

/// Number of samples currently held.
///
/// # Safety
/// `w` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sc_window_len(w: *const ScWindow, out: *mut usize) -> ScStatus {
    guard(|| {
        let w = &w.as_ref().ok_or_else(|| null("window"))?.0;
        *out_ref(out, "out")? = w.len();
        Ok(())
    })
}

/// Rank test on `W = [U-; X-]` of the held samples.
///
/// # Safety
/// `w` must be a live handle; `full_rank` and `sigma_min` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sc_window_rank_condition(
    w: *const ScWindow,
    full_rank: *mut bool,
    sigma_min: *mut f64,
) -> ScStatus {
    guard(|| {
        let w = &w.as_ref().ok_or_else(|| null("window"))?.0;
        let (ok, s) = rank_condition(&w.snapshot()?);
        *out_ref(full_rank, "full_rank")? = ok;
        *out_ref(sigma_min, "sigma_min")? = s;
        Ok(())
    })
}

fn supervisor_config(p: &ScSupervisorParams, n_x: usize, n_u: usize) -> SupervisorConfig {
    let (n, t_min) = compute_n(n_x, n_u);
    SupervisorConfig {
        lambda0: p.lambda0,
        delta_v: p.delta_v,
        delta_eps: p.delta_eps,
        delta_x: (p.delta_x >= 0.0).then_some(p.delta_x),
        alpha: p.alpha,
        n_excite: n,
        window: if p.window == 0 { t_min } else { p.window },
        excitation_seed: p.excitation_seed,
        pe_target: p.pe_target,
        synthesis: SynthesisSettings::default(),
    }
}

/// Builds a controller from a full window of offline data.
///
/// # Safety
/// `offline` must be a live handle, `params` readable and `out` valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn sc_controller_new(
    offline: *const ScWindow,
    params: *const ScSupervisorParams,
    out: *mut *mut ScController,
) -> ScStatus {
    guard(|| {
        let w = &offline.as_ref().ok_or_else(|| null("offline"))?.0;
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let out = out_ref(out, "out")?;
        let cfg = supervisor_config(p, w.n_x(), w.n_u());
        cfg.validate()?;
        if cfg.window != w.capacity() {
            return Err(Failure(
                ScStatus::Dimension,
                format!("window capacity {} differs from T = {}", w.capacity(), cfg.window),
            ));
        }
        let state = warm_start(&w.snapshot()?, &cfg, &InteriorPoint::default())?;
        *out = Box::into_raw(Box::new(ScController(state)));
        Ok(())
    })
}

/// # Safety
/// `c` must be null or a handle from [`sc_controller_new`] not freed before.
#[no_mangle]
pub unsafe extern "C" fn sc_controller_free(c: *mut ScController) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Computes the input for state `x (n_x)` given the current window and
/// writes it to `u_out (n_u)`. The caller then pushes `(u, x_next)` into
/// the window.
///
/// # Safety
/// Handles must be live; `x` must hold `n_x` doubles, `u_out` room for
/// `n_u`, and `result` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sc_controller_step(
    c: *mut ScController,
    window: *const ScWindow,
    x: *const f64,
    u_out: *mut f64,
    result: *mut ScStepResult,
) -> ScStatus {
    guard(|| {
        let c = &mut out_ref(c, "controller")?.0;
        let w = &window.as_ref().ok_or_else(|| null("window"))?.0;
        let x = Vector::from_column_slice(slice(x, c.n_x(), "x")?);
        let d = c.control_step(&x, w, &InteriorPoint::default())?;
        slice_mut(u_out, d.u.len(), "u_out")?.copy_from_slice(d.u.as_slice());
        if let Some(r) = result.as_mut() {
            *r = ScStepResult {
                solved_sdp: d.solved_sdp,
                aux_value: d.aux_value,
                phase: match d.phase_after.label() {
                    "excite" => 0,
                    "solve" => 1,
                    "hold" => 2,
                    _ => 3,
                },
            };
        }
        Ok(())
    })
}

/// Current gain `K (n_u x n_x)`.
///
/// # Safety
/// `c` must be a live handle and `k_out` have room for `n_u * n_x` doubles.
#[no_mangle]
pub unsafe extern "C" fn sc_controller_gain(c: *const ScController, k_out: *mut f64) -> ScStatus {
    guard(|| {
        let c = &c.as_ref().ok_or_else(|| null("controller"))?.0;
        write_matrix(&c.gain, k_out, "k_out")
    })
}

/// Runs the experiment described by the TOML text `config`.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sc_run_new(config: *const c_char, out: *mut *mut ScRun) -> ScStatus {
    guard(|| {
        let cfg = parse_config(c_str(config, "config")?)?;
        let out = out_ref(out, "out")?;
        let run = run_experiment(&cfg)?;
        *out = Box::into_raw(Box::new(ScRun(run)));
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a handle from [`sc_run_new`] not freed before.
#[no_mangle]
pub unsafe extern "C" fn sc_run_free(r: *mut ScRun) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// # Safety
/// `r` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sc_run_summary(r: *const ScRun, out: *mut ScRunSummary) -> ScStatus {
    guard(|| {
        let run = &r.as_ref().ok_or_else(|| null("run"))?.0;
        let recs = &run.log.records;
        let states = run.log.states();
        *out_ref(out, "out")? = ScRunSummary {
            steps: recs.len(),
            n_x: recs.first().map_or(0, |r| r.x.len()),
            n_u: recs.first().and_then(|r| r.u.as_ref()).map_or(0, Vec::len),
            sup_norm: states.iter().map(|x| x.norm()).fold(0.0, f64::max),
            max_gain_norm: run.max_gain_norm(),
            isps_verdict: run.isps.as_ref().map_or(-1, |i| i32::from(i.verdict)),
        };
        Ok(())
    })
}

/// State at record `index` (0 for `k = 0`), written to `x_out (n_x)`.
///
/// # Safety
/// `r` must be a live handle and `x_out` have room for `n_x` doubles.
#[no_mangle]
pub unsafe extern "C" fn sc_run_state(r: *const ScRun, index: usize, x_out: *mut f64) -> ScStatus {
    guard(|| {
        let run = &r.as_ref().ok_or_else(|| null("run"))?.0;
        let rec = run.log.records.get(index).ok_or_else(|| {
            Failure(
                ScStatus::InvalidArgument,
                format!("record {index} of {}", run.log.records.len()),
            )
        })?;
        slice_mut(x_out, rec.x.len(), "x_out")?.copy_from_slice(&rec.x);
        Ok(())
    })
}

/// Writes the CSV, summary and plots of a run into `dir`.
///
/// # Safety
/// `r` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sc_run_write(r: *const ScRun, dir: *const c_char) -> ScStatus {
    guard(|| {
        let run = &r.as_ref().ok_or_else(|| null("run"))?.0;
        emit_outputs(run, Path::new(c_str(dir, "dir")?))?;
        Ok(())
    })
}
