//! C interface: an owned plant simulator, a loaded surrogate, and a
//! one-call scenario runner.
//!
//! Every function returns a [`PxStatus`]. On failure the message is kept
//! per thread and can be copied out with [`px_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use purex_nmpc::dae::{step, SteadyStateSolver};
use purex_nmpc::model::{PlantState, N_STAGES};
use purex_nmpc::scenario::{run_scenario, RunOptions, Scenario, ScenarioKind, SetPoints};
use purex_nmpc::surrogate::{load_weights, startup_state, SurrogateModel, ThetaVector};
use purex_nmpc::{Config, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Solver = 5,
    Infeasible = 6,
    ScenarioAborted = 7,
    BufferTooSmall = 8,
    Panic = 99,
}

/// Plant simulator handle.
pub struct PxPlant {
    cfg: Config,
    state: PlantState,
    t: f64,
}

/// Trained surrogate handle.
pub struct PxSurrogate {
    model: SurrogateModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> PxStatus {
    match err {
        Error::Io { .. } | Error::Csv(_) => PxStatus::Io,
        Error::Config(_) | Error::Weights(_) | Error::Dimension { .. } => PxStatus::Config,
        Error::Domain(_) => PxStatus::InvalidArgument,
        Error::InfeasibleTarget { .. } | Error::Infeasible { .. } => PxStatus::Infeasible,
        Error::Scenario { .. } => PxStatus::ScenarioAborted,
        _ => PxStatus::Solver,
    }
}

fn fail(err: Error) -> PxStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn guard(f: impl FnOnce() -> PxStatus) -> PxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("panic inside purex-nmpc");
            PxStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, PxStatus> {
    if p.is_null() {
        set_error("null path");
        return Err(PxStatus::NullPointer);
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(PxStatus::InvalidArgument)
        }
    }
}

unsafe fn load_config(path: *const c_char) -> Result<Config, PxStatus> {
    if path.is_null() {
        return Ok(Config::nominal());
    }
    let p = path_arg(path)?;
    Config::from_file(&p).map_err(fail)
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn px_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a plant at steady state for feed `u` and solvent `q`, or empty
/// (start-up) when `startup` is true. A null `config_path` uses the
/// built-in nominal configuration.
///
/// # Safety
/// `config_path` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn px_plant_new(
    config_path: *const c_char,
    u: f64,
    q: f64,
    startup: bool,
    out: *mut *mut PxPlant,
) -> PxStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output handle");
            return PxStatus::NullPointer;
        }
        *out = ptr::null_mut();
        let cfg = match load_config(config_path) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let state = if startup {
            startup_state(u, q, &cfg.plant, &cfg.integrator)
        } else {
            SteadyStateSolver::new(cfg.plant.clone(), cfg.integrator.clone()).solve(u, q)
        };
        match state {
            Ok(state) => {
                *out = Box::into_raw(Box::new(PxPlant { cfg, state, t: 0.0 }));
                PxStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `plant` must be null or a handle from [`px_plant_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn px_plant_free(plant: *mut PxPlant) {
    if !plant.is_null() {
        drop(Box::from_raw(plant));
    }
}

/// Advances the plant by one control period.
///
/// # Safety
/// `plant` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn px_plant_step(plant: *mut PxPlant, u: f64, q: f64) -> PxStatus {
    guard(|| {
        let Some(p) = plant.as_mut() else {
            set_error("null plant");
            return PxStatus::NullPointer;
        };
        let dt = p.cfg.plant.sampling_time;
        match step(&p.state, u, q, dt, &p.cfg.integrator, &p.cfg.plant) {
            Ok(s) => {
                p.state = s;
                p.t += dt;
                PxStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Current time, product output y and raffinate leakage z.
///
/// # Safety
/// `plant` must be a live handle; the out pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn px_plant_outputs(
    plant: *const PxPlant,
    t: *mut f64,
    y: *mut f64,
    z: *mut f64,
) -> PxStatus {
    let Some(p) = plant.as_ref() else {
        set_error("null plant");
        return PxStatus::NullPointer;
    };
    if let Some(t) = t.as_mut() {
        *t = p.t;
    }
    if let Some(y) = y.as_mut() {
        *y = p.state.y();
    }
    if let Some(z) = z.as_mut() {
        *z = p.state.z();
    }
    PxStatus::Ok
}

/// Aqueous uranium in each settler, stage 1 first. `len` must be at least
/// [`px_n_stages`].
///
/// # Safety
/// `plant` must be a live handle and `buf` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn px_plant_profile(
    plant: *const PxPlant,
    buf: *mut f64,
    len: usize,
) -> PxStatus {
    let Some(p) = plant.as_ref() else {
        set_error("null plant");
        return PxStatus::NullPointer;
    };
    if buf.is_null() {
        set_error("null buffer");
        return PxStatus::NullPointer;
    }
    if len < N_STAGES {
        set_error(format!("buffer holds {len} values, need {N_STAGES}"));
        return PxStatus::BufferTooSmall;
    }
    let prof = p.state.settler_aq_uranium();
    ptr::copy_nonoverlapping(prof.as_ptr(), buf, N_STAGES);
    PxStatus::Ok
}

#[no_mangle]
pub extern "C" fn px_n_stages() -> usize {
    N_STAGES
}

/// Loads surrogate weights written by `purex-nmpc train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn px_surrogate_load(
    path: *const c_char,
    out: *mut *mut PxSurrogate,
) -> PxStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output handle");
            return PxStatus::NullPointer;
        }
        *out = ptr::null_mut();
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_weights(&p) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(PxSurrogate { model }));
                PxStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `s` must be null or a handle from [`px_surrogate_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn px_surrogate_free(s: *mut PxSurrogate) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of past periods N in the regressor; each signal window holds N+1
/// values.
///
/// # Safety
/// `s` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn px_surrogate_history(s: *const PxSurrogate) -> usize {
    s.as_ref().map_or(0, |s| s.model.n_hist)
}

/// One-step prediction. `y`, `u` and `q` each hold `len` = N+1 values,
/// oldest first. Writes ŷ(k+1) and the classifier verdict (1 when z stays
/// within tolerance).
///
/// # Safety
/// `s` must be a live handle; `y`, `u`, `q` must point to `len` doubles;
/// the out pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn px_surrogate_predict(
    s: *const PxSurrogate,
    y: *const f64,
    u: *const f64,
    q: *const f64,
    len: usize,
    y_next: *mut f64,
    z_ok: *mut i32,
) -> PxStatus {
    guard(|| {
        let Some(s) = s.as_ref() else {
            set_error("null surrogate");
            return PxStatus::NullPointer;
        };
        if y.is_null() || u.is_null() || q.is_null() {
            set_error("null input window");
            return PxStatus::NullPointer;
        }
        let v = |p: *const f64| std::slice::from_raw_parts(p, len).to_vec();
        let theta = match ThetaVector::new(v(y), v(u), v(q)) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        let pred = s
            .model
            .predict_y(&theta)
            .and_then(|yh| Ok((yh, s.model.predict_zbar(&theta)?)));
        match pred {
            Ok((yh, ok)) => {
                if let Some(o) = y_next.as_mut() {
                    *o = yh;
                }
                if let Some(o) = z_ok.as_mut() {
                    *o = ok as i32;
                }
                PxStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Runs a named scenario ("startup", "critical", "perturbed", "custom")
/// and writes its record to `out_dir`. A negative `seed` keeps the
/// configured seed. On abort the partial record is still written and
/// `PX_STATUS_SCENARIO_ABORTED` is returned.
///
/// # Safety
/// String arguments must be NUL-terminated; `config_path` may be null.
#[no_mangle]
pub unsafe extern "C" fn px_run_scenario(
    scenario: *const c_char,
    config_path: *const c_char,
    weights_path: *const c_char,
    out_dir: *const c_char,
    open_loop: bool,
    seed: i64,
) -> PxStatus {
    guard(|| {
        if scenario.is_null() {
            set_error("null scenario name");
            return PxStatus::NullPointer;
        }
        let kind: ScenarioKind = match CStr::from_ptr(scenario).to_str().map(str::parse) {
            Ok(Ok(k)) => k,
            _ => {
                set_error("unknown scenario name");
                return PxStatus::InvalidArgument;
            }
        };
        let cfg = match load_config(config_path) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let (weights, out) = match (path_arg(weights_path), path_arg(out_dir)) {
            (Ok(w), Ok(o)) => (w, o),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let model = match load_weights(&weights) {
            Ok(m) => m,
            Err(e) => return fail(e),
        };
        let mut solver = SteadyStateSolver::new(cfg.plant.clone(), cfg.integrator.clone());
        let built = SetPoints::compute(&mut solver)
            .and_then(|sp| Scenario::build(kind, &cfg.scenario, &cfg.plant, sp));
        let sc = match built {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        let opts = RunOptions {
            open_loop,
            seed: (seed >= 0).then_some(seed as u64),
        };
        match run_scenario(&sc, &cfg, &model, opts) {
            Ok(output) => match output.save(&out) {
                Ok(()) => PxStatus::Ok,
                Err(e) => fail(e),
            },
            Err(abort) => {
                let _ = abort.partial.save(&out);
                set_error(abort.error.to_string());
                PxStatus::ScenarioAborted
            }
        }
    })
}
