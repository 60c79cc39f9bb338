//! Steady states, steady-state feed targets and the y-versus-u sweep.

use super::{max_abs, step, Evaluator, IntegratorOptions};
use crate::error::{Error, Result};
use crate::model::{PlantParams, PlantState, N_STATES};

/// Residual bound on ‖dx/dt‖∞ (mol/L/h) for a converged steady state.
const STEADY_TOL: f64 = 1e-10;
const PTC_MAX_ITER: usize = 300;
const LONG_HORIZON: f64 = 5000.0;
/// Hours of plain integration between continuation retries.
const RETRY_EVERY: f64 = 20.0;

/// Steady state at constant (u, q), starting from `guess` (or an empty cascade).
pub fn steady_state(
    u: f64,
    q: f64,
    guess: Option<&PlantState>,
    params: &PlantParams,
    opts: &IntegratorOptions,
) -> Result<PlantState> {
    steady_state_from(guess.copied().unwrap_or_default(), u, q, params, opts)
}

/// Pseudo-transient continuation: linearly implicit Euler steps whose size
/// grows on every accepted step (faster when the residual falls); falls back
/// to plain time integration if it stalls.
pub fn steady_state_from(
    init: PlantState,
    u: f64,
    q: f64,
    params: &PlantParams,
    opts: &IntegratorOptions,
) -> Result<PlantState> {
    let eval = Evaluator::new(params, opts, u, q)?;
    match ptc(&eval, init) {
        Ok(s) => Ok(s),
        Err(err) => {
            log::debug!("pseudo-transient continuation failed at u={u}, q={q}: {err}; integrating");
            long_integration(&eval, init, u, q)
        }
    }
}

fn ptc(eval: &Evaluator, init: PlantState) -> Result<PlantState> {
    let mut x = init.x;
    for v in x.iter_mut() {
        *v = v.max(0.0);
    }
    let mut alg = init.x_alg;
    let mut f = eval.rhs(&x, &mut alg)?;
    let mut r = max_abs(&f);
    let mut h: f64 = 0.1;
    for _ in 0..PTC_MAX_ITER {
        if r < STEADY_TOL {
            return Ok(PlantState { x, x_alg: alg });
        }
        let jac = eval.jacobian(&x, &alg, &f)?;
        let lu = jac.shifted(1.0 / h, -1.0).factor()?;
        let delta = lu.solve(&f);
        let mut x_new = [0.0; N_STATES];
        for i in 0..N_STATES {
            x_new[i] = (x[i] + delta[i]).max(0.0);
        }
        let mut alg_new = alg;
        let trial = eval
            .rhs(&x_new, &mut alg_new)
            .ok()
            .map(|f_new| (max_abs(&f_new), f_new))
            .filter(|(r_new, _)| r_new.is_finite() && *r_new < 10.0 * r);
        match trial {
            Some((r_new, f_new)) => {
                h = (h * (r / r_new.max(1e-300)).clamp(1.5, 10.0)).min(1e12);
                x = x_new;
                alg = alg_new;
                f = f_new;
                r = r_new;
            }
            None => {
                h *= 0.25;
                if h < 1e-8 {
                    break;
                }
            }
        }
    }
    Err(Error::Integration(format!(
        "pseudo-transient continuation stalled at ‖f‖ = {r:.3e}"
    )))
}

fn long_integration(eval: &Evaluator, init: PlantState, u: f64, q: f64) -> Result<PlantState> {
    let mut state = init;
    let mut t = 0.0;
    let mut opts = eval.opts.clone();
    let chunk = 1.0;
    opts.dt_internal = opts.dt_internal.max(0.25).min(chunk);
    while t < LONG_HORIZON {
        state = step(&state, u, q, chunk, &opts, eval.params)?;
        t += chunk;
        let mut alg = state.x_alg;
        let f = eval.rhs(&state.x, &mut alg)?;
        if max_abs(&f) < STEADY_TOL * 10.0 {
            return ptc(eval, state).or(Ok(state));
        }
        if t % RETRY_EVERY == 0.0 {
            if let Ok(s) = ptc(eval, state) {
                return Ok(s);
            }
        }
    }
    Err(Error::Integration(format!(
        "no steady state reached within {LONG_HORIZON} h at u={u}, q={q}"
    )))
}

/// Steady-state solver that warm-starts from previously solved operating points.
#[derive(Debug, Clone)]
pub struct SteadyStateSolver {
    pub params: PlantParams,
    pub opts: IntegratorOptions,
    cache: Vec<(f64, f64, PlantState)>,
}

const CACHE_LEN: usize = 64;

impl SteadyStateSolver {
    pub fn new(params: PlantParams, opts: IntegratorOptions) -> Self {
        SteadyStateSolver {
            params,
            opts,
            cache: Vec::new(),
        }
    }

    pub fn solve(&mut self, u: f64, q: f64) -> Result<PlantState> {
        if let Some((_, _, s)) = self.cache.iter().find(|(cu, cq, _)| *cu == u && *cq == q) {
            return Ok(*s);
        }
        let guess = self
            .cache
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - u).abs() / u + (a.1 - q).abs() / q;
                let db = (b.0 - u).abs() / u + (b.1 - q).abs() / q;
                da.total_cmp(&db)
            })
            .map(|(_, _, s)| *s);
        let s = steady_state(u, q, guess.as_ref(), &self.params, &self.opts)?;
        if self.cache.len() == CACHE_LEN {
            self.cache.remove(0);
        }
        self.cache.push((u, q, s));
        Ok(s)
    }

    pub fn y(&mut self, u: f64, q: f64) -> Result<f64> {
        self.solve(u, q).map(|s| s.y())
    }

    /// Feed flow whose steady state puts y at `y_set` under solvent flow `q`.
    ///
    /// Illinois regula falsi on the bracket [u_min, u_max]; the steady map is
    /// increasing in u.
    pub fn u_set(&mut self, y_set: f64, q: f64) -> Result<f64> {
        let (lo, hi) = (self.params.u_min, self.params.u_max);
        let y_lo = self.y(lo, q)?;
        let y_hi = self.y(hi, q)?;
        if !(y_set >= y_lo && y_set <= y_hi) {
            return Err(Error::InfeasibleTarget { y_set, y_lo, y_hi });
        }
        let tol = 1e-8 * y_set.max(1e-12);
        let (mut a, mut fa) = (lo, y_lo - y_set);
        let (mut b, mut fb) = (hi, y_hi - y_set);
        if fa.abs() <= tol {
            return Ok(a);
        }
        if fb.abs() <= tol {
            return Ok(b);
        }
        let mut side = 0i8;
        for _ in 0..200 {
            let c = if fb != fa {
                (a * fb - b * fa) / (fb - fa)
            } else {
                0.5 * (a + b)
            };
            let c = if c > a.min(b) && c < a.max(b) {
                c
            } else {
                0.5 * (a + b)
            };
            let fc = self.y(c, q)? - y_set;
            if fc.abs() <= tol || (b - a).abs() < 1e-13 * hi {
                return Ok(c);
            }
            if (fc > 0.0) == (fb > 0.0) {
                b = c;
                fb = fc;
                if side == -1 {
                    fa *= 0.5;
                }
                side = -1;
            } else {
                a = c;
                fa = fc;
                if side == 1 {
                    fb *= 0.5;
                }
                side = 1;
            }
        }
        Err(Error::Integration(format!(
            "u_set root-finding did not converge for y_set={y_set}"
        )))
    }
}

/// One-shot [`SteadyStateSolver::u_set`].
pub fn solve_u_set(
    y_set: f64,
    q_hat: f64,
    params: &PlantParams,
    opts: &IntegratorOptions,
) -> Result<f64> {
    SteadyStateSolver::new(params.clone(), opts.clone()).u_set(y_set, q_hat)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub u: f64,
    pub y: f64,
    pub z: f64,
}

/// The steady y-versus-u curve and its saturation landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub q: f64,
    pub points: Vec<SweepPoint>,
    /// Saturation feed flow: the smallest u with y ≥ knee_fraction·y(u_max).
    pub u_knee: f64,
    /// Plateau (critical) output y(u_knee).
    pub y_plateau: f64,
    pub y_nominal: f64,
    /// y(u_nominal) / y_plateau.
    pub nominal_ratio: f64,
}

/// Sweeps `n_points` feed flows over [u_min, u_max] at solvent flow `q`.
pub fn sweep(solver: &mut SteadyStateSolver, q: f64, n_points: usize) -> Result<SweepSummary> {
    if n_points < 2 {
        return Err(Error::Config("sweep needs at least two points".into()));
    }
    let (lo, hi) = (solver.params.u_min, solver.params.u_max);
    let mut points = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let u = lo + (hi - lo) * i as f64 / (n_points - 1) as f64;
        let s = solver.solve(u, q)?;
        points.push(SweepPoint {
            u,
            y: s.y(),
            z: s.z(),
        });
    }
    let y_max = points.last().unwrap().y;
    let target = solver.params.knee_fraction * y_max;
    let first = points
        .iter()
        .position(|p| p.y >= target)
        .unwrap_or(n_points - 1);
    let (mut a, mut b) = if first == 0 {
        (lo, lo)
    } else {
        (points[first - 1].u, points[first].u)
    };
    while b - a > 1e-9 * hi {
        let m = 0.5 * (a + b);
        if solver.y(m, q)? >= target {
            b = m;
        } else {
            a = m;
        }
    }
    let u_knee = b;
    let y_plateau = solver.y(u_knee, q)?;
    let y_nominal = solver.y(solver.params.u_nominal, q)?;
    Ok(SweepSummary {
        q,
        points,
        u_knee,
        y_plateau,
        y_nominal,
        nominal_ratio: y_nominal / y_plateau,
    })
}
