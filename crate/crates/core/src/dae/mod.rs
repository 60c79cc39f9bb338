//! Semi-explicit index-1 DAE integration of the cascade.
//!
//! The algebraic interface concentrations are eliminated stage by stage
//! (each stage's 2×2 equilibrium only involves that stage's mixer
//! contents), so the implicit solves act on the 128 differential states
//! with the algebraic solve nested inside every right-hand-side evaluation.

mod blocktri;
mod steady;

pub use steady::{
    solve_u_set, steady_state, steady_state_from, sweep, SteadyStateSolver, SweepPoint,
    SweepSummary,
};

use crate::error::{Error, Result};
use crate::model::{
    residual_and_jacobian, rhs_into, wire_flows, Block, PlantParams, PlantState, StageConc,
    StageFlows, N_ALG, N_STAGES, N_STATES,
};
use blocktri::{BlockTri, BlockTriLu};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ImplicitEuler,
    Bdf2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorOptions {
    /// Nominal internal sub-step, h.
    pub dt_internal: f64,
    /// Newton update tolerance (max-norm, mol/L).
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Residual tolerance of the per-stage equilibrium solve.
    pub algebraic_tol: f64,
    pub algebraic_max_iter: usize,
    /// Smallest sub-step before a failed Newton solve becomes a hard error.
    pub dt_floor: f64,
    pub method: Method,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            dt_internal: 0.05,
            newton_tol: 1e-10,
            newton_max_iter: 12,
            algebraic_tol: 1e-13,
            algebraic_max_iter: 60,
            dt_floor: 1e-4,
            method: Method::ImplicitEuler,
        }
    }
}

impl IntegratorOptions {
    pub fn validate(&self, sampling_time: f64) -> Result<()> {
        if !(self.dt_internal > 0.0 && self.dt_internal <= sampling_time) {
            return Err(Error::Config(format!(
                "dt_internal must lie in (0, T={sampling_time}], got {}",
                self.dt_internal
            )));
        }
        if !(self.newton_tol > 0.0 && self.algebraic_tol > 0.0) {
            return Err(Error::Config("Newton tolerances must be positive".into()));
        }
        if self.newton_max_iter == 0 || self.algebraic_max_iter == 0 {
            return Err(Error::Config("iteration limits must be positive".into()));
        }
        if !(self.dt_floor > 0.0 && self.dt_floor <= self.dt_internal) {
            return Err(Error::Config(
                "dt_floor must lie in (0, dt_internal]".into(),
            ));
        }
        Ok(())
    }
}

/// Solves the interface equilibrium of one stage.
///
/// Returns (U*, H*, iterations). Newton with projection onto the physical
/// box and backtracking; nested bisection if Newton stalls.
pub(crate) fn solve_stage(
    conc: &StageConc,
    warm: Option<(f64, f64)>,
    params: &PlantParams,
    tol: f64,
    max_iter: usize,
) -> std::result::Result<(f64, f64, usize), (f64, usize)> {
    let (u_hi, h_hi) = (conc.u_star_max(), conc.h_star_max());
    let (u0, h0) = warm.unwrap_or((conc.u_aq, conc.h_aq));
    let (mut u, mut h) = (u0.clamp(0.0, u_hi), h0.clamp(0.0, h_hi));
    let norm = |g: (f64, f64)| g.0.abs().max(g.1.abs());

    for it in 0..max_iter {
        let (g, j) = residual_and_jacobian(conc, u, h, params);
        let r = norm(g);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let singular = !(det.is_finite() && det != 0.0);
        if r <= tol {
            // One more full step takes the root to round-off; the transfer
            // rates amplify any slack in U*, H* by about 1e5.
            if !singular && r > 0.0 {
                let un = (u - (j[1][1] * g.0 - j[0][1] * g.1) / det).clamp(0.0, u_hi);
                let hn = (h - (-j[1][0] * g.0 + j[0][0] * g.1) / det).clamp(0.0, h_hi);
                if norm(residual_and_jacobian(conc, un, hn, params).0) <= r {
                    return Ok((un, hn, it));
                }
            }
            return Ok((u, h, it));
        }
        if singular {
            break;
        }
        let du = -(j[1][1] * g.0 - j[0][1] * g.1) / det;
        let dh = -(-j[1][0] * g.0 + j[0][0] * g.1) / det;
        let mut t = 1.0;
        let (mut un, mut hn);
        loop {
            un = (u + t * du).clamp(0.0, u_hi);
            hn = (h + t * dh).clamp(0.0, h_hi);
            let rn = norm(residual_and_jacobian(conc, un, hn, params).0);
            if rn < r || t < 1e-8 {
                break;
            }
            t *= 0.5;
        }
        if un == u && hn == h {
            break;
        }
        u = un;
        h = hn;
    }

    let (u, h) = bisect_stage(conc, params);
    let r = norm(residual_and_jacobian(conc, u, h, params).0);
    if r <= tol.max(1e-12) {
        Ok((u, h, max_iter))
    } else {
        Err((r, max_iter))
    }
}

/// g_U decreases in U* for fixed H*, and g_H along that curve decreases in H*.
fn bisect_stage(conc: &StageConc, params: &PlantParams) -> (f64, f64) {
    let solve_u = |h: f64| {
        let (mut lo, mut hi) = (0.0, conc.u_star_max());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if residual_and_jacobian(conc, mid, h, params).0 .0 > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let (mut lo, mut hi) = (0.0, conc.h_star_max());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let u = solve_u(mid);
        if residual_and_jacobian(conc, u, mid, params).0 .1 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let h = 0.5 * (lo + hi);
    (solve_u(h), h)
}

/// Iteration statistics of an algebraic solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AlgebraicStats {
    pub max_iterations: usize,
    pub total_iterations: usize,
}

/// Interface equilibrium for every stage, optionally warm-started.
pub fn solve_algebraic_warm(
    x: &[f64; N_STATES],
    warm: Option<&[f64; N_ALG]>,
    params: &PlantParams,
    opts: &IntegratorOptions,
) -> Result<([f64; N_ALG], AlgebraicStats)> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite state at index {i}")));
    }
    let mut alg = [0.0; N_ALG];
    let mut stats = AlgebraicStats::default();
    for n in 0..N_STAGES {
        let conc = clamp_conc(StageConc::of(x, n));
        let w = warm.map(|w| (w[n], w[N_STAGES + n]));
        let (u, h, it) = solve_stage(
            &conc,
            w,
            params,
            opts.algebraic_tol,
            opts.algebraic_max_iter,
        )
        .map_err(|(residual, iterations)| Error::Algebraic {
            stage: n + 1,
            residual,
            iterations,
        })?;
        alg[n] = u;
        alg[N_STAGES + n] = h;
        stats.max_iterations = stats.max_iterations.max(it);
        stats.total_iterations += it;
    }
    Ok((alg, stats))
}

/// Interface equilibrium for every stage from a cold start.
pub fn solve_algebraic(
    x: &[f64; N_STATES],
    params: &PlantParams,
    opts: &IntegratorOptions,
) -> Result<[f64; N_ALG]> {
    if let Some(i) = x.iter().position(|v| *v < 0.0) {
        return Err(Error::Domain(format!(
            "negative concentration {} at index {i}",
            x[i]
        )));
    }
    solve_algebraic_warm(x, None, params, opts).map(|(a, _)| a)
}

/// Round-off inside implicit solves can leave concentrations a hair below
/// zero; the equilibrium is evaluated on the clamped values.
#[inline]
fn clamp_conc(c: StageConc) -> StageConc {
    StageConc {
        u_aq: c.u_aq.max(0.0),
        u_org: c.u_org.max(0.0),
        h_aq: c.h_aq.max(0.0),
        h_org: c.h_org.max(0.0),
    }
}

/// Right-hand side and Jacobian machinery for one operating point.
pub(crate) struct Evaluator<'a> {
    pub params: &'a PlantParams,
    pub opts: &'a IntegratorOptions,
    pub flows: StageFlows,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        params: &'a PlantParams,
        opts: &'a IntegratorOptions,
        u: f64,
        q: f64,
    ) -> Result<Self> {
        Ok(Evaluator {
            params,
            opts,
            flows: wire_flows(params, u, q)?,
        })
    }

    /// f(x) with the algebraic variables re-solved (warm-started from `alg`).
    pub fn rhs(&self, x: &[f64; N_STATES], alg: &mut [f64; N_ALG]) -> Result<[f64; N_STATES]> {
        let (solved, _) = solve_algebraic_warm(x, Some(alg), self.params, self.opts)?;
        *alg = solved;
        let mut out = [0.0; N_STATES];
        rhs_into(x, alg, &self.flows, self.params, &mut out);
        Ok(out)
    }

    /// Forward-difference Jacobian of f, 24 colored evaluations.
    ///
    /// Perturbing a column in stage s only moves rows of stages s-1..=s+1,
    /// so stages three apart share one evaluation.
    pub fn jacobian(
        &self,
        x: &[f64; N_STATES],
        alg: &[f64; N_ALG],
        f0: &[f64; N_STATES],
    ) -> Result<BlockTri> {
        let mut jac = BlockTri::zeros();
        let mut fp = [0.0; N_STATES];
        for residue in 0..3 {
            for block in Block::ALL {
                let mut xp = *x;
                let mut alg_p = *alg;
                let mut deltas = [0.0; N_STAGES];
                let mixer = matches!(
                    block,
                    Block::UAqMixer | Block::UOrgMixer | Block::HAqMixer | Block::HOrgMixer
                );
                for s in (residue..N_STAGES).step_by(3) {
                    let i = block.at(s);
                    let delta = 1.5e-8 * x[i].abs().max(0.1);
                    xp[i] += delta;
                    deltas[s] = xp[i] - x[i];
                    if mixer {
                        let conc = clamp_conc(StageConc::of(&xp, s));
                        let (u, h, _) = solve_stage(
                            &conc,
                            Some((alg[s], alg[N_STAGES + s])),
                            self.params,
                            self.opts.algebraic_tol,
                            self.opts.algebraic_max_iter,
                        )
                        .map_err(|(residual, iterations)| Error::Algebraic {
                            stage: s + 1,
                            residual,
                            iterations,
                        })?;
                        alg_p[s] = u;
                        alg_p[N_STAGES + s] = h;
                    }
                }
                rhs_into(&xp, &alg_p, &self.flows, self.params, &mut fp);
                for s in (residue..N_STAGES).step_by(3) {
                    let col = block.at(s);
                    for t in s.saturating_sub(1)..=(s + 1).min(N_STAGES - 1) {
                        for rb in Block::ALL {
                            let row = rb.at(t);
                            jac.set(row, col, (fp[row] - f0[row]) / deltas[s]);
                        }
                    }
                }
            }
        }
        Ok(jac)
    }
}

#[inline]
fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Counters from one call to [`step_with_stats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub substeps: usize,
    pub newton_iterations: usize,
    pub jacobians: usize,
    pub rejected: usize,
}

struct Newton<'e, 'a> {
    eval: &'e Evaluator<'a>,
    jac: Option<BlockTri>,
    lu: Option<(f64, BlockTriLu)>,
    stats: StepStats,
}

impl<'e, 'a> Newton<'e, 'a> {
    fn refresh_jacobian(
        &mut self,
        x: &[f64; N_STATES],
        alg: &[f64; N_ALG],
        f: &[f64; N_STATES],
    ) -> Result<()> {
        self.jac = Some(self.eval.jacobian(x, alg, f)?);
        self.lu = None;
        self.stats.jacobians += 1;
        Ok(())
    }

    /// Solves x − base − gamma·f(x) = 0 starting from `x`.
    fn solve(
        &mut self,
        x: &mut [f64; N_STATES],
        alg: &mut [f64; N_ALG],
        base: &[f64; N_STATES],
        gamma: f64,
    ) -> Result<()> {
        let opts = self.eval.opts;
        let mut last_norm = f64::INFINITY;
        let mut refreshed = false;
        for _ in 0..opts.newton_max_iter {
            let f = self.eval.rhs(x, alg)?;
            if self.jac.is_none() {
                self.refresh_jacobian(x, alg, &f)?;
                refreshed = true;
            }
            if self.lu.as_ref().map(|(g, _)| *g != gamma).unwrap_or(true) {
                let m = self.jac.as_ref().unwrap().shifted(1.0, -gamma);
                self.lu = Some((gamma, m.factor()?));
            }
            let mut neg_r = [0.0; N_STATES];
            for i in 0..N_STATES {
                neg_r[i] = -(x[i] - base[i] - gamma * f[i]);
            }
            let delta = self.lu.as_ref().unwrap().1.solve(&neg_r);
            for i in 0..N_STATES {
                x[i] += delta[i];
            }
            self.stats.newton_iterations += 1;
            let dn = max_abs(&delta);
            if !dn.is_finite() {
                return Err(Error::Integration("Newton update is not finite".into()));
            }
            if dn <= opts.newton_tol {
                let (solved, _) = solve_algebraic_warm(x, Some(alg), self.eval.params, opts)?;
                *alg = solved;
                return Ok(());
            }
            if dn > 0.5 * last_norm && !refreshed {
                // Stale Jacobian; rebuild at the current iterate.
                let f = self.eval.rhs(x, alg)?;
                self.refresh_jacobian(x, alg, &f)?;
                refreshed = true;
            }
            last_norm = dn;
        }
        Err(Error::Integration(format!(
            "Newton did not converge in {} iterations (last update {last_norm:.3e})",
            opts.newton_max_iter
        )))
    }
}

/// Advances the plant by `duration` hours at constant feed `u` and solvent `q`.
pub fn step(
    state: &PlantState,
    u: f64,
    q: f64,
    duration: f64,
    opts: &IntegratorOptions,
    params: &PlantParams,
) -> Result<PlantState> {
    step_with_stats(state, u, q, duration, opts, params).map(|(s, _)| s)
}

pub fn step_with_stats(
    state: &PlantState,
    u: f64,
    q: f64,
    duration: f64,
    opts: &IntegratorOptions,
    params: &PlantParams,
) -> Result<(PlantState, StepStats)> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Domain(format!(
            "step duration must be positive, got {duration}"
        )));
    }
    let eval = Evaluator::new(params, opts, u, q)?;
    let mut newton = Newton {
        eval: &eval,
        jac: None,
        lu: None,
        stats: StepStats::default(),
    };

    let n_nominal = (duration / opts.dt_internal - 1e-9).ceil().max(1.0);
    let h_nominal = duration / n_nominal;
    let mut h = h_nominal;
    let mut t = 0.0;
    let mut x = state.x;
    let mut alg = state.x_alg;
    // Previous accepted point for BDF2, with the step size that led to it.
    let mut prev: Option<([f64; N_STATES], f64)> = None;

    while duration - t > 1e-12 * duration {
        let h_try = h.min(duration - t);
        let mut x_new = x;
        let mut alg_new = alg;
        let (base, gamma) = match (opts.method, prev) {
            (Method::Bdf2, Some((xp, hp))) if (hp - h_try).abs() <= 1e-12 * h_try => {
                let mut b = [0.0; N_STATES];
                for i in 0..N_STATES {
                    b[i] = (4.0 * x[i] - xp[i]) / 3.0;
                }
                (b, 2.0 * h_try / 3.0)
            }
            _ => (x, h_try),
        };
        match newton.solve(&mut x_new, &mut alg_new, &base, gamma) {
            Ok(()) => {
                prev = Some((x, h_try));
                x = x_new;
                alg = alg_new;
                t += h_try;
                newton.stats.substeps += 1;
                if h < h_nominal {
                    h = (2.0 * h).min(h_nominal);
                }
            }
            Err(err) => {
                newton.stats.rejected += 1;
                newton.jac = None;
                newton.lu = None;
                prev = None;
                h = 0.5 * h_try;
                if h < opts.dt_floor {
                    return Err(Error::Integration(format!(
                        "sub-step fell below {} h at t = {t:.4} h: {err}",
                        opts.dt_floor
                    )));
                }
            }
        }
    }
    Ok((PlantState { x, x_alg: alg }, newton.stats))
}
