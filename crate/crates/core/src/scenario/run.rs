use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use super::metrics::{compute_metrics, Metrics};
use super::record::{edge_index, ClosedLoopRecord, ProfileRow, RecordRow, TimingRow};
use super::{InitialCondition, Scenario};
use crate::config::Config;
use crate::dae::{step, SteadyStateSolver};
use crate::error::{Error, Result};
use crate::mhe::EstimatorState;
use crate::model::PlantState;
use crate::nmpc::{hold_decision, plan, switching_decision, ControlDecision, Mode, PlanInput};
use crate::surrogate::{startup_state, SurrogateModel, ThetaVector};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Apply u_set throughout instead of running the controller.
    pub open_loop: bool,
    /// Overrides the PSO seed of the configuration.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub record: ClosedLoopRecord,
    pub metrics: Metrics,
    pub final_state: PlantState,
}

impl ScenarioOutput {
    /// Record, profiles, timings, metrics and plot script.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.record.save(dir)?;
        let path = dir.join("metrics.txt");
        std::fs::write(&path, self.metrics.to_text()).map_err(|e| Error::io(&path, e))?;
        write_plot_script(dir)
    }
}

/// A run that stopped early, with everything recorded up to the failure.
#[derive(Debug)]
pub struct ScenarioAbort {
    pub partial: ScenarioOutput,
    pub error: Error,
}

impl fmt::Display for ScenarioAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for ScenarioAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// u_set for (y_set, q̂), clamped to the input box when the target is out
/// of reach.
fn target_input(solver: &mut SteadyStateSolver, y_set: f64, q_hat: f64) -> Result<f64> {
    match solver.u_set(y_set, q_hat) {
        Ok(u) => Ok(u),
        Err(Error::InfeasibleTarget { y_lo, .. }) => {
            let u = if y_set < y_lo {
                solver.params.u_min
            } else {
                solver.params.u_max
            };
            log::warn!("y_set {y_set} unreachable at q = {q_hat}; using u_set = {u}");
            Ok(u)
        }
        Err(e) => Err(e),
    }
}

struct Loop<'a> {
    scenario: &'a Scenario,
    cfg: &'a Config,
    model: &'a SurrogateModel,
    opts: RunOptions,
    solver: SteadyStateSolver,
    est: EstimatorState,
    state: PlantState,
    y_hist: VecDeque<f64>,
    u_hist: VecDeque<f64>,
    record: ClosedLoopRecord,
}

impl Loop<'_> {
    fn theta(&self, q_hat: f64) -> ThetaVector {
        let n = self.model.n_hist;
        let mut q = self.est.q_history(n);
        q.push(q_hat);
        let mut u: Vec<f64> = self.u_hist.iter().copied().collect();
        u.push(*u.last().unwrap());
        ThetaVector {
            y: self.y_hist.iter().copied().collect(),
            u,
            q,
        }
    }

    fn run(&mut self) -> Result<(), (usize, Error)> {
        let p = &self.cfg.plant;
        let n_periods = self.scenario.periods(p.sampling_time);
        let mut pso = self.cfg.pso.clone();
        if let Some(s) = self.opts.seed {
            pso.seed = s;
        }
        let mut u_prev = *self.u_hist.back().unwrap();
        let mut last_y_set = f64::NAN;
        let mut q_at_target = f64::NAN;
        let mut u_set = u_prev;
        let mut warm: Option<Vec<f64>> = None;
        for k in 0..n_periods {
            let t = k as f64 * p.sampling_time;
            let y_set = self.scenario.y_set.value_at(t);
            let q_true = self.scenario.q_true.value_at(t);
            let y_m = self.state.y();
            let z = self.state.z();

            let clock = Instant::now();
            self.est.push_measurement(y_m);
            let mut at_bound = false;
            if self.est.is_ready() {
                let mut mpso = pso.clone();
                mpso.seed = pso.seed.wrapping_add(1);
                let e = self.est.estimate(self.model, &mpso).map_err(|e| (k, e))?;
                at_bound = e.at_bound;
            }
            let t_mhe = clock.elapsed().as_secs_f64();
            let q_hat = self.est.current_estimate();
            // Open loop ignores the estimate: u_set stays at its nominal-flow value.
            let q_target = if self.opts.open_loop {
                p.q_nominal
            } else {
                q_hat
            };

            let mut targets_changed = false;
            if y_set != last_y_set
                || (q_target - q_at_target).abs() > self.cfg.nmpc.q_change_tol * q_at_target
            {
                u_set = target_input(&mut self.solver, y_set, q_target).map_err(|e| (k, e))?;
                targets_changed = k > 0;
                last_y_set = y_set;
                q_at_target = q_target;
            }

            self.y_hist.push_back(y_m);
            self.y_hist.pop_front();
            let clock = Instant::now();
            let (mode, decision) = if self.opts.open_loop {
                ("OPEN_LOOP", hold_decision(u_set, self.cfg.nmpc.horizon))
            } else {
                let nm = &self.cfg.nmpc;
                let hold = !targets_changed
                    && switching_decision(y_m, y_set, u_prev, u_set, nm.epsilon, nm.u_match_tol)
                        == Mode::SteadyHold;
                if hold {
                    warm = None;
                    (Mode::SteadyHold.as_str(), hold_decision(u_set, nm.horizon))
                } else {
                    let theta = self.theta(q_hat);
                    let input = PlanInput {
                        theta: &theta,
                        q_hat,
                        u_prev,
                        y_set,
                        u_set,
                        u_min: p.u_min,
                        u_max: p.u_max,
                        du_max: p.du_max,
                        warm: warm.as_deref(),
                    };
                    let mut cpso = pso.clone();
                    cpso.seed = pso
                        .seed
                        .wrapping_add(2)
                        .wrapping_add((k as u64).wrapping_mul(0x9E37_79B9));
                    let d: ControlDecision =
                        plan(&input, nm, self.model, &cpso).map_err(|e| (k, e))?;
                    warm = Some(d.u_sequence.clone());
                    (Mode::Nmpc.as_str(), d)
                }
            };
            let t_nmpc = clock.elapsed().as_secs_f64();
            let u = decision.u_applied;
            log::debug!("t {t:6.1} y {y_m:.5} u {u:.4} u_set {u_set:.4} q_hat {q_hat:.3} {mode}");

            self.record.rows.push(RecordRow {
                step: k,
                t,
                y_set,
                y_m,
                z,
                zbar_pred: decision.predicted_zbar.first().copied(),
                u,
                u_set,
                q_true,
                q_hat,
                mode,
                overshoot: y_m / y_set - 1.0,
                flags: decision.flags,
                mhe_at_bound: at_bound,
            });
            let profile = self.state.settler_aq_uranium();
            self.record.profiles.push(ProfileRow {
                step: k,
                t,
                u_aq: profile,
                edge: edge_index(&profile),
            });

            self.est.push_control(u);
            self.u_hist.push_back(u);
            self.u_hist.pop_front();
            u_prev = u;
            let clock = Instant::now();
            self.state = step(
                &self.state,
                u,
                q_true,
                p.sampling_time,
                &self.cfg.integrator,
                p,
            )
            .map_err(|e| (k, e))?;
            self.record.timings.push(TimingRow {
                step: k,
                mhe: t_mhe,
                nmpc: t_nmpc,
                plant: clock.elapsed().as_secs_f64(),
            });
        }
        Ok(())
    }
}

/// Runs `scenario` in closed loop (or open loop) against the plant model.
///
/// Per period: measure, estimate q, update u_set and the mode, plan, apply
/// the first move, integrate the plant over one sampling time.
pub fn run_scenario(
    scenario: &Scenario,
    cfg: &Config,
    model: &SurrogateModel,
    opts: RunOptions,
) -> std::result::Result<ScenarioOutput, Box<ScenarioAbort>> {
    let p = &cfg.plant;
    let finish = |record: ClosedLoopRecord, state: PlantState| {
        let metrics = compute_metrics(&record.rows, scenario, p, cfg.nmpc.epsilon, cfg.nmpc.os_max);
        ScenarioOutput {
            record,
            metrics,
            final_state: state,
        }
    };
    let abort = |step: usize, error: Error, record: ClosedLoopRecord, state: PlantState| {
        Box::new(ScenarioAbort {
            partial: finish(record, state),
            error: Error::Scenario {
                step,
                source: Box::new(error),
            },
        })
    };
    let init = || -> Result<(SteadyStateSolver, EstimatorState, PlantState, f64)> {
        scenario.validate(p)?;
        let mut solver = SteadyStateSolver::new(p.clone(), cfg.integrator.clone());
        let est = EstimatorState::new(model.n_hist, cfg.mhe.clone(), p.q_nominal)?;
        let q0 = scenario.q_true.value_at(0.0);
        let u0 = target_input(&mut solver, scenario.y_set.value_at(0.0), q0)?;
        let state = match scenario.initial {
            InitialCondition::Startup => startup_state(u0, q0, p, &cfg.integrator)?,
            InitialCondition::SteadyAtSetPoint => solver.solve(u0, q0)?,
        };
        Ok((solver, est, state, u0))
    };
    let (solver, mut est, state, u0) = match init() {
        Ok(v) => v,
        Err(e) => {
            return Err(abort(
                0,
                e,
                ClosedLoopRecord::default(),
                PlantState::default(),
            ))
        }
    };
    let w = model.window();
    let q0 = scenario.q_true.value_at(0.0);
    if scenario.initial == InitialCondition::SteadyAtSetPoint {
        est.prefill(state.y(), u0, q0);
    }
    let mut lp = Loop {
        scenario,
        cfg,
        model,
        opts,
        solver,
        est,
        state,
        y_hist: std::iter::repeat_n(state.y(), w).collect(),
        u_hist: std::iter::repeat_n(u0, w - 1).collect(),
        record: ClosedLoopRecord::default(),
    };
    match lp.run() {
        Ok(()) => Ok(finish(lp.record, lp.state)),
        Err((k, e)) => Err(abort(k, e, lp.record, lp.state)),
    }
}

const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""Plots record.csv and profiles.csv from this directory."""
import csv
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(sys.argv[0]))


def read(name):
    with open(os.path.join(here, name)) as f:
        return list(csv.DictReader(f))


rec = read("record.csv")
t = [float(r["t"]) for r in rec]
col = lambda k: [float(r[k]) for r in rec]

fig, ax = plt.subplots(4, 1, sharex=True, figsize=(8, 10))
ax[0].plot(t, col("y_m"), label="y")
ax[0].plot(t, col("y_set"), "--", label="y_set")
ax[0].set_ylabel("U_aq,9 [mol/L]")
ax[0].legend()
ax[1].step(t, col("u"), where="post", label="u")
ax[1].step(t, col("u_set"), "--", where="post", label="u_set")
ax[1].set_ylabel("A_F [L/h]")
ax[1].legend()
ax[2].plot(t, col("q_true"), label="q")
ax[2].plot(t, col("q_hat"), "--", label="q_hat")
ax[2].set_ylabel("O_E [L/h]")
ax[2].legend()
ax[3].plot(t, col("z"))
ax[3].set_ylabel("U_aq,1 [mol/L]")
ax[3].set_xlabel("t [h]")
fig.tight_layout()
fig.savefig(os.path.join(here, "closed_loop.png"), dpi=120)

prof = read("profiles.csv")
stages = list(range(1, 17))
fig, ax = plt.subplots(figsize=(7, 4))
every = max(1, len(prof) // 8)
for r in prof[::every]:
    ax.plot(stages, [float(r[f"u_aq_{i}"]) for i in stages], label=f"t={float(r['t']):g} h")
ax.set_xlabel("stage")
ax.set_ylabel("U_aq settler [mol/L]")
ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(os.path.join(here, "profiles.png"), dpi=120)
"#;

pub fn write_plot_script(dir: &Path) -> Result<()> {
    let path = dir.join("plot.py");
    std::fs::write(&path, PLOT_SCRIPT).map_err(|e| Error::io(&path, e))
}
