//! Surrogate-based NMPC solved by particle swarm, and the rule that hands
//! the plant over to a constant steady-state input once it has settled.

use std::cell::RefCell;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::pso::{optimize, BoxedProblem, PsoOptions};
use crate::surrogate::{SurrogateModel, ThetaVector};

#[derive(Debug, Clone, PartialEq)]
pub struct NmpcConfig {
    /// Prediction horizon N_p.
    pub horizon: usize,
    /// Multipliers on the base weights w_p = w_q = 1/y_set, w_r = w_s = 1/u_set.
    pub gain_p: f64,
    pub gain_q: f64,
    pub gain_r: f64,
    pub gain_s: f64,
    /// Maximum overshoot OS_max.
    pub os_max: f64,
    /// Steady-state band ε (relative).
    pub epsilon: f64,
    pub enforce_zbar: bool,
    /// Constant factor on the cost seen by the optimiser.
    pub objective_gain: f64,
    /// Relative change of q̂ that triggers a new u_set.
    pub q_change_tol: f64,
    /// Relative distance |u − u_set| / u_set counted as "u = u_set".
    pub u_match_tol: f64,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        NmpcConfig {
            horizon: 3,
            gain_p: 100.0,
            gain_q: 100.0,
            gain_r: 1.0,
            gain_s: 1.0,
            os_max: 0.2,
            epsilon: 0.05,
            enforce_zbar: true,
            objective_gain: 1e4,
            q_change_tol: 0.005,
            u_match_tol: 0.02,
        }
    }
}

impl NmpcConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let c = NmpcConfig {
            horizon: kv.or("nmpc.horizon", d.horizon)?,
            gain_p: kv.or("nmpc.gain_p", d.gain_p)?,
            gain_q: kv.or("nmpc.gain_q", d.gain_q)?,
            gain_r: kv.or("nmpc.gain_r", d.gain_r)?,
            gain_s: kv.or("nmpc.gain_s", d.gain_s)?,
            os_max: kv.or("nmpc.os_max", d.os_max)?,
            epsilon: kv.or("nmpc.epsilon", d.epsilon)?,
            enforce_zbar: kv.or("nmpc.enforce_zbar", d.enforce_zbar)?,
            objective_gain: kv.or("nmpc.objective_gain", d.objective_gain)?,
            q_change_tol: kv.or("nmpc.q_change_tol", d.q_change_tol)?,
            u_match_tol: kv.or("nmpc.u_match_tol", d.u_match_tol)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("nmpc.horizon must be at least 1".into()));
        }
        for (name, w) in [
            ("gain_p", self.gain_p),
            ("gain_q", self.gain_q),
            ("gain_r", self.gain_r),
            ("gain_s", self.gain_s),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("nmpc.{name} must be non-negative")));
            }
        }
        if !(self.os_max > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config(
                "nmpc.os_max and nmpc.epsilon must be positive".into(),
            ));
        }
        if !(self.objective_gain > 0.0 && self.q_change_tol >= 0.0 && self.u_match_tol >= 0.0) {
            return Err(Error::Config("nmpc tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Cost weights for one set point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub w_p: f64,
    pub w_q: f64,
    pub w_r: f64,
    pub w_s: f64,
}

impl Weights {
    pub fn for_targets(cfg: &NmpcConfig, y_set: f64, u_set: f64) -> Self {
        Weights {
            w_p: cfg.gain_p / y_set,
            w_q: cfg.gain_q / y_set,
            w_r: cfg.gain_r / u_set,
            w_s: cfg.gain_s / u_set,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Nmpc,
    SteadyHold,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Nmpc => "NMPC",
            Mode::SteadyHold => "STEADY_HOLD",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ControlFlags {
    /// The rate bound was dropped to find a feasible plan.
    pub rate_relaxed: bool,
    /// No feasible plan even without the rate bound; u_prev held.
    pub infeasible_hold: bool,
    /// Overshoot bound not imposed because y already exceeds it.
    pub overshoot_suspended: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlDecision {
    pub u_applied: f64,
    pub u_sequence: Vec<f64>,
    pub mode: Mode,
    pub flags: ControlFlags,
    pub objective: f64,
    pub predicted_y: Vec<f64>,
    pub predicted_zbar: Vec<bool>,
}

/// Everything `plan` needs about the current period.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanInput<'a> {
    /// y_m(k−N..k), u(k−N..k−1) (last u entry ignored), q̂ history.
    pub theta: &'a ThetaVector,
    pub q_hat: f64,
    pub u_prev: f64,
    pub y_set: f64,
    pub u_set: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub du_max: f64,
    /// Previous plan, used as a warm start.
    pub warm: Option<&'a [f64]>,
}

/// Predicted outputs over the horizon for one control sequence.
fn rollout(
    model: &SurrogateModel,
    theta: &ThetaVector,
    u: &[f64],
    q_hat: f64,
) -> (Vec<f64>, Vec<bool>) {
    let w = theta.window();
    let mut th = theta.clone();
    for v in th.q.iter_mut().skip(w - 1) {
        *v = q_hat;
    }
    let mut flat = vec![0.0; 3 * w];
    let mut ys = Vec::with_capacity(u.len());
    let mut zs = Vec::with_capacity(u.len());
    for j in 0..u.len() {
        *th.u.last_mut().unwrap() = u[j];
        flat[..w].copy_from_slice(&th.y);
        flat[w..2 * w].copy_from_slice(&th.u);
        flat[2 * w..].copy_from_slice(&th.q);
        let (y, z) = model.predict_flat(&flat, true);
        ys.push(y);
        zs.push(z);
        th.shift(y, u[j], q_hat);
    }
    (ys, zs)
}

/// Tracking cost of a sequence given its predictions.
pub fn cost(weights: &Weights, y_set: f64, u_set: f64, u_prev: f64, u: &[f64], y: &[f64]) -> f64 {
    let mut j = 0.0;
    for &yj in y {
        j += weights.w_p * (yj - y_set).powi(2);
    }
    j += weights.w_q * (y[y.len() - 1] - y_set).powi(2);
    let mut prev = u_prev;
    for &uj in u {
        j += weights.w_r * (uj - u_set).powi(2) + weights.w_s * (uj - prev).powi(2);
        prev = uj;
    }
    j
}

/// One receding-horizon solve.
pub fn plan(
    input: &PlanInput,
    cfg: &NmpcConfig,
    model: &SurrogateModel,
    pso: &PsoOptions,
) -> Result<ControlDecision> {
    let np = cfg.horizon;
    if input.theta.window() != model.window() {
        return Err(Error::Dimension {
            expected: model.window(),
            got: input.theta.window(),
        });
    }
    if !(input.y_set > 0.0 && input.u_set > 0.0) {
        return Err(Error::Domain("set points must be positive".into()));
    }
    let weights = Weights::for_targets(cfg, input.y_set, input.u_set);
    let y_now = *input.theta.y.last().unwrap();
    let y_cap = (1.0 + cfg.os_max) * input.y_set;
    let overshoot_suspended = y_now > y_cap;

    let cache: RefCell<Option<(Vec<f64>, Vec<f64>, Vec<bool>)>> = RefCell::new(None);
    let predict = |u: &[f64]| -> (Vec<f64>, Vec<bool>) {
        if let Some((cu, y, z)) = cache.borrow().as_ref() {
            if cu.as_slice() == u {
                return (y.clone(), z.clone());
            }
        }
        let (y, z) = rollout(model, input.theta, u, input.q_hat);
        *cache.borrow_mut() = Some((u.to_vec(), y.clone(), z.clone()));
        (y, z)
    };
    let output_ok = |u: &[f64]| {
        let (y, z) = predict(u);
        (!cfg.enforce_zbar || z.iter().all(|v| *v))
            && (overshoot_suspended || y.iter().all(|v| *v <= y_cap))
    };
    let gain = cfg.objective_gain;
    let objective = |u: &[f64]| {
        let (y, _) = predict(u);
        gain * cost(&weights, input.y_set, input.u_set, input.u_prev, u, &y)
    };

    let mut seeds = vec![vec![input.u_set; np], vec![input.u_prev; np]];
    if let Some(w) = input.warm.filter(|w| w.len() == np) {
        let mut shifted = w[1..].to_vec();
        shifted.push(w[np - 1]);
        seeds.insert(0, shifted);
    }

    // Rate-limited attempt: move j lies within (j+1)·du_max of u_prev.
    let du = input.du_max;
    let lower: Vec<f64> = (0..np)
        .map(|j| (input.u_prev - (j + 1) as f64 * du).max(input.u_min))
        .collect();
    let upper: Vec<f64> = (0..np)
        .map(|j| (input.u_prev + (j + 1) as f64 * du).min(input.u_max))
        .collect();
    let rate_ok = |u: &[f64]| {
        let mut prev = input.u_prev;
        u.iter().all(|&v| {
            let ok = (v - prev).abs() <= du * (1.0 + 1e-12);
            prev = v;
            ok
        })
    };
    let feasible = |u: &[f64]| rate_ok(u) && output_ok(u);
    let boxes_ok = lower.iter().zip(&upper).all(|(l, u)| l < u);
    let mut flags = ControlFlags {
        overshoot_suspended,
        ..Default::default()
    };
    let mut result = None;
    if boxes_ok {
        let problem = BoxedProblem {
            lower,
            upper,
            objective: &objective,
            feasible: &feasible,
        };
        match optimize(&problem, pso, &seeds) {
            Ok(r) => result = Some(r),
            Err(Error::Infeasible { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if result.is_none() {
        flags.rate_relaxed = true;
        let problem = BoxedProblem {
            lower: vec![input.u_min; np],
            upper: vec![input.u_max; np],
            objective: &objective,
            feasible: &output_ok,
        };
        match optimize(&problem, pso, &seeds) {
            Ok(r) => result = Some(r),
            Err(Error::Infeasible { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    match result {
        Some(r) => {
            let (py, pz) = predict(&r.best_point);
            Ok(ControlDecision {
                u_applied: r.best_point[0],
                u_sequence: r.best_point,
                mode: Mode::Nmpc,
                flags,
                objective: r.best_value / gain,
                predicted_y: py,
                predicted_zbar: pz,
            })
        }
        None => {
            flags.infeasible_hold = true;
            let held = vec![input.u_prev.clamp(input.u_min, input.u_max); np];
            let (py, pz) = predict(&held);
            log::warn!("no feasible control sequence; holding u = {}", held[0]);
            Ok(ControlDecision {
                u_applied: held[0],
                objective: cost(&weights, input.y_set, input.u_set, input.u_prev, &held, &py),
                u_sequence: held,
                mode: Mode::Nmpc,
                flags,
                predicted_y: py,
                predicted_zbar: pz,
            })
        }
    }
}

/// STEADY_HOLD iff u_current matches u_set and y_m lies in the ε band.
pub fn switching_decision(
    y_m: f64,
    y_set: f64,
    u_current: f64,
    u_set: f64,
    epsilon: f64,
    u_match_tol: f64,
) -> Mode {
    let u_matches = (u_current - u_set).abs() <= u_match_tol * u_set.abs();
    if u_matches && (y_m - y_set).abs() <= epsilon * y_set {
        Mode::SteadyHold
    } else {
        Mode::Nmpc
    }
}

/// A decision that applies u_set directly.
pub fn hold_decision(u_set: f64, horizon: usize) -> ControlDecision {
    ControlDecision {
        u_applied: u_set,
        u_sequence: vec![u_set; horizon],
        mode: Mode::SteadyHold,
        flags: ControlFlags::default(),
        objective: 0.0,
        predicted_y: Vec::new(),
        predicted_zbar: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::toy_model;

    // y(k+1) = 0.6 y(k) + 0.2 u(k) − 0.01 q(k): steady y = (0.2 u − 0.01 q) / 0.4.
    fn toy() -> SurrogateModel {
        toy_model(1, vec![0.0, 0.6, 0.0, 0.2, 0.0, -0.01], 0.0)
    }

    fn input<'a>(theta: &'a ThetaVector, u_prev: f64, y_set: f64, u_set: f64) -> PlanInput<'a> {
        PlanInput {
            theta,
            q_hat: 1.0,
            u_prev,
            y_set,
            u_set,
            u_min: 0.5,
            u_max: 4.0,
            du_max: 1.0,
            warm: None,
        }
    }

    #[test]
    fn steady_state_plan_is_constant() {
        let u_set = 2.0;
        let y_set = (0.2 * u_set - 0.01) / 0.4;
        let theta = ThetaVector::constant(2, y_set, u_set, 1.0);
        let d = plan(
            &input(&theta, u_set, y_set, u_set),
            &NmpcConfig::default(),
            &toy(),
            &PsoOptions::default(),
        )
        .unwrap();
        assert!(d.objective < 1e-10, "{}", d.objective);
        for u in &d.u_sequence {
            assert!((u - u_set).abs() < 1e-4, "{:?}", d.u_sequence);
        }
        assert_eq!(d.u_applied, d.u_sequence[0]);
    }

    #[test]
    fn rate_bound_limits_first_move() {
        let theta = ThetaVector::constant(2, 0.2, 0.5, 1.0);
        let cfg = NmpcConfig {
            gain_r: 0.0,
            gain_s: 0.0,
            os_max: 10.0,
            ..Default::default()
        };
        let d = plan(
            &input(&theta, 0.5, 1.9, 4.0),
            &cfg,
            &toy(),
            &PsoOptions::default(),
        )
        .unwrap();
        assert!(!d.flags.rate_relaxed);
        assert!(d.u_applied <= 1.5 + 1e-12, "{}", d.u_applied);
        let mut prev = 0.5;
        for u in &d.u_sequence {
            assert!((u - prev).abs() <= 1.0 + 1e-9);
            prev = *u;
        }
    }

    #[test]
    fn single_move_matches_grid_search() {
        let model = toy();
        let cfg = NmpcConfig {
            horizon: 1,
            os_max: 10.0,
            ..Default::default()
        };
        let theta = ThetaVector::new(vec![0.7, 0.8], vec![1.5, 1.7], vec![1.0, 1.0]).unwrap();
        let inp = PlanInput {
            du_max: 10.0,
            ..input(&theta, 1.7, 0.9, 1.8)
        };
        let d = plan(&inp, &cfg, &model, &PsoOptions::default()).unwrap();
        let w = Weights::for_targets(&cfg, inp.y_set, inp.u_set);
        let n = 35_001;
        let (mut best_u, mut best_j) = (0.0, f64::INFINITY);
        for i in 0..n {
            let u = 0.5 + 3.5 * i as f64 / (n - 1) as f64;
            let y = 0.6 * 0.8 + 0.2 * u - 0.01;
            let j = cost(&w, inp.y_set, inp.u_set, inp.u_prev, &[u], &[y]);
            if j < best_j {
                best_u = u;
                best_j = j;
            }
        }
        assert!(
            (d.u_applied - best_u).abs() < 2e-4,
            "{} vs {best_u}",
            d.u_applied
        );
    }

    #[test]
    fn argmin_invariant_to_common_weight_scale() {
        let model = toy();
        let theta = ThetaVector::constant(2, 0.6, 1.4, 1.0);
        let base = NmpcConfig {
            gain_r: 0.0,
            gain_s: 0.0,
            gain_q: 0.5,
            os_max: 10.0,
            ..Default::default()
        };
        let scaled = NmpcConfig {
            gain_p: 7.0,
            gain_q: 3.5,
            objective_gain: base.objective_gain / 7.0,
            ..base.clone()
        };
        let inp = input(&theta, 1.4, 1.2, 2.4);
        let a = plan(&inp, &base, &model, &PsoOptions::default()).unwrap();
        let b = plan(&inp, &scaled, &model, &PsoOptions::default()).unwrap();
        assert!(
            (a.u_applied - b.u_applied).abs() < 1e-6,
            "{} vs {}",
            a.u_applied,
            b.u_applied
        );
    }

    #[test]
    fn overshoot_bound_is_hard() {
        let theta = ThetaVector::constant(2, 0.4, 1.0, 1.0);
        let cfg = NmpcConfig {
            os_max: 0.05,
            gain_p: 0.0,
            gain_q: 0.0,
            ..Default::default()
        };
        // u_set well above the level that keeps y below 1.05·y_set.
        let d = plan(
            &input(&theta, 1.0, 0.5, 4.0),
            &cfg,
            &toy(),
            &PsoOptions::default(),
        )
        .unwrap();
        assert!(
            d.predicted_y.iter().all(|y| *y <= 0.525 + 1e-12),
            "{:?}",
            d.predicted_y
        );
    }

    #[test]
    fn switching_band_edges() {
        assert_eq!(
            switching_decision(1.0, 1.0, 2.0, 2.0, 0.05, 0.0),
            Mode::SteadyHold
        );
        assert_eq!(
            switching_decision(1.06, 1.0, 2.0, 2.0, 0.05, 0.0),
            Mode::Nmpc
        );
        assert_eq!(
            switching_decision(1.0, 1.0, 2.1, 2.0, 0.05, 0.0),
            Mode::Nmpc
        );
        assert_eq!(
            switching_decision(1.04, 1.0, 2.03, 2.0, 0.05, 0.02),
            Mode::SteadyHold
        );
    }

    #[test]
    fn cost_terms_vanish_at_target() {
        let w = Weights {
            w_p: 1.0,
            w_q: 2.0,
            w_r: 3.0,
            w_s: 4.0,
        };
        assert_eq!(cost(&w, 0.5, 2.0, 2.0, &[2.0; 3], &[0.5; 3]), 0.0);
        // One unit of each deviation: 3·w_p·0.01 + w_q·0.01 + w_r + w_s.
        let j = cost(&w, 0.5, 2.0, 1.0, &[3.0, 3.0, 3.0], &[0.6, 0.6, 0.6]);
        assert!((j - (0.03 + 0.02 + 9.0 + 4.0 * 4.0)).abs() < 1e-12, "{j}");
    }
}
