//! Moving-horizon estimation of the fresh-solvent flow q from the
//! surrogate's prediction residuals.

use std::collections::VecDeque;
use std::str::FromStr;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::pso::{optimize, BoxedProblem, PsoOptions};
use crate::surrogate::{SurrogateModel, ThetaVector};

/// Source of the q̂ values that precede the window in its initial θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreWindow {
    /// Equal to the first decision q̂(k−N_e|k).
    Anchored,
    /// Estimates committed by earlier calls.
    Committed,
}

impl FromStr for PreWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchored" => Ok(PreWindow::Anchored),
            "committed" => Ok(PreWindow::Committed),
            _ => Err(Error::Config(format!("unknown pre-window mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheConfig {
    /// Estimation horizon N_e.
    pub horizon: usize,
    /// Forgetting factor λ.
    pub forgetting: f64,
    /// Search box for q̂ as fractions of q_nominal.
    pub q_lo: f64,
    pub q_hi: f64,
    /// Residuals are divided by this before squaring inside the optimiser.
    pub residual_scale: f64,
    pub pre_window: PreWindow,
    /// Weight on squared relative changes between consecutive decisions.
    pub smoothing: f64,
    /// Weight on the squared relative change of q̂(k−N_e) from its previous estimate.
    pub arrival: f64,
    /// Weight on the squared relative distance of each decision from q_nominal.
    pub prior: f64,
}

impl Default for MheConfig {
    fn default() -> Self {
        MheConfig {
            horizon: 3,
            forgetting: 0.9,
            q_lo: 0.5,
            q_hi: 1.5,
            residual_scale: 1e-4,
            pre_window: PreWindow::Anchored,
            smoothing: 3e-5,
            arrival: 1e-5,
            prior: 1e-5,
        }
    }
}

impl MheConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let c = MheConfig {
            horizon: kv.or("mhe.horizon", d.horizon)?,
            forgetting: kv.or("mhe.forgetting", d.forgetting)?,
            q_lo: kv.or("mhe.q_lo", d.q_lo)?,
            q_hi: kv.or("mhe.q_hi", d.q_hi)?,
            residual_scale: kv.or("mhe.residual_scale", d.residual_scale)?,
            pre_window: kv.or("mhe.pre_window", d.pre_window)?,
            smoothing: kv.or("mhe.smoothing", d.smoothing)?,
            arrival: kv.or("mhe.arrival", d.arrival)?,
            prior: kv.or("mhe.prior", d.prior)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("mhe.horizon must be at least 1".into()));
        }
        if !(self.forgetting > 0.0 && self.forgetting < 1.0) {
            return Err(Error::Config("mhe.forgetting must lie in (0, 1)".into()));
        }
        if !(self.q_lo > 0.0 && self.q_lo < self.q_hi) {
            return Err(Error::Config(
                "mhe q box must satisfy 0 < q_lo < q_hi".into(),
            ));
        }
        if !(self.residual_scale > 0.0) {
            return Err(Error::Config("mhe.residual_scale must be positive".into()));
        }
        if !(self.smoothing >= 0.0 && self.arrival >= 0.0 && self.prior >= 0.0) {
            return Err(Error::Config(
                "mhe penalty weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheEstimate {
    /// q̂(k−N_e|k), ..., q̂(k−1|k).
    pub q_hat: Vec<f64>,
    /// Objective at the optimum, unscaled.
    pub objective: f64,
    /// An estimate sits on the search-box boundary.
    pub at_bound: bool,
    pub iterations: usize,
}

/// Measurement, control and estimate buffers of one estimator.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    n_hist: usize,
    cfg: MheConfig,
    q_nominal: f64,
    /// y_m(j) for the most recent N+N_e+1 periods, oldest first.
    y: VecDeque<f64>,
    /// u(j) for the most recent N+N_e periods.
    u: VecDeque<f64>,
    /// Committed q̂(j), aligned with `u`.
    q: VecDeque<f64>,
    current: f64,
    calls: u64,
}

impl EstimatorState {
    pub fn new(n_hist: usize, cfg: MheConfig, q_nominal: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(EstimatorState {
            n_hist,
            cfg,
            q_nominal,
            y: VecDeque::new(),
            u: VecDeque::new(),
            q: VecDeque::new(),
            current: q_nominal,
            calls: 0,
        })
    }

    pub fn config(&self) -> &MheConfig {
        &self.cfg
    }

    fn y_len(&self) -> usize {
        self.n_hist + self.cfg.horizon + 1
    }

    /// Seeds the buffers with a steady history (y, u, q constant).
    pub fn prefill(&mut self, y: f64, u: f64, q: f64) {
        self.y = std::iter::repeat_n(y, self.y_len() - 1).collect();
        self.u = std::iter::repeat_n(u, self.y_len() - 1).collect();
        self.q = std::iter::repeat_n(q, self.y_len() - 1).collect();
        self.current = q;
    }

    /// Records y_m(k) at the start of period k.
    pub fn push_measurement(&mut self, y: f64) {
        self.y.push_back(y);
        while self.y.len() > self.y_len() {
            self.y.pop_front();
        }
    }

    /// Records the control applied over period k.
    pub fn push_control(&mut self, u: f64) {
        self.u.push_back(u);
        self.q.push_back(self.current);
        while self.u.len() > self.y_len() - 1 {
            self.u.pop_front();
            self.q.pop_front();
        }
    }

    pub fn is_ready(&self) -> bool {
        self.y.len() == self.y_len() && self.u.len() == self.y_len() - 1
    }

    /// q̂(k−1|k), or q_nominal before the first estimate.
    pub fn current_estimate(&self) -> f64 {
        self.current
    }

    /// The last `n` committed q̂ values, oldest first, padded at the front
    /// with the oldest available (or the current estimate).
    pub fn q_history(&self, n: usize) -> Vec<f64> {
        let have = self.q.len().min(n);
        let pad = self
            .q
            .iter()
            .rev()
            .nth(have.saturating_sub(1))
            .copied()
            .unwrap_or(self.current);
        let mut out = vec![pad; n - have];
        out.extend(self.q.iter().skip(self.q.len() - have));
        out
    }

    pub fn bounds(&self) -> (f64, f64) {
        (
            self.cfg.q_lo * self.q_nominal,
            self.cfg.q_hi * self.q_nominal,
        )
    }

    /// Σ λ^{k−j} (ŷ(j|k) − y_m(j))² for a candidate q̂(k−N_e..k−1), plus
    /// the smoothing and arrival penalties.
    pub fn objective(&self, model: &SurrogateModel, q_dec: &[f64]) -> Result<f64> {
        if !self.is_ready() {
            return Err(Error::Config("estimator buffers are not full yet".into()));
        }
        if q_dec.len() != self.cfg.horizon || model.n_hist != self.n_hist {
            return Err(Error::Dimension {
                expected: self.cfg.horizon,
                got: q_dec.len(),
            });
        }
        Ok(self.objective_unchecked(model, q_dec))
    }

    fn objective_unchecked(&self, model: &SurrogateModel, q_dec: &[f64]) -> f64 {
        let (n, ne) = (self.n_hist, self.cfg.horizon);
        let w = n + 1;
        // Window anchored at j0 = k − N_e: buffer positions 0..=N.
        let mut th = ThetaVector {
            y: self.y.iter().take(w).copied().collect(),
            u: self.u.iter().take(w).copied().collect(),
            q: self.q.iter().take(w).copied().collect(),
        };
        match self.cfg.pre_window {
            PreWindow::Anchored => th.q.fill(q_dec[0]),
            PreWindow::Committed => *th.q.last_mut().unwrap() = q_dec[0],
        }
        let mut flat = vec![0.0; 3 * w];
        let mut total = 0.0;
        for i in 1..=ne {
            flat[..w].copy_from_slice(&th.y);
            flat[w..2 * w].copy_from_slice(&th.u);
            flat[2 * w..].copy_from_slice(&th.q);
            let (y_hat, _) = model.predict_flat(&flat, false);
            let e = y_hat - self.y[n + i];
            total += self.cfg.forgetting.powi((ne - i) as i32) * e * e;
            if i < ne {
                th.shift(y_hat, self.u[n + i], q_dec[i]);
            }
        }
        let rel = |a: f64, b: f64| ((a - b) / self.q_nominal).powi(2);
        total += self.cfg.arrival * rel(q_dec[0], self.q[n]);
        let mut prev = match self.cfg.pre_window {
            PreWindow::Anchored => q_dec[0],
            PreWindow::Committed => self.q[n - 1],
        };
        for &q in q_dec {
            total += self.cfg.smoothing * rel(q, prev) + self.cfg.prior * rel(q, self.q_nominal);
            prev = q;
        }
        total
    }

    /// Solves the estimation problem and commits q̂(k−N_e..k−1).
    pub fn estimate(&mut self, model: &SurrogateModel, pso: &PsoOptions) -> Result<MheEstimate> {
        if !self.is_ready() {
            return Err(Error::Config("estimator buffers are not full yet".into()));
        }
        if model.n_hist != self.n_hist {
            return Err(Error::Dimension {
                expected: self.n_hist,
                got: model.n_hist,
            });
        }
        let ne = self.cfg.horizon;
        let (lo, hi) = self.bounds();
        let mut opts = pso.clone();
        opts.seed = pso.seed ^ self.calls.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        self.calls += 1;
        let scale = 1.0 / (self.cfg.residual_scale * self.cfg.residual_scale);
        let objective = |q: &[f64]| scale * self.objective_unchecked(model, q);
        let feasible = |_: &[f64]| true;
        let problem = BoxedProblem {
            lower: vec![lo; ne],
            upper: vec![hi; ne],
            objective: &objective,
            feasible: &feasible,
        };
        let committed: Vec<f64> = self.q.iter().skip(self.q.len() - ne).copied().collect();
        let seeds = vec![committed, vec![self.current; ne], vec![self.q_nominal; ne]];
        let res = optimize(&problem, &opts, &seeds)?;
        let tol = 1e-9 * self.q_nominal;
        let at_bound = res
            .best_point
            .iter()
            .any(|q| (q - lo).abs() <= tol || (hi - q).abs() <= tol);
        let start = self.q.len() - ne;
        for (i, v) in res.best_point.iter().enumerate() {
            self.q[start + i] = *v;
        }
        self.current = *res.best_point.last().unwrap();
        Ok(MheEstimate {
            objective: res.best_value / scale,
            q_hat: res.best_point,
            at_bound,
            iterations: res.iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::toy_model;

    // y(k+1) = 0.5 y(k) + 0.1 u(k) + 0.04 q(k), window of two.
    fn toy() -> SurrogateModel {
        toy_model(1, vec![0.0, 0.5, 0.0, 0.1, 0.0, 0.04], 0.0)
    }

    fn step(y: f64, u: f64, q: f64) -> f64 {
        0.5 * y + 0.1 * u + 0.04 * q
    }

    fn unpenalized() -> MheConfig {
        MheConfig {
            smoothing: 0.0,
            arrival: 0.0,
            prior: 0.0,
            ..MheConfig::default()
        }
    }

    fn filled_with(cfg: MheConfig, q_true: f64, periods: usize) -> EstimatorState {
        let mut est = EstimatorState::new(1, cfg, 1.0).unwrap();
        let mut y = 0.3;
        for k in 0..periods {
            est.push_measurement(y);
            let u = 1.0 + 0.1 * (k % 3) as f64;
            est.push_control(u);
            y = step(y, u, q_true);
        }
        est.push_measurement(y);
        est
    }

    fn filled(q_true: f64, periods: usize) -> EstimatorState {
        filled_with(unpenalized(), q_true, periods)
    }

    #[test]
    fn objective_matches_hand_weighted_sum() {
        let model = toy();
        let est = filled(1.0, 6);
        let ys: Vec<f64> = est.y.iter().copied().collect();
        let us: Vec<f64> = est.u.iter().copied().collect();
        let q = [0.8, 1.1, 1.3];
        // Window anchored at buffer position 1; predictions compared with y[2..=4].
        let p1 = step(ys[1], us[1], q[0]);
        let p2 = step(p1, us[2], q[1]);
        let p3 = step(p2, us[3], q[2]);
        let want = 0.81 * (p1 - ys[2]).powi(2) + 0.9 * (p2 - ys[3]).powi(2) + (p3 - ys[4]).powi(2);
        let got = est.objective(&model, &q).unwrap();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn exact_model_recovers_true_flow() {
        let model = toy();
        let mut est = filled(1.0, 8);
        let r = est.estimate(&model, &PsoOptions::default()).unwrap();
        assert!(r.objective < 1e-14, "{}", r.objective);
        assert!((est.current_estimate() - 1.0).abs() < 1e-3, "{:?}", r.q_hat);

        let mut est = filled(1.2, 8);
        est.estimate(&model, &PsoOptions::default()).unwrap();
        assert!((est.current_estimate() - 1.2).abs() < 1e-3);
    }

    #[test]
    fn older_history_does_not_change_objective() {
        let model = toy();
        let short = filled(1.0, 5);
        let mut long = EstimatorState::new(1, unpenalized(), 1.0).unwrap();
        long.prefill(9.0, 3.0, 1.4);
        for _ in 0..7 {
            long.push_measurement(0.1);
            long.push_control(0.7);
        }
        for (y, u) in short.y.iter().zip(short.u.iter()) {
            long.push_measurement(*y);
            long.push_control(*u);
        }
        long.push_measurement(*short.y.back().unwrap());
        let q = [0.9, 1.0, 1.05];
        assert_eq!(
            short.objective(&model, &q).unwrap(),
            long.objective(&model, &q).unwrap()
        );
    }

    #[test]
    fn penalties_add_to_the_residual_sum() {
        let model = toy();
        let plain = filled(1.0, 6);
        let cfg = MheConfig {
            smoothing: 2.0,
            arrival: 3.0,
            prior: 0.5,
            ..MheConfig::default()
        };
        let pen = filled_with(cfg, 1.0, 6);
        let q = [0.8, 1.1, 1.3];
        // Committed q̂ are all 1.0; the smoothing chain starts at the first decision.
        let extra = 3.0 * 0.04 + 2.0 * (0.09 + 0.04) + 0.5 * (0.04 + 0.01 + 0.09);
        let got = pen.objective(&model, &q).unwrap() - plain.objective(&model, &q).unwrap();
        assert!((got - extra).abs() < 1e-12, "{got} vs {extra}");
    }

    #[test]
    fn committed_mode_chains_from_the_previous_estimate() {
        let model = toy();
        let cfg = MheConfig {
            pre_window: PreWindow::Committed,
            smoothing: 1.0,
            arrival: 0.0,
            prior: 0.0,
            ..MheConfig::default()
        };
        let est = filled_with(cfg, 1.0, 6);
        let q = [0.8, 0.8, 0.8];
        let base = filled(1.0, 6).objective(&model, &q).unwrap();
        assert!((est.objective(&model, &q).unwrap() - base - 0.04).abs() < 1e-12);
        assert!("committed".parse::<PreWindow>().is_ok());
        assert!("sideways".parse::<PreWindow>().is_err());
    }

    #[test]
    fn not_ready_until_buffers_fill() {
        let mut est = EstimatorState::new(2, MheConfig::default(), 1.0).unwrap();
        assert!(!est.is_ready());
        for _ in 0..5 {
            est.push_measurement(0.1);
            est.push_control(1.0);
        }
        assert!(!est.is_ready());
        est.push_measurement(0.1);
        assert!(est.is_ready());
        assert!(MheConfig {
            forgetting: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
