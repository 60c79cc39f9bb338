//! Simulated training data: step-excitation trajectories cut into windows.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Normalizer, N_SIGNALS};
use crate::config::KeyValues;
use crate::dae::{steady_state, step, IntegratorOptions};
use crate::error::{Error, Result};
use crate::model::{PlantParams, PlantState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    /// History length N.
    pub n_hist: usize,
    pub n_trajectories: usize,
    pub steps_per_trajectory: usize,
    /// Hold lengths (control periods) of the feed-flow levels.
    pub u_hold_min: usize,
    pub u_hold_max: usize,
    /// Hold lengths of the solvent-flow levels.
    pub q_hold_min: usize,
    pub q_hold_max: usize,
    /// Solvent flow range as fractions of q_nominal.
    pub q_lo: f64,
    pub q_hi: f64,
    /// Share of trajectories that begin from the uranium-free state.
    pub startup_fraction: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_hist: 2,
            n_trajectories: 60,
            steps_per_trajectory: 1800,
            u_hold_min: 1,
            u_hold_max: 24,
            q_hold_min: 1,
            q_hold_max: 24,
            q_lo: 0.8,
            q_hi: 1.2,
            startup_fraction: 0.3,
            train_fraction: 0.98,
            val_fraction: 0.01,
            seed: 3,
        }
    }
}

/// Largest supported N.
pub const MAX_HIST: usize = 20;

impl DatasetConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let c = DatasetConfig {
            n_hist: kv.or("dataset.n_hist", d.n_hist)?,
            n_trajectories: kv.or("dataset.n_trajectories", d.n_trajectories)?,
            steps_per_trajectory: kv.or("dataset.steps_per_trajectory", d.steps_per_trajectory)?,
            u_hold_min: kv.or("dataset.u_hold_min", d.u_hold_min)?,
            u_hold_max: kv.or("dataset.u_hold_max", d.u_hold_max)?,
            q_hold_min: kv.or("dataset.q_hold_min", d.q_hold_min)?,
            q_hold_max: kv.or("dataset.q_hold_max", d.q_hold_max)?,
            q_lo: kv.or("dataset.q_lo", d.q_lo)?,
            q_hi: kv.or("dataset.q_hi", d.q_hi)?,
            startup_fraction: kv.or("dataset.startup_fraction", d.startup_fraction)?,
            train_fraction: kv.or("dataset.train_fraction", d.train_fraction)?,
            val_fraction: kv.or("dataset.val_fraction", d.val_fraction)?,
            seed: kv.or("dataset.seed", d.seed)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_hist == 0 || self.n_hist > MAX_HIST {
            return Err(Error::Config(format!(
                "dataset.n_hist must lie in 1..={MAX_HIST}"
            )));
        }
        if self.steps_per_trajectory <= self.n_hist + 1 || self.n_trajectories == 0 {
            return Err(Error::Config(
                "dataset trajectories are too short or absent".into(),
            ));
        }
        if self.u_hold_min == 0 || self.u_hold_min > self.u_hold_max {
            return Err(Error::Config("dataset u hold range is invalid".into()));
        }
        if self.q_hold_min == 0 || self.q_hold_min > self.q_hold_max {
            return Err(Error::Config("dataset q hold range is invalid".into()));
        }
        if !(self.q_lo > 0.0 && self.q_lo <= self.q_hi) {
            return Err(Error::Config("dataset q range is invalid".into()));
        }
        if !(0.0..=1.0).contains(&self.startup_fraction) {
            return Err(Error::Config(
                "dataset.startup_fraction must lie in [0, 1]".into(),
            ));
        }
        if !(self.train_fraction > 0.0
            && self.val_fraction >= 0.0
            && self.train_fraction + self.val_fraction <= 1.0)
        {
            return Err(Error::Config("dataset split fractions are invalid".into()));
        }
        Ok(())
    }

    pub fn expected_samples(&self) -> usize {
        self.n_trajectories * (self.steps_per_trajectory - self.n_hist)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryStart {
    /// Uranium-free steady state of the first input pair.
    Startup,
    /// Steady state at the given (u, q).
    Steady { u: f64, q: f64 },
}

/// Inputs u(k), q(k) applied over period k, k = 0..len.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub start: TrajectoryStart,
    pub u: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationPlan {
    pub trajectories: Vec<Trajectory>,
}

impl ExcitationPlan {
    /// Random piecewise-constant steps covering [u_min, u_max] × [q_lo, q_hi]·q0.
    pub fn random(cfg: &DatasetConfig, params: &PlantParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (u_lo, u_hi) = (params.u_min, params.u_max);
        let q0 = params.q_nominal;
        let mut trajectories = Vec::with_capacity(cfg.n_trajectories);
        for _ in 0..cfg.n_trajectories {
            let len = cfg.steps_per_trajectory;
            let mut u = Vec::with_capacity(len);
            let mut level = rng.random_range(u_lo..=u_hi);
            while u.len() < len {
                let hold = rng.random_range(cfg.u_hold_min..=cfg.u_hold_max);
                u.extend(std::iter::repeat_n(level, hold.min(len - u.len())));
                level = if rng.random_bool(0.5) {
                    rng.random_range(u_lo..=u_hi)
                } else {
                    (level + rng.random_range(-0.5..=0.5)).clamp(u_lo, u_hi)
                };
            }
            let mut q = Vec::with_capacity(len);
            while q.len() < len {
                let hold = rng.random_range(cfg.q_hold_min..=cfg.q_hold_max);
                let level = if rng.random_bool(0.3) {
                    q0
                } else {
                    q0 * rng.random_range(cfg.q_lo..=cfg.q_hi)
                };
                q.extend(std::iter::repeat_n(level, hold.min(len - q.len())));
            }
            let start = if rng.random_bool(cfg.startup_fraction) {
                TrajectoryStart::Startup
            } else {
                TrajectoryStart::Steady {
                    u: rng.random_range(u_lo..=u_hi),
                    q: q[0],
                }
            };
            trajectories.push(Trajectory { start, u, q });
        }
        ExcitationPlan { trajectories }
    }
}

/// Windows θ(k) with next-step targets, stored in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_hist: usize,
    /// Row-major, 3(N+1) columns: y block, u block, q block.
    pub theta: Vec<f64>,
    pub y_next: Vec<f64>,
    pub zbar_next: Vec<bool>,
    pub split: Vec<Split>,
}

#[inline]
pub(crate) fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// The uranium-free steady state used as start-up initial condition.
pub fn startup_state(
    u: f64,
    q: f64,
    params: &PlantParams,
    opts: &IntegratorOptions,
) -> Result<PlantState> {
    let mut p = params.clone();
    p.feed_uranium = 0.0;
    let mut s = steady_state(u, q, None, &p, opts)?;
    // Round-off can leave ~1e-30 of uranium behind.
    for b in [
        crate::model::Block::UAqMixer,
        crate::model::Block::UOrgMixer,
        crate::model::Block::UAqSettler,
        crate::model::Block::UOrgSettler,
    ] {
        for n in 0..crate::model::N_STAGES {
            s.x[b.at(n)] = 0.0;
        }
    }
    for n in 0..crate::model::N_STAGES {
        s.x_alg[n] = 0.0;
    }
    Ok(s)
}

fn simulate(
    traj: &Trajectory,
    params: &PlantParams,
    opts: &IntegratorOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut state = match traj.start {
        TrajectoryStart::Startup => startup_state(traj.u[0], traj.q[0], params, opts)?,
        TrajectoryStart::Steady { u, q } => steady_state(u, q, None, params, opts)?,
    };
    let mut y = Vec::with_capacity(traj.u.len() + 1);
    let mut z = Vec::with_capacity(traj.u.len() + 1);
    y.push(state.y());
    z.push(state.z());
    for k in 0..traj.u.len() {
        state = step(
            &state,
            traj.u[k],
            traj.q[k],
            params.sampling_time,
            opts,
            params,
        )?;
        y.push(state.y());
        z.push(state.z());
    }
    Ok((y, z))
}

/// Simulates every trajectory of `plan` and extracts windows of N+1 points.
///
/// Stored floats are rounded to six decimals; z̄ = 1 iff z ≤ z_tol.
/// Failed trajectories are skipped with a warning.
pub fn generate_dataset(
    params: &PlantParams,
    opts: &IntegratorOptions,
    plan: &ExcitationPlan,
    cfg: &DatasetConfig,
) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n_hist;
    let w = n + 1;
    let mut ds = Dataset {
        n_hist: n,
        theta: Vec::new(),
        y_next: Vec::new(),
        zbar_next: Vec::new(),
        split: Vec::new(),
    };
    for (ti, traj) in plan.trajectories.iter().enumerate() {
        if traj.u.len() != traj.q.len() || traj.u.len() < w {
            return Err(Error::Dataset(format!(
                "trajectory {ti} has inconsistent length"
            )));
        }
        let (y, z) = match simulate(traj, params, opts) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping trajectory {ti}: {e}");
                continue;
            }
        };
        for k in n..traj.u.len() {
            for i in k - n..=k {
                ds.theta.push(round6(y[i]));
            }
            for i in k - n..=k {
                ds.theta.push(round6(traj.u[i]));
            }
            for i in k - n..=k {
                ds.theta.push(round6(traj.q[i]));
            }
            ds.y_next.push(round6(y[k + 1]));
            ds.zbar_next.push(z[k + 1] <= params.z_tol);
        }
        log::debug!("trajectory {ti}: {} samples so far", ds.y_next.len());
    }
    if ds.y_next.is_empty() {
        return Err(Error::Dataset("no trajectory could be simulated".into()));
    }
    ds.assign_split(cfg.train_fraction, cfg.val_fraction, cfg.seed);
    Ok(ds)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y_next.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_next.is_empty()
    }

    pub fn theta_dim(&self) -> usize {
        N_SIGNALS * (self.n_hist + 1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.theta_dim();
        &self.theta[i * d..(i + 1) * d]
    }

    /// Random split with the given fractions (test takes the remainder).
    pub fn assign_split(&mut self, train: f64, val: f64, seed: u64) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let n_train = ((train * n as f64).round() as usize).min(n);
        let n_val = ((val * n as f64).round() as usize).min(n - n_train);
        self.split = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            self.split[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|i| self.split[*i] == split)
            .collect()
    }

    pub fn labels(&self, split: Split) -> Vec<bool> {
        self.indices(split)
            .into_iter()
            .map(|i| self.zbar_next[i])
            .collect()
    }

    /// Min–max statistics of the training split.
    pub fn fit_normalizer(&self) -> Result<Normalizer> {
        let idx = self.indices(Split::Train);
        if idx.is_empty() {
            return Err(Error::Dataset("empty training split".into()));
        }
        Normalizer::fit(
            idx.iter().map(|&i| (self.row(i), self.y_next[i])),
            self.n_hist + 1,
        )
    }

    /// Normalised θ rows (row-major) and targets of one split.
    pub fn normalized(&self, split: Split, norm: &Normalizer) -> (Vec<f64>, Vec<f64>) {
        let idx = self.indices(split);
        let d = self.theta_dim();
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut y = Vec::with_capacity(idx.len());
        for i in idx {
            let start = x.len();
            x.extend_from_slice(self.row(i));
            norm.normalize_flat(&mut x[start..]);
            y.push(norm.normalize(super::Signal::Y, self.y_next[i]));
        }
        (x, y)
    }

    fn header(n_hist: usize) -> Vec<String> {
        let mut h = Vec::new();
        for sig in ["y", "u", "q"] {
            for lag in (0..=n_hist).rev() {
                h.push(if lag == 0 {
                    format!("{sig}[k]")
                } else {
                    format!("{sig}[k-{lag}]")
                });
            }
        }
        h.extend(["y[k+1]", "zbar[k+1]", "split"].map(String::from));
        h
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::header(self.n_hist))?;
        let mut rec: Vec<String> = Vec::with_capacity(self.theta_dim() + 3);
        for i in 0..self.len() {
            rec.clear();
            rec.extend(self.row(i).iter().map(|v| format!("{v:.6}")));
            rec.push(format!("{:.6}", self.y_next[i]));
            rec.push(if self.zbar_next[i] { "1" } else { "0" }.into());
            rec.push(self.split[i].as_str().into());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let cols = r.headers()?.len();
        if cols < 3 + 2 * N_SIGNALS || (cols - 3) % N_SIGNALS != 0 {
            return Err(Error::Dataset(format!("unexpected column count {cols}")));
        }
        let n_hist = (cols - 3) / N_SIGNALS - 1;
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if header != Self::header(n_hist) {
            return Err(Error::Dataset(
                "dataset header does not match the expected layout".into(),
            ));
        }
        let dim = cols - 3;
        let mut ds = Dataset {
            n_hist,
            theta: Vec::new(),
            y_next: Vec::new(),
            zbar_next: Vec::new(),
            split: Vec::new(),
        };
        let num = |s: &str, line: u64| {
            s.parse::<f64>()
                .map_err(|_| Error::Dataset(format!("line {line}: bad number `{s}`")))
        };
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            for j in 0..dim {
                ds.theta.push(num(&rec[j], line)?);
            }
            ds.y_next.push(num(&rec[dim], line)?);
            ds.zbar_next.push(match &rec[dim + 1] {
                "1" => true,
                "0" => false,
                other => return Err(Error::Dataset(format!("line {line}: bad label `{other}`"))),
            });
            ds.split.push(Split::parse(&rec[dim + 2])?);
        }
        Ok(ds)
    }
}
