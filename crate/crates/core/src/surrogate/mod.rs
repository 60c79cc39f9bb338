//! History-based one-step-ahead surrogate of the cascade.
//!
//! ŷ(k+1) = A·θ(k) + b + r(θ(k)) where r is a stacked LSTM fitted to the
//! residual of the linear map, and z̄(k+1) is predicted by a feed-forward
//! classifier. θ(k) holds the last N+1 values of y, u and q.

mod classifier;
mod dataset;
mod linear;
mod lstm;
mod optim;
mod weights;

pub use classifier::{
    accuracy as classifier_accuracy, train_classifier, BinaryClassifier, ClassifierReport,
};
pub use dataset::{
    generate_dataset, startup_state, Dataset, DatasetConfig, ExcitationPlan, Split, Trajectory,
    TrajectoryStart,
};
pub use linear::{train_linear, LinearModel};
pub use lstm::{train_residual_net, RecurrentResidualNet, ResidualReport};
pub use optim::{Optimizer, OptimizerKind};
pub use weights::{load_weights, save_weights, WEIGHTS_VERSION};

use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Number of measured/known signals per time step (y, u, q).
pub const N_SIGNALS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Y = 0,
    U = 1,
    Q = 2,
}

/// Rolling histories y(k−N..k), u(k−N..k), q(k−N..k), oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub q: Vec<f64>,
}

impl ThetaVector {
    pub fn new(y: Vec<f64>, u: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if y.len() < 2 {
            return Err(Error::Dimension {
                expected: 2,
                got: y.len(),
            });
        }
        for other in [&u, &q] {
            if other.len() != y.len() {
                return Err(Error::Dimension {
                    expected: y.len(),
                    got: other.len(),
                });
            }
        }
        Ok(ThetaVector { y, u, q })
    }

    /// A window where every signal has been constant.
    pub fn constant(window: usize, y: f64, u: f64, q: f64) -> Self {
        ThetaVector {
            y: vec![y; window],
            u: vec![u; window],
            q: vec![q; window],
        }
    }

    /// N + 1.
    pub fn window(&self) -> usize {
        self.y.len()
    }

    /// y block, then u block, then q block.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.window());
        v.extend_from_slice(&self.y);
        v.extend_from_slice(&self.u);
        v.extend_from_slice(&self.q);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % N_SIGNALS != 0 {
            return Err(Error::Dimension {
                expected: N_SIGNALS * (flat.len() / N_SIGNALS + 1),
                got: flat.len(),
            });
        }
        let w = flat.len() / N_SIGNALS;
        Self::new(
            flat[..w].to_vec(),
            flat[w..2 * w].to_vec(),
            flat[2 * w..].to_vec(),
        )
    }

    /// Drops the oldest entry of each signal and appends the newest.
    pub fn shift(&mut self, y: f64, u: f64, q: f64) {
        for (buf, v) in [(&mut self.y, y), (&mut self.u, u), (&mut self.q, q)] {
            buf.rotate_left(1);
            *buf.last_mut().unwrap() = v;
        }
    }
}

/// Per-signal min–max scaling to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub lo: [f64; N_SIGNALS],
    pub hi: [f64; N_SIGNALS],
}

impl Normalizer {
    pub fn new(lo: [f64; N_SIGNALS], hi: [f64; N_SIGNALS]) -> Result<Self> {
        for s in 0..N_SIGNALS {
            if !(lo[s].is_finite() && hi[s].is_finite() && hi[s] > lo[s]) {
                return Err(Error::Dataset(format!(
                    "degenerate normalisation range [{}, {}] for signal {s}",
                    lo[s], hi[s]
                )));
            }
        }
        Ok(Normalizer { lo, hi })
    }

    /// Fits ranges over flat θ rows (and the targets, which share y's scale).
    pub fn fit<'a>(rows: impl Iterator<Item = (&'a [f64], f64)>, window: usize) -> Result<Self> {
        let mut lo = [f64::INFINITY; N_SIGNALS];
        let mut hi = [f64::NEG_INFINITY; N_SIGNALS];
        for (theta, target) in rows {
            for s in 0..N_SIGNALS {
                for v in &theta[s * window..(s + 1) * window] {
                    lo[s] = lo[s].min(*v);
                    hi[s] = hi[s].max(*v);
                }
            }
            lo[0] = lo[0].min(target);
            hi[0] = hi[0].max(target);
        }
        for s in 0..N_SIGNALS {
            if hi[s] == lo[s] && hi[s].is_finite() {
                // A constant signal still needs an invertible map.
                hi[s] = lo[s] + 1.0;
            }
        }
        Self::new(lo, hi)
    }

    #[inline]
    pub fn normalize(&self, signal: Signal, v: f64) -> f64 {
        let s = signal as usize;
        (v - self.lo[s]) / (self.hi[s] - self.lo[s])
    }

    #[inline]
    pub fn denormalize(&self, signal: Signal, v: f64) -> f64 {
        let s = signal as usize;
        self.lo[s] + v * (self.hi[s] - self.lo[s])
    }

    /// Normalises a flat θ in place.
    pub fn normalize_flat(&self, flat: &mut [f64]) {
        let w = flat.len() / N_SIGNALS;
        for (s, sig) in [Signal::Y, Signal::U, Signal::Q].into_iter().enumerate() {
            for v in &mut flat[s * w..(s + 1) * w] {
                *v = self.normalize(sig, *v);
            }
        }
    }
}

/// Reorders a normalised flat θ (y block, u block, q block) into a
/// time-major sequence of (y, u, q) triples.
#[inline]
pub(crate) fn to_sequence(flat: &[f64], seq: &mut [f64]) {
    let w = flat.len() / N_SIGNALS;
    for t in 0..w {
        for s in 0..N_SIGNALS {
            seq[t * N_SIGNALS + s] = flat[s * w + t];
        }
    }
}

/// The trained predictor pair plus the scaling it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    /// History length N; windows hold N + 1 points.
    pub n_hist: usize,
    pub norm: Normalizer,
    pub linear: LinearModel,
    pub net: RecurrentResidualNet,
    pub classifier: BinaryClassifier,
}

impl SurrogateModel {
    pub fn window(&self) -> usize {
        self.n_hist + 1
    }

    pub fn theta_dim(&self) -> usize {
        N_SIGNALS * self.window()
    }

    fn check(&self, theta: &ThetaVector) -> Result<Vec<f64>> {
        if theta.window() != self.window() {
            return Err(Error::Dimension {
                expected: self.window(),
                got: theta.window(),
            });
        }
        let flat = theta.to_flat();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite entry in θ".into()));
        }
        Ok(flat)
    }

    /// Linear and residual parts of the normalised prediction.
    pub fn components_normalized(&self, theta: &ThetaVector) -> Result<(f64, f64)> {
        let mut flat = self.check(theta)?;
        self.norm.normalize_flat(&mut flat);
        Ok(self.components_raw(&flat))
    }

    #[inline]
    pub(crate) fn components_raw(&self, flat_normalized: &[f64]) -> (f64, f64) {
        let lin = self.linear.predict(flat_normalized);
        let mut seq = [0.0; 64];
        let seq = &mut seq[..flat_normalized.len()];
        to_sequence(flat_normalized, seq);
        (lin, self.net.forward(seq))
    }

    /// ŷ(k+1) from θ(k).
    pub fn predict_y(&self, theta: &ThetaVector) -> Result<f64> {
        let (lin, res) = self.components_normalized(theta)?;
        Ok(self.norm.denormalize(Signal::Y, lin + res))
    }

    /// Probability that z(k+1) stays within tolerance.
    pub fn zbar_probability(&self, theta: &ThetaVector) -> Result<f64> {
        let mut flat = self.check(theta)?;
        self.norm.normalize_flat(&mut flat);
        Ok(self.classifier.probability(&flat))
    }

    /// z̄(k+1) ∈ {0, 1} thresholded at 0.5.
    pub fn predict_zbar(&self, theta: &ThetaVector) -> Result<bool> {
        Ok(self.zbar_probability(theta)? >= 0.5)
    }

    /// Both predictions from an already-validated flat θ in physical units.
    #[inline]
    pub(crate) fn predict_flat(&self, flat: &[f64], want_zbar: bool) -> (f64, bool) {
        let mut buf = [0.0; 64];
        let n = &mut buf[..flat.len()];
        n.copy_from_slice(flat);
        self.norm.normalize_flat(n);
        let (lin, res) = self.components_raw(n);
        let y = self.norm.denormalize(Signal::Y, lin + res);
        let z = !want_zbar || self.classifier.probability(n) >= 0.5;
        (y, z)
    }

    /// Recursive multi-step prediction: feeds each ŷ back into the window.
    ///
    /// `u` and `q` are the inputs applied from step k onward; returns ŷ and
    /// z̄ for k+1..=k+len.
    pub fn rollout(&self, theta: &ThetaVector, u: &[f64], q: &[f64]) -> Result<Vec<(f64, bool)>> {
        if u.len() != q.len() {
            return Err(Error::Dimension {
                expected: u.len(),
                got: q.len(),
            });
        }
        let mut th = theta.clone();
        self.check(&th)?;
        let mut out = Vec::with_capacity(u.len());
        for j in 0..u.len() {
            *th.u.last_mut().unwrap() = u[j];
            *th.q.last_mut().unwrap() = q[j];
            let (y, z) = self.predict_flat(&th.to_flat(), true);
            out.push((y, z));
            if j + 1 < u.len() {
                th.shift(y, u[j], q[j]);
            }
        }
        Ok(out)
    }
}

/// Dataset generation and training hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lstm_epochs: usize,
    pub classifier_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub classifier_hidden: usize,
    pub classifier_layers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lstm_epochs: 60,
            classifier_epochs: 40,
            learning_rate: 5e-3,
            batch_size: 256,
            optimizer: OptimizerKind::Adam,
            clip_norm: 1.0,
            lstm_hidden: 10,
            lstm_layers: 2,
            classifier_hidden: 50,
            classifier_layers: 2,
            seed: 11,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let optimizer = match kv.get::<String>("train.optimizer")?.as_deref() {
            None => d.optimizer,
            Some("adam") => OptimizerKind::Adam,
            Some("sgd") => OptimizerKind::Sgd,
            Some(other) => {
                return Err(Error::Config(format!(
                    "train.optimizer must be adam or sgd, got `{other}`"
                )))
            }
        };
        let c = TrainConfig {
            lstm_epochs: kv.or("train.lstm_epochs", d.lstm_epochs)?,
            classifier_epochs: kv.or("train.classifier_epochs", d.classifier_epochs)?,
            learning_rate: kv.or("train.learning_rate", d.learning_rate)?,
            batch_size: kv.or("train.batch_size", d.batch_size)?,
            optimizer,
            clip_norm: kv.or("train.clip_norm", d.clip_norm)?,
            lstm_hidden: kv.or("train.lstm_hidden", d.lstm_hidden)?,
            lstm_layers: kv.or("train.lstm_layers", d.lstm_layers)?,
            classifier_hidden: kv.or("train.classifier_hidden", d.classifier_hidden)?,
            classifier_layers: kv.or("train.classifier_layers", d.classifier_layers)?,
            seed: kv.or("train.seed", d.seed)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(Error::Config(
                "batch size and LSTM shape must be positive".into(),
            ));
        }
        if self.classifier_hidden == 0 || self.classifier_layers == 0 {
            return Err(Error::Config("classifier shape must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config(
                "learning rate and clip norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Linear model in physical units, zero residual net, z̄ always 1.
#[cfg(test)]
pub(crate) fn toy_model(n_hist: usize, weights: Vec<f64>, bias: f64) -> SurrogateModel {
    let dim = N_SIGNALS * (n_hist + 1);
    assert_eq!(weights.len(), dim);
    let mut classifier = BinaryClassifier {
        sizes: vec![dim, 1],
        params: vec![0.0; dim + 1],
    };
    classifier.params[dim] = 5.0;
    SurrogateModel {
        n_hist,
        norm: Normalizer::new([0.0; 3], [1.0; 3]).unwrap(),
        linear: LinearModel { weights, bias },
        net: RecurrentResidualNet {
            input: N_SIGNALS,
            hidden: 2,
            layers: 1,
            output_scale: 1.0,
            params: vec![0.0; RecurrentResidualNet::n_params_for(N_SIGNALS, 2, 1)],
        },
        classifier,
    }
}
