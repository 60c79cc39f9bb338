//! Feed-forward binary classifier for the raffinate constraint indicator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{Dataset, Split};
use super::optim::Optimizer;
use super::{Normalizer, TrainConfig};
use crate::error::{Error, Result};

/// tanh hidden layers, sigmoid output. Parameters flat, layer by layer:
/// W (out × in, row-major) then b (out).
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryClassifier {
    /// Layer widths including input and the single output.
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

const MAX_WIDTH: usize = 256;

impl BinaryClassifier {
    pub fn n_params_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    pub fn new(input: usize, hidden: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(hidden, layers));
        sizes.push(1);
        let mut params = Vec::with_capacity(Self::n_params_for(&sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[1] * w[0] + w[1] {
                params.push(rng.random_range(-bound..bound));
            }
        }
        BinaryClassifier { sizes, params }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || *self.sizes.last().unwrap() != 1 {
            return Err(Error::Weights(
                "classifier must end in a single output".into(),
            ));
        }
        if self.sizes.iter().any(|s| *s == 0 || *s > MAX_WIDTH) {
            return Err(Error::Weights(format!(
                "classifier widths out of range: {:?}",
                self.sizes
            )));
        }
        let want = Self::n_params_for(&self.sizes);
        if self.params.len() != want {
            return Err(Error::Dimension {
                expected: want,
                got: self.params.len(),
            });
        }
        Ok(())
    }

    /// Pre-sigmoid output.
    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut a = [0.0; MAX_WIDTH];
        let mut b = [0.0; MAX_WIDTH];
        a[..x.len()].copy_from_slice(x);
        let mut off = 0;
        let n_layers = self.sizes.len() - 1;
        for (li, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let wm = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            for r in 0..n_out {
                let row = &wm[r * n_in..(r + 1) * n_in];
                let mut acc = bias[r];
                for k in 0..n_in {
                    acc += row[k] * a[k];
                }
                b[r] = if li + 1 < n_layers { acc.tanh() } else { acc };
            }
            std::mem::swap(&mut a, &mut b);
            off += n_in * n_out + n_out;
        }
        a[0]
    }

    /// P(z̄ = 1 | θ), in (0, 1).
    pub fn probability(&self, x: &[f64]) -> f64 {
        1.0 / (1.0 + (-self.logit(x)).exp())
    }

    /// Mean binary cross-entropy and its gradient.
    pub fn loss_and_grad(&self, xs: &[&[f64]], labels: &[bool]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let n_layers = self.sizes.len() - 1;
        let n = labels.len() as f64;
        let mut loss = 0.0;
        let mut acts: Vec<Vec<f64>> = self.sizes.iter().map(|s| vec![0.0; *s]).collect();
        let offsets: Vec<usize> = self
            .sizes
            .windows(2)
            .scan(0, |o, w| {
                let cur = *o;
                *o += w[0] * w[1] + w[1];
                Some(cur)
            })
            .collect();
        let mut delta = vec![0.0; MAX_WIDTH];
        let mut delta_prev = vec![0.0; MAX_WIDTH];
        for (x, label) in xs.iter().zip(labels) {
            acts[0].copy_from_slice(x);
            for li in 0..n_layers {
                let (n_in, n_out) = (self.sizes[li], self.sizes[li + 1]);
                let off = offsets[li];
                for r in 0..n_out {
                    let mut acc = self.params[off + n_in * n_out + r];
                    for k in 0..n_in {
                        acc += self.params[off + r * n_in + k] * acts[li][k];
                    }
                    acts[li + 1][r] = if li + 1 < n_layers { acc.tanh() } else { acc };
                }
            }
            let logit = acts[n_layers][0];
            let t = if *label { 1.0 } else { 0.0 };
            // Stable BCE with logits.
            loss += logit.max(0.0) - logit * t + (-logit.abs()).exp().ln_1p();
            let p = 1.0 / (1.0 + (-logit).exp());
            delta[0] = (p - t) / n;
            for li in (0..n_layers).rev() {
                let (n_in, n_out) = (self.sizes[li], self.sizes[li + 1]);
                let off = offsets[li];
                for k in 0..n_in {
                    delta_prev[k] = 0.0;
                }
                for r in 0..n_out {
                    let d = delta[r];
                    grad[off + n_in * n_out + r] += d;
                    for k in 0..n_in {
                        grad[off + r * n_in + k] += d * acts[li][k];
                        delta_prev[k] += d * self.params[off + r * n_in + k];
                    }
                }
                if li > 0 {
                    for k in 0..n_in {
                        let a = acts[li][k];
                        delta_prev[k] *= 1.0 - a * a;
                    }
                }
                std::mem::swap(&mut delta, &mut delta_prev);
            }
        }
        (loss / n, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    pub epoch_loss: Vec<f64>,
    pub val_accuracy: f64,
    /// Fraction of z̄ = 1 labels in the training split.
    pub positive_fraction: f64,
}

/// Cross-entropy training of the z̄ classifier on normalised θ.
pub fn train_classifier(
    ds: &Dataset,
    norm: &Normalizer,
    cfg: &TrainConfig,
) -> Result<(BinaryClassifier, ClassifierReport)> {
    cfg.validate()?;
    let dim = ds.theta_dim();
    let (x, _) = ds.normalized(Split::Train, norm);
    let labels = ds.labels(Split::Train);
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Training(
            "classifier data contains a single class; widen the excitation towards the raffinate constraint"
                .into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut clf =
        BinaryClassifier::new(dim, cfg.classifier_hidden, cfg.classifier_layers, &mut rng);
    let mut opt = Optimizer::new(
        cfg.optimizer,
        clf.params.len(),
        cfg.learning_rate,
        cfg.clip_norm,
    );
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.classifier_epochs);
    let mut bx: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);
    let mut bl = Vec::with_capacity(cfg.batch_size);
    let mut initial = None;
    for epoch in 0..cfg.classifier_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            bx.clear();
            bl.clear();
            for &i in chunk {
                bx.push(&x[i * dim..(i + 1) * dim]);
                bl.push(labels[i]);
            }
            let (loss, mut grad) = clf.loss_and_grad(&bx, &bl);
            initial.get_or_insert(loss);
            total += loss * chunk.len() as f64;
            opt.step(&mut clf.params, &mut grad);
        }
        let mean_loss = total / labels.len() as f64;
        log::info!("classifier epoch {:>3}: loss {mean_loss:.4e}", epoch + 1);
        if !mean_loss.is_finite() || mean_loss > 10.0 * initial.unwrap_or(1.0) {
            return Err(Error::Training(format!(
                "classifier diverged at epoch {}: loss {mean_loss:.3e}",
                epoch + 1
            )));
        }
        epoch_loss.push(mean_loss);
    }
    let val_accuracy = accuracy(&clf, ds, Split::Validation, norm);
    Ok((
        clf,
        ClassifierReport {
            epoch_loss,
            val_accuracy,
            positive_fraction: positives as f64 / labels.len() as f64,
        },
    ))
}

/// Fraction of correctly thresholded labels in a split.
pub fn accuracy(clf: &BinaryClassifier, ds: &Dataset, split: Split, norm: &Normalizer) -> f64 {
    let dim = ds.theta_dim();
    let (x, _) = ds.normalized(split, norm);
    let labels = ds.labels(split);
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, l)| (clf.probability(&x[i * dim..(i + 1) * dim]) >= 0.5) == **l)
        .count();
    hits as f64 / labels.len() as f64
}
