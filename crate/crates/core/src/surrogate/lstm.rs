//! Stacked LSTM with a scalar linear head, trained by backpropagation
//! through time on the residual of the linear model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{Dataset, Split};
use super::optim::Optimizer;
use super::{to_sequence, LinearModel, Normalizer, TrainConfig, N_SIGNALS};
use crate::error::{Error, Result};

/// Parameters are stored flat: for each layer the gate matrix
/// W (4H × (in+H), row-major, gate order i f g o) then the bias (4H);
/// finally the head weights (H) and head bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentResidualNet {
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Fixed multiplier on the head output.
    pub output_scale: f64,
    pub params: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations kept from a forward pass for the backward pass.
struct Trace {
    steps: usize,
    /// Per layer: [x_t; h_{t-1}] for every t.
    xcat: Vec<Vec<f64>>,
    /// Per layer: activated gates (i, f, g, o) for every t.
    gates: Vec<Vec<f64>>,
    /// Per layer: c_0 = 0, c_1, ..., c_T.
    cell: Vec<Vec<f64>>,
    /// Per layer: tanh(c_t).
    tanh_c: Vec<Vec<f64>>,
    /// Top-layer h_T.
    h_last: Vec<f64>,
    output: f64,
}

impl RecurrentResidualNet {
    pub fn n_params_for(input: usize, hidden: usize, layers: usize) -> usize {
        (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { hidden };
                4 * hidden * (inp + hidden) + 4 * hidden
            })
            .sum::<usize>()
            + hidden
            + 1
    }

    /// Uniform ±1/√fan-in initialisation.
    pub fn new(input: usize, hidden: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::with_capacity(Self::n_params_for(input, hidden, layers));
        for l in 0..layers {
            let inp = if l == 0 { input } else { hidden };
            let bound = 1.0 / ((inp + hidden) as f64).sqrt();
            for _ in 0..4 * hidden * (inp + hidden) + 4 * hidden {
                params.push(rng.random_range(-bound..bound));
            }
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        for _ in 0..=hidden {
            params.push(rng.random_range(-bound..bound));
        }
        RecurrentResidualNet {
            input,
            hidden,
            layers,
            output_scale: 1.0,
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = Self::n_params_for(self.input, self.hidden, self.layers);
        if self.params.len() != want {
            return Err(Error::Dimension {
                expected: want,
                got: self.params.len(),
            });
        }
        Ok(())
    }

    fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input
        } else {
            self.hidden
        }
    }

    fn layer_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|k| 4 * self.hidden * (self.layer_in(k) + self.hidden) + 4 * self.hidden)
            .sum()
    }

    fn head_offset(&self) -> usize {
        self.layer_offset(self.layers)
    }

    /// Output for a time-major sequence of `input`-sized frames.
    pub fn forward(&self, seq: &[f64]) -> f64 {
        self.run(seq, None)
    }

    fn run(&self, seq: &[f64], mut trace: Option<&mut Trace>) -> f64 {
        let h_n = self.hidden;
        let steps = seq.len() / self.input;
        let mut below: Vec<f64> = seq.to_vec();
        let mut h = vec![0.0; h_n];
        let mut c = vec![0.0; h_n];
        let mut z = vec![0.0; 4 * h_n];
        for l in 0..self.layers {
            let inp = self.layer_in(l);
            let cols = inp + h_n;
            let w = &self.params[self.layer_offset(l)..];
            let b = &w[4 * h_n * cols..];
            h.iter_mut().for_each(|v| *v = 0.0);
            c.iter_mut().for_each(|v| *v = 0.0);
            let mut out = vec![0.0; steps * h_n];
            if let Some(tr) = trace.as_deref_mut() {
                tr.cell[l][..h_n].iter_mut().for_each(|v| *v = 0.0);
            }
            for t in 0..steps {
                let x = &below[t * inp..(t + 1) * inp];
                for r in 0..4 * h_n {
                    let row = &w[r * cols..(r + 1) * cols];
                    let mut acc = b[r];
                    for k in 0..inp {
                        acc += row[k] * x[k];
                    }
                    for k in 0..h_n {
                        acc += row[inp + k] * h[k];
                    }
                    z[r] = acc;
                }
                if let Some(tr) = trace.as_deref_mut() {
                    let xc = &mut tr.xcat[l][t * cols..(t + 1) * cols];
                    xc[..inp].copy_from_slice(x);
                    xc[inp..].copy_from_slice(&h);
                }
                for k in 0..h_n {
                    let i = sigmoid(z[k]);
                    let f = sigmoid(z[h_n + k]);
                    let g = z[2 * h_n + k].tanh();
                    let o = sigmoid(z[3 * h_n + k]);
                    c[k] = f * c[k] + i * g;
                    let tc = c[k].tanh();
                    h[k] = o * tc;
                    if let Some(tr) = trace.as_deref_mut() {
                        let gt = &mut tr.gates[l][t * 4 * h_n..(t + 1) * 4 * h_n];
                        gt[k] = i;
                        gt[h_n + k] = f;
                        gt[2 * h_n + k] = g;
                        gt[3 * h_n + k] = o;
                        tr.cell[l][(t + 1) * h_n + k] = c[k];
                        tr.tanh_c[l][t * h_n + k] = tc;
                    }
                }
                out[t * h_n..(t + 1) * h_n].copy_from_slice(&h);
            }
            below = out;
        }
        let head = &self.params[self.head_offset()..];
        let mut y = head[h_n];
        for k in 0..h_n {
            y += head[k] * h[k];
        }
        let y = self.output_scale * y;
        if let Some(tr) = trace {
            tr.h_last.copy_from_slice(&h);
            tr.output = y;
            tr.steps = steps;
        }
        y
    }

    fn new_trace(&self, steps: usize) -> Trace {
        let h_n = self.hidden;
        Trace {
            steps,
            xcat: (0..self.layers)
                .map(|l| vec![0.0; steps * (self.layer_in(l) + h_n)])
                .collect(),
            gates: (0..self.layers)
                .map(|_| vec![0.0; steps * 4 * h_n])
                .collect(),
            cell: (0..self.layers)
                .map(|_| vec![0.0; (steps + 1) * h_n])
                .collect(),
            tanh_c: (0..self.layers).map(|_| vec![0.0; steps * h_n]).collect(),
            h_last: vec![0.0; h_n],
            output: 0.0,
        }
    }

    /// Accumulates dL/dθ into `grad` given dL/d(output).
    fn backward(&self, tr: &Trace, d_out: f64, grad: &mut [f64]) {
        let h_n = self.hidden;
        let steps = tr.steps;
        let ho = self.head_offset();
        let head = &self.params[ho..];
        let g_scaled = d_out * self.output_scale;
        for k in 0..h_n {
            grad[ho + k] += g_scaled * tr.h_last[k];
        }
        grad[ho + h_n] += g_scaled;

        // dL/dh of the current layer's outputs, per time step.
        let mut dh_above = vec![0.0; steps * h_n];
        for k in 0..h_n {
            dh_above[(steps - 1) * h_n + k] = g_scaled * head[k];
        }
        let mut dz = vec![0.0; 4 * h_n];
        for l in (0..self.layers).rev() {
            let inp = self.layer_in(l);
            let cols = inp + h_n;
            let off = self.layer_offset(l);
            let w = &self.params[off..off + 4 * h_n * cols];
            let mut dx_below = vec![0.0; steps * inp];
            let mut dh_next = vec![0.0; h_n];
            let mut dc_next = vec![0.0; h_n];
            for t in (0..steps).rev() {
                let gt = &tr.gates[l][t * 4 * h_n..(t + 1) * 4 * h_n];
                for k in 0..h_n {
                    let (i, f, g, o) = (gt[k], gt[h_n + k], gt[2 * h_n + k], gt[3 * h_n + k]);
                    let tc = tr.tanh_c[l][t * h_n + k];
                    let c_prev = tr.cell[l][t * h_n + k];
                    let dh = dh_above[t * h_n + k] + dh_next[k];
                    let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                    dz[k] = dc * g * i * (1.0 - i);
                    dz[h_n + k] = dc * c_prev * f * (1.0 - f);
                    dz[2 * h_n + k] = dc * i * (1.0 - g * g);
                    dz[3 * h_n + k] = dh * tc * o * (1.0 - o);
                    dc_next[k] = dc * f;
                }
                let xc = &tr.xcat[l][t * cols..(t + 1) * cols];
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                for r in 0..4 * h_n {
                    let d = dz[r];
                    if d == 0.0 {
                        continue;
                    }
                    let gw = &mut grad[off + r * cols..off + (r + 1) * cols];
                    let row = &w[r * cols..(r + 1) * cols];
                    for k in 0..cols {
                        gw[k] += d * xc[k];
                    }
                    for k in 0..inp {
                        dx_below[t * inp + k] += d * row[k];
                    }
                    for k in 0..h_n {
                        dh_next[k] += d * row[inp + k];
                    }
                    grad[off + 4 * h_n * cols + r] += d;
                }
            }
            dh_above = dx_below;
        }
    }

    /// Mean squared error over a batch and its gradient.
    pub fn loss_and_grad(&self, seqs: &[&[f64]], targets: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let n = targets.len() as f64;
        let steps = seqs.first().map(|s| s.len() / self.input).unwrap_or(0);
        let mut tr = self.new_trace(steps);
        for (seq, target) in seqs.iter().zip(targets) {
            if seq.len() / self.input != tr.steps {
                tr = self.new_trace(seq.len() / self.input);
            }
            let y = self.run(seq, Some(&mut tr));
            let e = y - target;
            loss += e * e;
            self.backward(&tr, 2.0 * e / n, &mut grad);
        }
        (loss / n, grad)
    }
}

/// Training summary of the residual network.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// Mean training loss per epoch (normalised units).
    pub epoch_loss: Vec<f64>,
    /// Validation MAE of the linear model alone (normalised y).
    pub val_mae_linear: f64,
    /// Validation MAE of linear + residual network (normalised y).
    pub val_mae: f64,
}

/// Normalised sequences and linear residuals for one split.
pub(crate) fn residual_targets(
    ds: &Dataset,
    split: Split,
    norm: &Normalizer,
    linear: &LinearModel,
) -> (Vec<f64>, Vec<f64>) {
    let (x, y) = ds.normalized(split, norm);
    let dim = ds.theta_dim();
    let mut seqs = vec![0.0; x.len()];
    let mut res = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let row = &x[i * dim..(i + 1) * dim];
        to_sequence(row, &mut seqs[i * dim..(i + 1) * dim]);
        res.push(y[i] - linear.predict(row));
    }
    (seqs, res)
}

/// Fits the residual network by mini-batch BPTT.
pub fn train_residual_net(
    ds: &Dataset,
    norm: &Normalizer,
    linear: &LinearModel,
    cfg: &TrainConfig,
) -> Result<(RecurrentResidualNet, ResidualReport)> {
    cfg.validate()?;
    let dim = ds.theta_dim();
    let (seqs, res) = residual_targets(ds, Split::Train, norm, linear);
    if res.is_empty() {
        return Err(Error::Training("empty training split".into()));
    }
    let mean = res.iter().sum::<f64>() / res.len() as f64;
    let std = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / res.len() as f64).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = RecurrentResidualNet::new(N_SIGNALS, cfg.lstm_hidden, cfg.lstm_layers, &mut rng);
    net.output_scale = std.max(1e-4);
    let mut opt = Optimizer::new(
        cfg.optimizer,
        net.params.len(),
        cfg.learning_rate,
        cfg.clip_norm,
    );

    let mut order: Vec<usize> = (0..res.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.lstm_epochs);
    let initial = res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64;
    let mut batch_seqs: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);
    let mut batch_t = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.lstm_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch_seqs.clear();
            batch_t.clear();
            for &i in chunk {
                batch_seqs.push(&seqs[i * dim..(i + 1) * dim]);
                batch_t.push(res[i]);
            }
            let (loss, mut grad) = net.loss_and_grad(&batch_seqs, &batch_t);
            total += loss * chunk.len() as f64;
            opt.step(&mut net.params, &mut grad);
        }
        let mean_loss = total / res.len() as f64;
        log::info!("lstm epoch {:>3}: loss {mean_loss:.4e}", epoch + 1);
        if !mean_loss.is_finite() || mean_loss > 10.0 * initial.max(1e-12) {
            return Err(Error::Training(format!(
                "residual network diverged at epoch {}: loss {mean_loss:.3e} vs initial {initial:.3e}",
                epoch + 1
            )));
        }
        epoch_loss.push(mean_loss);
    }

    let (vseqs, vres) = residual_targets(ds, Split::Validation, norm, linear);
    let n_val = vres.len().max(1) as f64;
    let val_mae_linear = vres.iter().map(|r| r.abs()).sum::<f64>() / n_val;
    let val_mae = (0..vres.len())
        .map(|i| (vres[i] - net.forward(&vseqs[i * dim..(i + 1) * dim])).abs())
        .sum::<f64>()
        / n_val;
    Ok((
        net,
        ResidualReport {
            epoch_loss,
            val_mae_linear,
            val_mae,
        },
    ))
}
