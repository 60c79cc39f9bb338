//! First-order optimisers over flat parameter vectors.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip_norm: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize, lr: f64, clip_norm: f64) -> Self {
        Optimizer {
            kind,
            lr,
            clip_norm,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Applies one update; `grad` is rescaled in place if its norm exceeds the clip.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > self.clip_norm {
            let s = self.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad.iter()) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t as i32);
                let c2 = 1.0 - BETA2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.lr * mh / (vh.sqrt() + EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_kinds_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = vec![1.0, -2.0];
            let mut opt = Optimizer::new(kind, 2, 0.05, 10.0);
            for _ in 0..2000 {
                let mut g = vec![2.0 * p[0], 2.0 * p[1]];
                opt.step(&mut p, &mut g);
            }
            assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{kind:?}: {p:?}");
        }
    }

    #[test]
    fn clipping_bounds_the_sgd_step() {
        let mut p = vec![0.0];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1, 1.0, 0.5);
        let mut g = vec![100.0];
        opt.step(&mut p, &mut g);
        assert_eq!(p[0], -0.5);
    }
}
