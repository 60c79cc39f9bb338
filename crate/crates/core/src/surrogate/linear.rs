use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// ŷ = a·θ + bias, in normalised units.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        LinearModel {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    #[inline]
    pub fn predict(&self, theta: &[f64]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(theta)
                .map(|(a, t)| a * t)
                .sum::<f64>()
    }
}

/// Least-squares fit of `targets` on the rows of `x` (row-major, `dim` columns).
///
/// Householder QR on the augmented design matrix; a rank-deficient design
/// falls back to ridge-regularised normal equations.
pub fn train_linear(x: &[f64], targets: &[f64], dim: usize) -> Result<LinearModel> {
    let n = targets.len();
    if dim == 0 || x.len() != n * dim {
        return Err(Error::Dimension {
            expected: n * dim,
            got: x.len(),
        });
    }
    let p = dim + 1;
    if n < p {
        return Err(Error::Training(format!(
            "linear fit needs at least {p} samples, got {n}"
        )));
    }
    let design = DMatrix::from_fn(n, p, |r, c| if c < dim { x[r * dim + c] } else { 1.0 });
    let b = DVector::from_column_slice(targets);

    let qr = design.clone().qr();
    let r = qr.r();
    let diag_max = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let full_rank = (0..p).all(|i| r[(i, i)].abs() > 1e-10 * diag_max.max(f64::MIN_POSITIVE));
    let coef = if full_rank {
        let mut qtb = b.clone();
        qr.q_tr_mul(&mut qtb);
        let rhs = qtb.rows(0, p).into_owned();
        r.solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::Training("singular triangular factor".into()))?
    } else {
        let gram = design.transpose() * &design;
        let lambda = 1e-8 * gram.trace() / p as f64;
        log::warn!("rank-deficient linear design; ridge fallback with lambda = {lambda:.3e}");
        let reg = gram + DMatrix::identity(p, p) * lambda;
        let rhs = design.transpose() * &b;
        reg.cholesky()
            .ok_or_else(|| Error::Training("ridge system not positive definite".into()))?
            .solve(&rhs)
    };
    Ok(LinearModel {
        weights: coef.rows(0, dim).iter().copied().collect(),
        bias: coef[dim],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_exact_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = [0.3, -1.2, 0.7, 2.0];
        let (dim, n) = (4, 200);
        let x: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 0.25 + (0..dim).map(|j| a[j] * x[i * dim + j]).sum::<f64>())
            .collect();
        let m = train_linear(&x, &y, dim).unwrap();
        for j in 0..dim {
            assert!((m.weights[j] - a[j]).abs() < 1e-8);
        }
        assert!((m.bias - 0.25).abs() < 1e-8);
    }

    #[test]
    fn constant_targets_give_mean_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = train_linear(&x, &vec![0.4; 100], 3).unwrap();
        assert!(m.weights.iter().all(|w| w.abs() < 1e-10));
        assert!((m.bias - 0.4).abs() < 1e-10);
    }

    #[test]
    fn duplicated_column_uses_ridge() {
        let x: Vec<f64> = (0..50)
            .flat_map(|i| [i as f64 / 50.0, i as f64 / 50.0])
            .collect();
        let y: Vec<f64> = (0..50).map(|i| 2.0 * i as f64 / 50.0 + 1.0).collect();
        let m = train_linear(&x, &y, 2).unwrap();
        for (i, yi) in y.iter().enumerate() {
            assert!((m.predict(&x[2 * i..2 * i + 2]) - yi).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_samples() {
        assert!(train_linear(&[1.0], &[1.0], 1).is_err());
    }
}
