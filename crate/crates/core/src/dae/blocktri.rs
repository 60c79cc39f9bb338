//! Stage-block tridiagonal matrices.
//!
//! Each stage's balances only see its own mixer/settler and the settlers of
//! the two neighbouring stages, so in stage-major ordering the Jacobian of
//! the right-hand side is block tridiagonal with 8×8 blocks.

use nalgebra::{DMatrix, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::model::{Block, N_STAGES, N_STATES};

pub(crate) const NB: usize = 8;
pub(crate) type Mat8 = SMatrix<f64, NB, NB>;
pub(crate) type Vec8 = SVector<f64, NB>;

/// Rows/columns grouped per stage; `lower[s]` couples stage `s` to `s-1`,
/// `upper[s]` couples stage `s` to `s+1`.
#[derive(Debug, Clone)]
pub(crate) struct BlockTri {
    pub diag: [Mat8; N_STAGES],
    pub lower: [Mat8; N_STAGES],
    pub upper: [Mat8; N_STAGES],
}

impl BlockTri {
    pub fn zeros() -> Self {
        BlockTri {
            diag: [Mat8::zeros(); N_STAGES],
            lower: [Mat8::zeros(); N_STAGES],
            upper: [Mat8::zeros(); N_STAGES],
        }
    }

    /// `alpha·I + beta·self`.
    pub fn shifted(&self, alpha: f64, beta: f64) -> Self {
        let mut out = self.clone();
        for s in 0..N_STAGES {
            out.diag[s] = self.diag[s] * beta + Mat8::identity() * alpha;
            out.lower[s] *= beta;
            out.upper[s] *= beta;
        }
        out
    }

    /// Entry (row, col) in the original 128-state ordering.
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let (rs, rb) = split(row);
        let (cs, cb) = split(col);
        match cs as isize - rs as isize {
            0 => self.diag[rs][(rb, cb)] = value,
            -1 => self.lower[rs][(rb, cb)] = value,
            1 => self.upper[rs][(rb, cb)] = value,
            _ => debug_assert!(value == 0.0, "entry outside block band"),
        }
    }

    #[allow(dead_code)]
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(N_STATES, N_STATES);
        for s in 0..N_STAGES {
            for rb in 0..NB {
                for cb in 0..NB {
                    let r = Block::ALL[rb].at(s);
                    m[(r, Block::ALL[cb].at(s))] = self.diag[s][(rb, cb)];
                    if s > 0 {
                        m[(r, Block::ALL[cb].at(s - 1))] = self.lower[s][(rb, cb)];
                    }
                    if s + 1 < N_STAGES {
                        m[(r, Block::ALL[cb].at(s + 1))] = self.upper[s][(rb, cb)];
                    }
                }
            }
        }
        m
    }

    /// Block LU factorisation (block Thomas algorithm).
    pub fn factor(&self) -> Result<BlockTriLu> {
        let mut pivots: Vec<nalgebra::LU<f64, nalgebra::Const<NB>, nalgebra::Const<NB>>> =
            Vec::with_capacity(N_STAGES);
        let mut mult = [Mat8::zeros(); N_STAGES];
        let mut d = self.diag[0];
        for s in 0..N_STAGES {
            if s > 0 {
                let prev_inv = pivots[s - 1].try_inverse().ok_or_else(|| {
                    Error::Integration(format!("singular pivot block at stage {s}"))
                })?;
                mult[s] = self.lower[s] * prev_inv;
                d = self.diag[s] - mult[s] * self.upper[s - 1];
            }
            let lu = d.lu();
            if !lu.is_invertible() {
                return Err(Error::Integration(format!(
                    "singular pivot block at stage {}",
                    s + 1
                )));
            }
            pivots.push(lu);
        }
        Ok(BlockTriLu {
            pivots,
            mult,
            upper: self.upper,
        })
    }
}

#[inline]
fn split(i: usize) -> (usize, usize) {
    (i % N_STAGES, i / N_STAGES)
}

pub(crate) struct BlockTriLu {
    pivots: Vec<nalgebra::LU<f64, nalgebra::Const<NB>, nalgebra::Const<NB>>>,
    mult: [Mat8; N_STAGES],
    upper: [Mat8; N_STAGES],
}

impl BlockTriLu {
    /// Solves `A·sol = rhs` for a right-hand side in the 128-state ordering.
    pub fn solve(&self, rhs: &[f64; N_STATES]) -> [f64; N_STATES] {
        let mut y = [Vec8::zeros(); N_STAGES];
        for s in 0..N_STAGES {
            let mut b = Vec8::from_fn(|bi, _| rhs[Block::ALL[bi].at(s)]);
            if s > 0 {
                b -= self.mult[s] * y[s - 1];
            }
            y[s] = b;
        }
        let mut sol = [Vec8::zeros(); N_STAGES];
        for s in (0..N_STAGES).rev() {
            let mut b = y[s];
            if s + 1 < N_STAGES {
                b -= self.upper[s] * sol[s + 1];
            }
            sol[s] = self.pivots[s].solve(&b).unwrap_or(b);
        }
        let mut out = [0.0; N_STATES];
        for s in 0..N_STAGES {
            for bi in 0..NB {
                out[Block::ALL[bi].at(s)] = sol[s][bi];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_solve_matches_dense_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = BlockTri::zeros();
        for s in 0..N_STAGES {
            m.diag[s] = Mat8::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Mat8::identity() * 6.0;
            if s > 0 {
                m.lower[s] = Mat8::from_fn(|_, _| rng.random_range(-1.0..1.0));
            }
            if s + 1 < N_STAGES {
                m.upper[s] = Mat8::from_fn(|_, _| rng.random_range(-1.0..1.0));
            }
        }
        let mut b = [0.0; N_STATES];
        for v in b.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let x = m.factor().unwrap().solve(&b);
        let dense = m.to_dense();
        let want = dense
            .lu()
            .solve(&DMatrix::from_column_slice(N_STATES, 1, &b))
            .unwrap();
        for i in 0..N_STATES {
            assert!(
                (x[i] - want[i]).abs() < 1e-12,
                "{i}: {} vs {}",
                x[i],
                want[i]
            );
        }
    }

    #[test]
    fn set_places_entries_in_dense_positions() {
        let mut m = BlockTri::zeros();
        let r = Block::UAqMixer.at(7);
        let c = Block::UAqSettler.at(8);
        m.set(r, c, 2.5);
        m.set(r, r, -1.0);
        let d = m.to_dense();
        assert_eq!(d[(r, c)], 2.5);
        assert_eq!(d[(r, r)], -1.0);
    }
}
