//! Dense symmetric positive definite solves on top of faer.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::{Error, Result};

/// Lower Cholesky factor of `A + jitter·I` for the first jitter in the
/// ladder that succeeds.
pub struct Cholesky {
    llt: faer::linalg::solvers::Llt<f64>,
    pub jitter: f64,
}

fn to_faer(a: ArrayView2<'_, f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Jitter ladder from `lo` to `hi` in decades, starting at zero.
pub fn jitter_ladder(lo: f64, hi: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut j = lo;
    while j <= hi * (1.0 + 1e-9) {
        out.push(j);
        j *= 10.0;
    }
    out
}

impl Cholesky {
    pub fn factor(a: ArrayView2<'_, f64>, jitters: &[f64]) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InputShape { expected: a.nrows(), got: a.ncols() });
        }
        let base = to_faer(a);
        for &jitter in jitters {
            let mut m = base.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
            if let Ok(llt) = m.llt(Side::Lower) {
                let diag_ok = (0..m.nrows()).all(|i| llt.L()[(i, i)].is_finite() && llt.L()[(i, i)] > 0.0);
                if diag_ok {
                    return Ok(Cholesky { llt, jitter });
                }
            }
        }
        Err(Error::Numerical(format!(
            "matrix of order {} is not positive definite even with jitter {:e}",
            a.nrows(),
            jitters.last().copied().unwrap_or(0.0)
        )))
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    /// L·z for a standard normal z gives a draw with covariance A.
    pub fn lower_mul(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        let l = self.llt.L();
        let n = l.nrows();
        Array1::from_iter((0..n).map(|i| (0..=i).map(|j| l[(i, j)] * z[j]).sum()))
    }

    pub fn solve(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        let x = self.llt.solve(&rhs);
        Array1::from_iter((0..b.len()).map(|i| x[(i, 0)]))
    }

    pub fn solve_mat(&self, b: ArrayView2<'_, f64>) -> Array2<f64> {
        let x = self.llt.solve(to_faer(b));
        Array2::from_shape_fn((b.nrows(), b.ncols()), |(i, j)| x[(i, j)])
    }

    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}
