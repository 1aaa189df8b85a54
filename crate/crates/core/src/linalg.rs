//! Cholesky factorization with a diagonal jitter ladder, and the handful of
//! solves the likelihood code needs.
//!
//! A factorization is only accepted when every squared pivot exceeds
//! `n * EPS * max(diag)`; below that level the pivots are dominated by
//! roundoff and the next rung of the ladder is tried. Rungs are relative to
//! the largest diagonal entry, so for correlation matrices they are the
//! absolute increments.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Diagonal increments tried in order until the factorization is accepted.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn max_abs_diag(a: &DMatrix<f64>) -> f64 {
    let d = a.nrows().min(a.ncols());
    (0..d).map(|i| a[(i, i)].abs()).fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct Factor {
    chol: Cholesky<f64, Dyn>,
    lower: DMatrix<f64>,
    log_det: f64,
    jitter: f64,
}

impl Factor {
    /// Factorizes `a` without any jitter.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        Self::try_with(a, 0.0).ok_or_else(|| {
            Error::Singular(format!("{}x{} matrix is not positive definite", a.nrows(), a.ncols()))
        })
    }

    /// Factorizes `a + jitter * I` with the smallest rung of [`JITTER_LADDER`]
    /// (scaled by `max(diag(a))`) that succeeds. `what` names the matrix in
    /// the error message.
    pub fn with_jitter(a: &DMatrix<f64>, what: &str) -> Result<Self> {
        JITTER_LADDER
            .iter()
            .find_map(|&j| Self::try_with(a, j * max_abs_diag(a)))
            .ok_or_else(|| {
                Error::Singular(format!(
                    "{what}: Cholesky failed after jitter {:e}",
                    JITTER_LADDER[JITTER_LADDER.len() - 1]
                ))
            })
    }

    fn try_with(a: &DMatrix<f64>, jitter: f64) -> Option<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n || a.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut m = a.clone();
        if jitter > 0.0 {
            for i in 0..n {
                m[(i, i)] += jitter;
            }
        }
        let max_diag = max_abs_diag(&m);
        let floor = n as f64 * f64::EPSILON * max_diag;
        let chol = Cholesky::new(m)?;
        let lower = chol.l();
        let mut log_det = 0.0;
        for i in 0..n {
            let d = lower[(i, i)];
            if !(d * d > floor) {
                return None;
            }
            log_det += d.ln();
        }
        Some(Factor {
            chol,
            lower,
            log_det: 2.0 * log_det,
            jitter,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Lower-triangular factor `L` with `L L^T = A + jitter I`.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L^{-1} b`.
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("factor has a nonzero diagonal")
    }

    /// `L^{-1} B`.
    pub fn whiten_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("factor has a nonzero diagonal")
    }

    /// `L^{-T} b`.
    pub fn unwhiten_t(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lower
            .tr_solve_lower_triangular(b)
            .expect("factor has a nonzero diagonal")
    }

    /// `b^T A^{-1} b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        self.whiten(b).norm_squared()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Reconstructs `L L^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    /// Log-density of a zero-mean Gaussian with this covariance at `resid`.
    pub fn gaussian_logpdf(&self, resid: &DVector<f64>) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + self.quad_form(resid))
    }
}
