//! Model-discrepancy processes: a plain GaSP and the discretized scaled GaSP.
//!
//! Conditioning a GaSP on the mean squared discrepancy at the `n` design
//! points, with an exponential scaling density on that quantity, leaves a
//! Gaussian marginal with covariance `tau2 * R_z` where
//! `R_z = (R^{-1} + (lambda_z / n) I)^{-1}`. Every likelihood and prediction
//! routine therefore only needs `R_z` in place of `R`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::kernels::{build_correlation_matrix, CorrelationMatrix, KernelSpec};
use crate::linalg::Factor;

/// Constant `C` in the default scaling parameter `lambda_z = C sqrt(n)`.
pub const DEFAULT_LAMBDA_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DiscrepancyMode {
    Gasp,
    Sgasp { lambda_z: f64 },
}

impl DiscrepancyMode {
    /// S-GaSP with the default scaling parameter for `n` observations.
    pub fn sgasp_default(n: usize) -> Result<Self> {
        Ok(DiscrepancyMode::Sgasp {
            lambda_z: default_lambda_z(n)?,
        })
    }

    pub fn lambda_z(&self) -> f64 {
        match self {
            DiscrepancyMode::Gasp => 0.0,
            DiscrepancyMode::Sgasp { lambda_z } => *lambda_z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.lambda_z();
        if !(l >= 0.0) || !l.is_finite() {
            return domain(format!("lambda_z must be finite and nonnegative, got {l}"));
        }
        Ok(())
    }

    /// Correlation matrix of the discrepancy at `inputs`: `R` or `R_z`.
    pub fn correlation(&self, kernel: &KernelSpec, inputs: &DMatrix<f64>) -> Result<CorrelationMatrix> {
        self.validate()?;
        let r = build_correlation_matrix(kernel, inputs)?;
        match self {
            DiscrepancyMode::Gasp => Ok(r),
            DiscrepancyMode::Sgasp { lambda_z } => transform_covariance(&r, *lambda_z, inputs.nrows()),
        }
    }
}

/// A discrepancy process with its kernel and variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyModel {
    pub mode: DiscrepancyMode,
    pub kernel: KernelSpec,
    pub tau2: f64,
}

impl DiscrepancyModel {
    pub fn new(mode: DiscrepancyMode, kernel: KernelSpec, tau2: f64) -> Result<Self> {
        mode.validate()?;
        kernel.validate()?;
        if !(tau2 > 0.0) || !tau2.is_finite() {
            return domain(format!("discrepancy variance must be positive, got {tau2}"));
        }
        Ok(DiscrepancyModel { mode, kernel, tau2 })
    }

    pub fn correlation(&self, inputs: &DMatrix<f64>) -> Result<CorrelationMatrix> {
        self.mode.correlation(&self.kernel, inputs)
    }
}

/// `100 * sqrt(n)`.
pub fn default_lambda_z(n: usize) -> Result<f64> {
    if n == 0 {
        return domain("lambda_z needs at least one observation");
    }
    Ok(DEFAULT_LAMBDA_SCALE * (n as f64).sqrt())
}

/// Computes `R_z = (R^{-1} + (lambda_z / n) I)^{-1}` and factorizes it.
///
/// With `R = L L^T` (the jittered factor of `R`), `R_z = L (I + c L^T L)^{-1} L^T`
/// for `c = lambda_z / n`, so only the well-conditioned `I + c L^T L` is
/// factorized and `R` is never inverted.
pub fn transform_covariance(r: &CorrelationMatrix, lambda_z: f64, n: usize) -> Result<CorrelationMatrix> {
    if r.dim() != n {
        return domain(format!("R is {0}x{0} but n = {n}", r.dim()));
    }
    if !(lambda_z >= 0.0) || !lambda_z.is_finite() {
        return domain(format!("lambda_z must be finite and nonnegative, got {lambda_z}"));
    }
    if lambda_z == 0.0 {
        return Ok(r.clone());
    }
    let c = lambda_z / n as f64;
    let l = r.factor().lower();
    let mut m = l.transpose() * l * c;
    for i in 0..n {
        m[(i, i)] += 1.0;
    }
    let g = Factor::new(&m)?;
    let x = g
        .lower()
        .solve_lower_triangular(&l.transpose())
        .expect("factor has a nonzero diagonal");
    let mut rz = x.transpose() * &x;
    // exact symmetry
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (rz[(i, j)] + rz[(j, i)]);
            rz[(i, j)] = v;
            rz[(j, i)] = v;
        }
    }
    CorrelationMatrix::from_entries(rz, "S-GaSP transformed correlation")
}

/// Exponential scaling density on the mean squared discrepancy.
pub fn scaling_density(z: f64, tau2: f64, lambda_z: f64, volume: f64) -> Result<f64> {
    if !(z >= 0.0) {
        return domain(format!("z must be nonnegative, got {z}"));
    }
    if !(tau2 > 0.0 && lambda_z > 0.0 && volume > 0.0) {
        return domain("tau2, lambda_z and volume must be positive");
    }
    let rate = lambda_z / (2.0 * tau2 * volume);
    Ok(rate * (-rate * z).exp())
}

/// Volume of the axis-aligned bounding box of a design.
pub fn design_volume(inputs: &DMatrix<f64>) -> Result<f64> {
    if inputs.nrows() == 0 {
        return domain("empty design");
    }
    let vol: f64 = inputs
        .column_iter()
        .map(|c| c.max() - c.min())
        .product();
    if !(vol > 0.0) {
        return domain("design bounding box has zero volume");
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use nalgebra::SymmetricEigen;

    fn random_r(n: usize, seed: u64) -> CorrelationMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let spec = KernelSpec::new(KernelFamily::Matern52, vec![2.0, 3.0]).unwrap();
        build_correlation_matrix(&spec, &x).unwrap()
    }

    #[test]
    fn lambda_defaults() {
        assert_eq!(default_lambda_z(100).unwrap(), 1000.0);
        assert_eq!(default_lambda_z(1).unwrap(), 100.0);
        assert_eq!(default_lambda_z(400).unwrap(), 2000.0);
        assert!(default_lambda_z(0).is_err());
    }

    #[test]
    fn zero_lambda_is_identity_transform() {
        let r = random_r(6, 1);
        let rz = transform_covariance(&r, 0.0, 6).unwrap();
        assert_eq!(rz.entries(), r.entries());
    }

    #[test]
    fn identity_with_lambda_n_halves() {
        let r = CorrelationMatrix::from_entries(DMatrix::identity(4, 4), "I").unwrap();
        let rz = transform_covariance(&r, 4.0, 4).unwrap();
        let want = DMatrix::<f64>::identity(4, 4) * 0.5;
        assert!((rz.entries() - want).amax() < 1e-15);
    }

    #[test]
    fn matches_dense_inverse() {
        let r = random_r(5, 7);
        let rz = transform_covariance(&r, 50.0, 5).unwrap();
        let mut a = r.entries().clone().try_inverse().unwrap();
        for i in 0..5 {
            a[(i, i)] += 10.0;
        }
        let dense = a.try_inverse().unwrap();
        assert!((rz.entries() - dense).amax() < 1e-9);
    }

    #[test]
    fn composition_adds_lambdas() {
        let r = random_r(8, 3);
        let once = transform_covariance(&r, 30.0, 8).unwrap();
        let twice = transform_covariance(&transform_covariance(&r, 10.0, 8).unwrap(), 20.0, 8).unwrap();
        assert!((once.entries() - twice.entries()).amax() < 1e-9);
    }

    #[test]
    fn shrinks_in_loewner_order() {
        for seed in 0..10 {
            let r = random_r(10, seed);
            let rz = transform_covariance(&r, 100.0, 10).unwrap();
            let diff = r.entries() - rz.entries();
            let eig = SymmetricEigen::new(diff);
            assert!(eig.eigenvalues.min() >= -1e-10);
            assert!(rz.entries().trace() < r.entries().trace());
        }
    }

    #[test]
    fn scaling_density_values() {
        assert_eq!(scaling_density(0.0, 2.0, 3.0, 0.5).unwrap(), 3.0 / 2.0);
        let v = scaling_density(1.0, 1.0, 2.0, 1.0).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!(scaling_density(1.0, 0.0, 2.0, 1.0).is_err());
        assert!(scaling_density(-1.0, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn scaling_density_integrates_to_one() {
        // composite Simpson on [0, 50 * mean]
        let (tau2, lambda, vol) = (0.7, 3.0, 2.0);
        let mean = 2.0 * tau2 * vol / lambda;
        let upper = 50.0 * mean;
        let m = 200_000;
        let h = upper / m as f64;
        let f = |z: f64| scaling_density(z, tau2, lambda, vol).unwrap();
        let mut acc = f(0.0) + f(upper);
        for i in 1..m {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        assert!((acc * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bounding_box_volume() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 2.0, 0.5, 1.0, 3.0]);
        assert!((design_volume(&x).unwrap() - 5.0).abs() < 1e-15);
    }
}
