//! Dense reference computations.
//!
//! Nothing here touches [`crate::linalg::Factor`]: densities go through a
//! symmetric eigendecomposition and conditioning through LU solves, so the
//! production Cholesky paths can be checked against them.

pub mod suites;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{MultiSourceDataset, SourceObservations};
use crate::discrepancy::DiscrepancyMode;
use crate::error::{domain, Error, Result};
use crate::forward::{ForwardModel, ToySine, ToyTrig2d};
use crate::kernels::{design_row, eval_product_kernel, KernelFamily, KernelSpec};
use crate::likelihood::{BiasParams, ModelSpec, ParameterState, Problem, SourceParams};
use crate::linalg::LN_2PI;

fn check_square(cov: &DMatrix<f64>, m: usize) -> Result<()> {
    if cov.nrows() != m || cov.ncols() != m {
        return domain(format!("covariance is {}x{}, expected {m}x{m}", cov.nrows(), cov.ncols()));
    }
    Ok(())
}

/// Gaussian log-density via the eigendecomposition of `cov`.
pub fn dense_mvn_logpdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let m = y.len();
    if mean.len() != m {
        return domain("mean and observation lengths differ");
    }
    check_square(cov, m)?;
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&l| !(l > 1e-14 * scale)) {
        return Err(Error::Singular("covariance is not positive definite".into()));
    }
    let r = y - mean;
    let proj = eig.eigenvectors.transpose() * r;
    let mut log_det = 0.0;
    let mut quad = 0.0;
    for (l, p) in eig.eigenvalues.iter().zip(proj.iter()) {
        log_det += l.ln();
        quad += p * p / l;
    }
    Ok(-0.5 * (m as f64 * LN_2PI + log_det + quad))
}

/// Mean and covariance of `z[free] | z[observed] = values` for
/// `z ~ N(mean, cov)`.
pub fn dense_condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    observed: &[usize],
    values: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = mean.len();
    check_square(cov, m)?;
    if observed.len() != values.len() || observed.iter().any(|&i| i >= m) {
        return domain("observed indices do not match the values");
    }
    let free: Vec<usize> = (0..m).filter(|i| !observed.contains(i)).collect();
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| cov[(rows[i], cols[j])]);
    let s_oo = pick(observed, observed);
    let s_fo = pick(&free, observed);
    let s_ff = pick(&free, &free);
    let lu = s_oo.lu();
    let resid = DVector::from_fn(observed.len(), |i, _| values[i] - mean[observed[i]]);
    let alpha = lu
        .solve(&resid)
        .ok_or_else(|| Error::Singular("observed block is singular".into()))?;
    let gain = lu
        .solve(&s_fo.transpose())
        .ok_or_else(|| Error::Singular("observed block is singular".into()))?;
    let mu = DVector::from_fn(free.len(), |i, _| mean[free[i]]) + &s_fo * alpha;
    let sigma = s_ff - &s_fo * gain;
    Ok((mu, sigma))
}

/// Correlation matrix built entry by entry from the kernel function.
pub fn dense_correlation(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        let xa = design_row(a, i);
        for j in 0..b.nrows() {
            out[(i, j)] = eval_product_kernel(spec, &xa, &design_row(b, j))?;
        }
    }
    Ok(out)
}

/// `(R^{-1} + (lambda / n) I)^{-1}` by two explicit LU inversions.
pub fn dense_sgasp_transform(r: &DMatrix<f64>, lambda_z: f64) -> Result<DMatrix<f64>> {
    let n = r.nrows();
    let singular = || Error::Singular("dense inversion failed".into());
    let mut a = r.clone().lu().try_inverse().ok_or_else(singular)?;
    for i in 0..n {
        a[(i, i)] += lambda_z / n as f64;
    }
    let out = a.lu().try_inverse().ok_or_else(singular)?;
    Ok((&out + out.transpose()) * 0.5)
}

/// Inverse of the AR(1) correlation matrix `rho^{|i-j|}`: tridiagonal with
/// `1 / (1 - rho^2)` scaling.
pub fn ar1_inverse(n: usize, rho: f64) -> Result<DMatrix<f64>> {
    if n < 2 {
        return domain(format!("AR(1) inverse needs n >= 2, got {n}"));
    }
    if !(rho.abs() < 1.0) {
        return domain(format!("need |rho| < 1, got {rho}"));
    }
    let s = 1.0 / (1.0 - rho * rho);
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = if i == 0 || i == n - 1 { s } else { (1.0 + rho * rho) * s };
        if i + 1 < n {
            m[(i, i + 1)] = -rho * s;
            m[(i + 1, i)] = -rho * s;
        }
    }
    Ok(m)
}

/// `2 tau2 gamma / (2 gamma + 1)`.
pub fn limiting_mle_variance(tau2: f64, gamma: f64) -> Result<f64> {
    if !(tau2 > 0.0 && gamma > 0.0) {
        return domain("tau2 and gamma must be positive");
    }
    Ok(2.0 * tau2 * gamma / (2.0 * gamma + 1.0))
}

/// Composite Simpson rule with `m` (rounded up to even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    let m = (m.max(2) + 1) & !1;
    let h = (b - a) / m as f64;
    let mut acc = f(a) + f(b);
    for i in 1..m {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// A random calibration problem with well-conditioned covariances.
#[derive(Clone, Debug)]
pub struct RandomInstance {
    pub problem: Problem,
    pub state: ParameterState,
}

/// Draws a problem with `n` points in `[0, 1]^p` (`p` is 1 or 2), `k`
/// aligned sources and the given discrepancy mode. Inverse ranges lie in
/// `[3, 12]` so no correlation matrix needs jitter.
pub fn random_instance(seed: u64, n: usize, k: usize, mode: DiscrepancyMode, bias: bool) -> Result<RandomInstance> {
    if n == 0 || k == 0 {
        return domain("random instance needs n, k >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(1..=2usize);
    let forward: Arc<dyn ForwardModel> = if p == 1 { Arc::new(ToySine) } else { Arc::new(ToyTrig2d) };
    let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>());
    let families = [KernelFamily::Matern52, KernelFamily::Exponential];
    let disc_family = families[rng.random_range(0..2)].clone();
    let bias_family = families[rng.random_range(0..2)].clone();
    let betas = |rng: &mut ChaCha8Rng| (0..p).map(|_| rng.random_range(3.0..12.0)).collect::<Vec<f64>>();
    let theta: Vec<f64> = (0..forward.n_params()).map(|_| rng.random_range(0.5..2.5)).collect();
    let tau2 = rng.random_range(0.2..2.0);
    let beta_disc = betas(&mut rng);
    let mut sources = Vec::with_capacity(k);
    let mut obs = Vec::with_capacity(k);
    for l in 0..k {
        let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        obs.push(SourceObservations::new(x.clone(), y, format!("s{}", l + 1))?);
        sources.push(SourceParams {
            mu: rng.random_range(-0.5..0.5),
            eta: rng.random_range(0.01..0.5),
            bias: if bias {
                Some(BiasParams {
                    sigma2: rng.random_range(0.1..1.5),
                    beta: betas(&mut rng),
                })
            } else {
                None
            },
        });
    }
    let spec = ModelSpec {
        discrepancy: mode,
        discrepancy_family: disc_family,
        bias_family: bias.then_some(bias_family),
        fit_mean: true,
    };
    let problem = Problem::new(MultiSourceDataset::new(obs)?, forward, spec)?;
    let state = ParameterState {
        theta,
        tau2,
        beta_disc,
        sources,
    };
    state.validate(&problem)?;
    Ok(RandomInstance { problem, state })
}

/// Discrepancy correlation at the design, `R` or `R_z`, built densely.
pub fn dense_discrepancy_correlation(problem: &Problem, state: &ParameterState) -> Result<DMatrix<f64>> {
    let x = problem.inputs();
    let kernel = KernelSpec::new(problem.spec.discrepancy_family.clone(), state.beta_disc.clone())?;
    let r = dense_correlation(&kernel, x, x)?;
    match problem.spec.discrepancy {
        DiscrepancyMode::Gasp => Ok(r),
        DiscrepancyMode::Sgasp { lambda_z } if lambda_z == 0.0 => Ok(r),
        DiscrepancyMode::Sgasp { lambda_z } => dense_sgasp_transform(&r, lambda_z),
    }
}

/// `sigma2_l R_l + sigma2_0l diag(1/w)` built densely.
pub fn dense_source_covariance(problem: &Problem, state: &ParameterState, l: usize) -> Result<DMatrix<f64>> {
    let src = &problem.data.sources[l];
    let n = src.n();
    let noise = state.noise_var(l);
    let mut cov = match (&problem.spec.bias_family, &state.sources[l].bias) {
        (Some(fam), Some(b)) => dense_correlation(&KernelSpec::new(fam.clone(), b.beta.clone())?, &src.inputs, &src.inputs)? * b.sigma2,
        _ => DMatrix::zeros(n, n),
    };
    for i in 0..n {
        cov[(i, i)] += noise / src.weights.as_ref().map_or(1.0, |w| w[i]);
    }
    Ok(cov)
}

/// Mean and covariance of all `k n` observations stacked source by source.
pub fn dense_joint_moments(problem: &Problem, state: &ParameterState) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = problem.n();
    let k = problem.k();
    let d = dense_discrepancy_correlation(problem, state)? * state.tau2;
    let f = problem.model_outputs(&state.theta)?;
    let mut mean = DVector::zeros(n * k);
    let mut cov = DMatrix::zeros(n * k, n * k);
    for a in 0..k {
        for i in 0..n {
            mean[a * n + i] = f[a][i] + state.sources[a].mu;
        }
        for b in 0..k {
            cov.view_mut((a * n, b * n), (n, n)).copy_from(&d);
        }
        let s = dense_source_covariance(problem, state, a)?;
        let mut block = cov.view_mut((a * n, a * n), (n, n));
        block += s;
    }
    Ok((mean, cov))
}

/// All observations concatenated source by source.
pub fn stacked_observations(problem: &Problem) -> DVector<f64> {
    let n = problem.n();
    DVector::from_fn(n * problem.k(), |i, _| problem.data.sources[i / n].outputs[i % n])
}

/// Discrepancy covariance kernel between the rows of `a` and `b`. For the
/// S-GaSP this is the consistent kernel `K - K(., X) (R + n/lambda I)^{-1} K(X, .)`.
fn dense_disc_kernel(problem: &Problem, state: &ParameterState, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let spec = KernelSpec::new(problem.spec.discrepancy_family.clone(), state.beta_disc.clone())?;
    let k_ab = dense_correlation(&spec, a, b)?;
    match problem.spec.discrepancy {
        DiscrepancyMode::Sgasp { lambda_z } if lambda_z > 0.0 => {
            let x = problem.inputs();
            let n = x.nrows();
            let mut m = dense_correlation(&spec, x, x)?;
            for i in 0..n {
                m[(i, i)] += n as f64 / lambda_z;
            }
            let inv = m
                .lu()
                .try_inverse()
                .ok_or_else(|| Error::Singular("kernel matrix is singular".into()))?;
            let k_ax = dense_correlation(&spec, a, x)?;
            let k_xb = dense_correlation(&spec, x, b)?;
            Ok(k_ab - k_ax * inv * k_xb)
        }
        _ => Ok(k_ab),
    }
}

/// Conditional mean and covariance of `(delta(x*), delta_l(x*), eps_l*)` given
/// the discrepancy `delta` at the design and every observation, by
/// conditioning the full joint Gaussian.
pub fn dense_prediction_moments(
    problem: &Problem,
    state: &ParameterState,
    delta: &DVector<f64>,
    l: usize,
    xs: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = problem.n();
    let k = problem.k();
    if l >= k || xs.len() != problem.dim() || delta.len() != n {
        return domain("source, input or discrepancy has the wrong size");
    }
    let x = problem.inputs();
    let xstar = DMatrix::from_row_slice(1, xs.len(), xs);
    let tau2 = state.tau2;
    let d = dense_discrepancy_correlation(problem, state)? * tau2;
    let ks = dense_disc_kernel(problem, state, &xstar, x)? * tau2;
    let kss = dense_disc_kernel(problem, state, &xstar, &xstar)?[(0, 0)] * tau2;
    let (sigma2, rl) = match (&problem.spec.bias_family, &state.sources[l].bias) {
        (Some(fam), Some(b)) => {
            let spec = KernelSpec::new(fam.clone(), b.beta.clone())?;
            (b.sigma2, dense_correlation(&spec, &xstar, x)? * b.sigma2)
        }
        _ => (0.0, DMatrix::zeros(1, n)),
    };
    let m = 3 + n + n * k;
    let f = problem.model_outputs(&state.theta)?;
    let mut mean = DVector::zeros(m);
    let mut cov = DMatrix::zeros(m, m);
    cov[(0, 0)] = kss;
    cov[(1, 1)] = sigma2;
    cov[(2, 2)] = state.noise_var(l);
    let off = |b: usize| 3 + n + b * n;
    for j in 0..n {
        cov[(0, 3 + j)] = ks[(0, j)];
        for b in 0..k {
            cov[(0, off(b) + j)] = ks[(0, j)];
        }
        cov[(1, off(l) + j)] = rl[(0, j)];
    }
    cov.view_mut((3, 3), (n, n)).copy_from(&d);
    for a in 0..k {
        for i in 0..n {
            mean[off(a) + i] = f[a][i] + state.sources[a].mu;
        }
        cov.view_mut((3, off(a)), (n, n)).copy_from(&d);
        for b in 0..k {
            cov.view_mut((off(a), off(b)), (n, n)).copy_from(&d);
        }
        let s = dense_source_covariance(problem, state, a)?;
        let mut block = cov.view_mut((off(a), off(a)), (n, n));
        block += s;
    }
    let full = DMatrix::from_fn(m, m, |i, j| if i <= j { cov[(i, j)] } else { cov[(j, i)] });
    let observed: Vec<usize> = (3..m).collect();
    let mut values = DVector::zeros(n + n * k);
    values.rows_mut(0, n).copy_from(delta);
    for a in 0..k {
        values.rows_mut(n + a * n, n).copy_from(&problem.data.sources[a].outputs);
    }
    dense_condition(&mean, &full, &observed, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;

    #[test]
    fn standard_normal_at_mean() {
        let v = dense_mvn_logpdf(&DVector::from_element(1, 0.3), &DVector::from_element(1, 0.3), &DMatrix::identity(1, 1))
            .unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn diagonal_is_sum_of_scalars() {
        let d: [f64; 3] = [0.5, 2.0, 3.5];
        let y = DVector::<f64>::from_vec(vec![0.1, -1.0, 2.0]);
        let mu = DVector::<f64>::from_vec(vec![0.0, 0.5, 1.0]);
        let cov = DMatrix::from_diagonal(&DVector::from_row_slice(&d));
        let want: f64 = (0..3)
            .map(|i| -0.5 * (LN_2PI + d[i].ln() + (y[i] - mu[i]).powi(2) / d[i]))
            .sum();
        assert!((dense_mvn_logpdf(&y, &mu, &cov).unwrap() - want).abs() < 1e-13);
    }

    #[test]
    fn change_of_variables() {
        // z = A y: log p_z(Az) = log p_y(y) - log|det A|
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.1, 0.0, 1.5, 0.4, 0.2, -0.7, 0.9]);
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 2.0, -0.3, 0.1, -0.3, 0.7]);
        let mu = DVector::from_vec(vec![0.5, -0.2, 1.0]);
        let y = DVector::from_vec(vec![0.1, 0.4, -0.6]);
        let lhs = dense_mvn_logpdf(&(&a * &y), &(&a * &mu), &(&a * &cov * a.transpose())).unwrap();
        let rhs = dense_mvn_logpdf(&y, &mu, &cov).unwrap() - a.determinant().abs().ln();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn non_pd_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(dense_mvn_logpdf(&DVector::zeros(2), &DVector::zeros(2), &cov).is_err());
    }

    #[test]
    fn bivariate_conditioning() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let mean = DVector::from_vec(vec![1.0, -1.0]);
        let (m, v) = dense_condition(&mean, &cov, &[1], &DVector::from_element(1, 0.5)).unwrap();
        assert!((m[0] - (1.0 + 0.6 * 1.5)).abs() < 1e-15);
        assert!((v[(0, 0)] - (2.0 - 0.36)).abs() < 1e-15);
    }

    #[test]
    fn ar1_small_cases() {
        let rho = 0.3;
        let m = ar1_inverse(2, rho).unwrap();
        let s = 1.0 / (1.0 - rho * rho);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[s, -rho * s, -rho * s, s]));
        assert_eq!(ar1_inverse(5, 0.0).unwrap(), DMatrix::identity(5, 5));
        assert!(ar1_inverse(3, 1.0).is_err());
        assert!(ar1_inverse(1, 0.5).is_err());
    }

    #[test]
    fn ar1_inverts_exponential_grid() {
        let (n, gamma) = (50, 0.1);
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64);
        let spec = KernelSpec::new(KernelFamily::Exponential, vec![1.0 / gamma]).unwrap();
        let r = dense_correlation(&spec, &x, &x).unwrap();
        let rho = (-1.0 / (n as f64 * gamma)).exp();
        let prod = r * ar1_inverse(n, rho).unwrap();
        assert!((prod - DMatrix::<f64>::identity(n, n)).amax() < 1e-10);
    }

    #[test]
    fn limiting_variance_values() {
        assert!((limiting_mle_variance(1.0, 0.1).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!((limiting_mle_variance(1.0, 0.02).unwrap() - 0.04 / 1.04).abs() < 1e-15);
        assert!(limiting_mle_variance(1.0, 1e-12).unwrap() < 1e-11);
        assert!(limiting_mle_variance(0.0, 0.1).is_err());
    }

    #[test]
    fn simpson_polynomial_exact() {
        let v = simpson(|x| x * x * x - 2.0 * x, 0.0, 2.0, 4);
        assert!((v - 0.0).abs() < 1e-14);
    }
}
