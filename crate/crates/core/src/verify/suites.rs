//! Randomized identity checks of the production paths against the dense oracles.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    ar1_inverse, dense_correlation, dense_joint_moments, dense_mvn_logpdf, dense_prediction_moments, random_instance,
    stacked_observations, RandomInstance,
};
use crate::data::stack_sources;
use crate::discrepancy::{default_lambda_z, DiscrepancyMode};
use crate::error::Result;
use crate::kernels::{KernelFamily, KernelSpec};
use crate::likelihood::{decomposition_check, joint_marginal, posterior_discrepancy, Workspace};
use crate::predict::Predictor;

/// Outcome of one suite: the worst discrepancy seen against its tolerance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteReport {
    fn new(name: &str, cases: usize, max_error: f64, tolerance: f64) -> Self {
        SuiteReport {
            name: name.into(),
            cases,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }
}

fn mode_for(rng: &mut ChaCha8Rng, n: usize) -> Result<DiscrepancyMode> {
    Ok(if rng.random::<bool>() {
        DiscrepancyMode::Gasp
    } else {
        DiscrepancyMode::Sgasp {
            lambda_z: default_lambda_z(n)?,
        }
    })
}

/// Joint marginal likelihood against the dense `kn`-dimensional density.
pub fn joint_marginal_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(1..=15);
        let k = rng.random_range(1..=4);
        let mode = mode_for(&mut rng, n)?;
        let RandomInstance { problem, state } = random_instance(rng.random(), n, k, mode, rng.random())?;
        let (mean, cov) = dense_joint_moments(&problem, &state)?;
        let dense = dense_mvn_logpdf(&stacked_observations(&problem), &mean, &cov)?;
        worst = worst.max((joint_marginal(&problem, &state)? - dense).abs());
    }
    Ok(SuiteReport::new("joint_marginal_vs_dense", cases, worst, 1e-8))
}

/// Full-data white-noise likelihood against the stacked one plus the
/// scatter constant, with both sides from the dense density.
pub fn decomposition_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(1..=50);
        let k = rng.random_range(1..=10);
        let RandomInstance { problem, .. } = random_instance(rng.random(), n, k, DiscrepancyMode::Gasp, false)?;
        let f = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let delta = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mu = rng.random_range(-1.0..1.0);
        let s2: f64 = rng.random_range(0.01..3.0);
        let mean = DVector::from_fn(n, |i, _| f[i] + delta[i] + mu);
        let ds = &problem.data;
        let ybar = stack_sources(ds)?.outputs;
        let eye = DMatrix::<f64>::identity(n, n);
        let mut full = 0.0;
        let mut scatter = 0.0;
        for s in &ds.sources {
            full += dense_mvn_logpdf(&s.outputs, &mean, &(&eye * s2))?;
            scatter += (&s.outputs - &ybar).norm_squared();
        }
        let (nf, kf) = (n as f64, k as f64);
        let stack = dense_mvn_logpdf(&ybar, &mean, &(&eye * (s2 / kf)))?;
        let constant = -0.5 * nf * (kf - 1.0) * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * nf * kf.ln()
            - scatter / (2.0 * s2);
        let d = decomposition_check(ds, &f, &delta, mu, s2)?;
        worst = worst
            .max((full - stack - constant).abs())
            .max((d.full - full).abs())
            .max((d.stack - stack).abs())
            .max((d.constant - constant).abs());
    }
    Ok(SuiteReport::new("stack_decomposition", cases, worst, 1e-9))
}

/// Discrepancy, bias, field and reality predictions against dense
/// conditioning of the full joint Gaussian.
pub fn prediction_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(2..=12);
        let k = rng.random_range(1..=3);
        let mode = mode_for(&mut rng, n)?;
        let bias: bool = rng.random();
        let RandomInstance { problem, state } = random_instance(rng.random(), n, k, mode, bias)?;
        let delta = Workspace::new(&problem, &state)?.draw_delta(&mut rng);
        let pred = Predictor::new(&problem, &state, &delta)?;
        let xs: Vec<f64> = (0..problem.dim()).map(|_| rng.random::<f64>()).collect();
        let xm = DMatrix::from_row_slice(1, xs.len(), &xs);
        for l in 0..k {
            let (mu, sig) = dense_prediction_moments(&problem, &state, &delta, l, &xs)?;
            let look = problem.data.sources[l].look;
            let fm = problem.forward.evaluate(&state.theta, &xm, look.as_ref())?[0];
            let d = pred.discrepancy(&xs)?;
            let field = pred.field(l, &xs)?;
            let reality = pred.reality(l, &xs)?;
            let mut errs = vec![
                d.mean - mu[0],
                d.variance - sig[(0, 0)],
                field.mean - (mu.sum() + fm + state.sources[l].mu),
                field.variance - sig.sum(),
                reality.mean - (mu[0] + fm),
                reality.variance - sig[(0, 0)],
            ];
            if bias {
                let b = pred.bias(l, &xs)?;
                errs.extend([b.mean - mu[1], b.variance - sig[(1, 1)]]);
            }
            worst = errs.iter().fold(worst, |w, e| w.max(e.abs()));
        }
    }
    Ok(SuiteReport::new("predictions_vs_dense", cases, worst, 1e-9))
}

/// `R - R_z` is positive semidefinite for random kernels and designs.
pub fn sgasp_shrinkage_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(2..=15);
        let p = rng.random_range(1..=3);
        let family = if rng.random() {
            KernelFamily::Matern52
        } else {
            KernelFamily::Exponential
        };
        let kernel = KernelSpec::new(family, (0..p).map(|_| rng.random_range(0.5..20.0)).collect())?;
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>());
        let lambda_z = 10f64.powf(rng.random_range(-1.0..4.0));
        let r = dense_correlation(&kernel, &x, &x)?;
        let rz = DiscrepancyMode::Sgasp { lambda_z }.correlation(&kernel, &x)?;
        let diff = &r - rz.entries();
        let sym = (&diff + diff.transpose()) * 0.5;
        let min = SymmetricEigen::new(sym).eigenvalues.min();
        worst = worst.max(-min);
    }
    Ok(SuiteReport::new("sgasp_shrinkage", cases, worst, 1e-10))
}

/// An S-GaSP with zero scaling parameter against the GaSP, across the
/// likelihood, the discrepancy posterior and every prediction.
pub fn zero_lambda_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(1.0);
    for _ in 0..cases {
        let n = rng.random_range(2..=12);
        let k = rng.random_range(1..=3);
        let RandomInstance { problem, state } = random_instance(rng.random(), n, k, DiscrepancyMode::Gasp, rng.random())?;
        let mut zero = problem.clone();
        zero.spec.discrepancy = DiscrepancyMode::Sgasp { lambda_z: 0.0 };
        worst = worst.max(rel(joint_marginal(&problem, &state)?, joint_marginal(&zero, &state)?));
        let (ma, ca) = posterior_discrepancy(&problem, &state)?;
        let (mb, cb) = posterior_discrepancy(&zero, &state)?;
        worst = worst.max((ma - mb).amax()).max((ca - cb).amax());
        let delta = Workspace::new(&problem, &state)?.draw_delta(&mut rng);
        let pa = Predictor::new(&problem, &state, &delta)?;
        let pb = Predictor::new(&zero, &state, &delta)?;
        let xs: Vec<f64> = (0..problem.dim()).map(|_| rng.random::<f64>()).collect();
        for l in 0..k {
            for (a, b) in [
                (pa.discrepancy(&xs)?, pb.discrepancy(&xs)?),
                (pa.field(l, &xs)?, pb.field(l, &xs)?),
                (pa.reality(l, &xs)?, pb.reality(l, &xs)?),
            ] {
                worst = worst.max(rel(a.mean, b.mean)).max(rel(a.variance, b.variance));
            }
        }
    }
    Ok(SuiteReport::new("sgasp_zero_lambda_is_gasp", cases, worst, 1e-12))
}

/// Tridiagonal AR(1) inverse times the exponential correlation on an
/// equally spaced grid.
pub fn ar1_suite() -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (n, gamma) in [(2, 0.1), (10, 0.5), (50, 0.1), (200, 0.02)] {
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        let r = dense_correlation(&KernelSpec::new(KernelFamily::Exponential, vec![1.0 / gamma])?, &x, &x)?;
        let rho = (-1.0 / ((n - 1) as f64 * gamma)).exp();
        let prod = r * ar1_inverse(n, rho)?;
        worst = worst.max((prod - DMatrix::<f64>::identity(n, n)).amax());
        cases += 1;
    }
    Ok(SuiteReport::new("ar1_inverse", cases, worst, 1e-10))
}

/// Dense density under an affine change of variables.
pub fn change_of_variables_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let m = 5;
        let g = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let cov = &g * g.transpose() + DMatrix::<f64>::identity(m, m);
        let a = DMatrix::from_fn(m, m, |i, j| if i == j { 2.0 } else { 0.0 } + rng.random_range(-0.5..0.5));
        let b = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let mean = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let base = dense_mvn_logpdf(&y, &mean, &cov)?;
        let moved = dense_mvn_logpdf(&(&a * &y + &b), &(&a * &mean + &b), &(&a * &cov * a.transpose()))?;
        worst = worst.max((moved + a.determinant().abs().ln() - base).abs());
    }
    Ok(SuiteReport::new("mvn_change_of_variables", cases, worst, 1e-9))
}

/// Every suite at its default size.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        joint_marginal_suite(seed, 100)?,
        decomposition_suite(seed.wrapping_add(1), 100)?,
        prediction_suite(seed.wrapping_add(2), 50)?,
        sgasp_shrinkage_suite(seed.wrapping_add(3), 50)?,
        zero_lambda_suite(seed.wrapping_add(4), 20)?,
        ar1_suite()?,
        change_of_variables_suite(seed.wrapping_add(5), 20)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all(11).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }
}
