use mscal::discrepancy::{default_lambda_z, DiscrepancyMode};
use mscal::kernels::{build_correlation_matrix, KernelSpec};
use mscal::likelihood::{
    aggregated_marginal_full, aggregated_marginal_nobias, decomposition_check, joint_marginal, posterior_discrepancy,
    ParameterState, Problem, Workspace,
};
use mscal::verify::{
    dense_condition, dense_correlation, dense_joint_moments, dense_mvn_logpdf, dense_source_covariance, random_instance,
    stacked_observations, RandomInstance,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn modes(n: usize) -> [DiscrepancyMode; 2] {
    [
        DiscrepancyMode::Gasp,
        DiscrepancyMode::Sgasp {
            lambda_z: default_lambda_z(n).unwrap(),
        },
    ]
}

fn instance(seed: u64, n: usize, k: usize, mode: DiscrepancyMode, bias: bool) -> RandomInstance {
    random_instance(seed, n, k, mode, bias).unwrap()
}

fn dense_joint(problem: &Problem, state: &ParameterState) -> f64 {
    let (mean, cov) = dense_joint_moments(problem, state).unwrap();
    dense_mvn_logpdf(&stacked_observations(problem), &mean, &cov).unwrap()
}

#[test]
fn joint_marginal_matches_dense_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for seed in 0..60 {
        let n = rng.random_range(1..=15);
        let k = rng.random_range(1..=4);
        for mode in modes(n) {
            for bias in [true, false] {
                let RandomInstance { problem, state } = instance(seed, n, k, mode, bias);
                let fast = joint_marginal(&problem, &state).unwrap();
                let dense = dense_joint(&problem, &state);
                assert!(
                    (fast - dense).abs() < 1e-8,
                    "seed {seed} n {n} k {k} {mode:?} bias {bias}: {fast} vs {dense}"
                );
            }
        }
    }
}

#[test]
fn source_order_does_not_matter() {
    for seed in 0..10 {
        let RandomInstance { problem, state } = instance(seed, 9, 3, DiscrepancyMode::Gasp, true);
        let base = joint_marginal(&problem, &state).unwrap();
        let mut p2 = problem.clone();
        let mut s2 = state.clone();
        p2.data.sources.reverse();
        s2.sources.reverse();
        let swapped = joint_marginal(&p2, &s2).unwrap();
        assert!((base - swapped).abs() < 1e-10);
    }
}

#[test]
fn posterior_discrepancy_matches_bayes_rule() {
    for seed in 0..10 {
        for mode in modes(8) {
            let RandomInstance { problem, state } = instance(100 + seed, 8, 3, mode, true);
            let (mean, cov) = posterior_discrepancy(&problem, &state).unwrap();
            // joint of (delta, y_1..y_k) and condition on y
            let n = 8;
            let k = 3;
            let (ymean, ycov) = dense_joint_moments(&problem, &state).unwrap();
            let d = ycov.view((0, n), (n, n)).into_owned();
            let mut joint_mean = DVector::zeros(n + n * k);
            joint_mean.rows_mut(n, n * k).copy_from(&ymean);
            let mut joint = DMatrix::zeros(n + n * k, n + n * k);
            let tau2_d = mscal::verify::dense_discrepancy_correlation(&problem, &state).unwrap() * state.tau2;
            joint.view_mut((0, 0), (n, n)).copy_from(&tau2_d);
            for l in 0..k {
                joint.view_mut((0, n + l * n), (n, n)).copy_from(&tau2_d);
                joint.view_mut((n + l * n, 0), (n, n)).copy_from(&tau2_d);
            }
            joint.view_mut((n, n), (n * k, n * k)).copy_from(&ycov);
            assert!((&d - &tau2_d).amax() < 1e-12);
            let observed: Vec<usize> = (n..n + n * k).collect();
            let (m_ref, c_ref) = dense_condition(&joint_mean, &joint, &observed, &stacked_observations(&problem)).unwrap();
            assert!((&mean - &m_ref).amax() < 1e-9, "seed {seed}: mean gap {}", (&mean - &m_ref).amax());
            assert!((&cov - &c_ref).amax() < 1e-9, "seed {seed}: cov gap {}", (&cov - &c_ref).amax());
        }
    }
}

#[test]
fn discrepancy_posterior_limits() {
    let RandomInstance { problem, mut state } = instance(7, 10, 2, DiscrepancyMode::Gasp, true);
    state.tau2 = 1e-12;
    let (mean, _) = posterior_discrepancy(&problem, &state).unwrap();
    assert!(mean.norm() < 1e-6);

    // one source with negligible covariance: the data pin down the discrepancy
    let RandomInstance { problem, mut state } = instance(8, 10, 1, DiscrepancyMode::Gasp, false);
    state.sources[0].eta = 1e-10 / state.tau2;
    let (mean, _) = posterior_discrepancy(&problem, &state).unwrap();
    let f = problem.model_outputs(&state.theta).unwrap();
    let resid = &problem.data.sources[0].outputs - &f[0] - DVector::from_element(10, state.sources[0].mu);
    assert!((mean - resid).amax() < 1e-4);
}

#[test]
fn aggregated_full_reduces_to_joint_for_one_source() {
    for seed in 0..10 {
        for bias in [true, false] {
            let RandomInstance { problem, state } = instance(200 + seed, 12, 1, DiscrepancyMode::Gasp, bias);
            let a = aggregated_marginal_full(&problem, &state).unwrap();
            let j = joint_marginal(&problem, &state).unwrap();
            assert!((a - j).abs() < 1e-10);
        }
    }
}

#[test]
fn aggregated_full_matches_dense_with_identical_sources() {
    let RandomInstance { problem, mut state } = instance(31, 10, 3, DiscrepancyMode::Gasp, true);
    let first = state.sources[0].clone();
    for s in &mut state.sources {
        *s = first.clone();
    }
    let k = 3.0;
    let s = dense_source_covariance(&problem, &state, 0).unwrap();
    let d = mscal::verify::dense_discrepancy_correlation(&problem, &state).unwrap();
    let cov = s / k + d * state.tau2;
    let f = &problem.model_outputs(&state.theta).unwrap()[0];
    let ybar = mscal::data::stack_sources(&problem.data).unwrap().outputs;
    let mean = f + DVector::from_element(10, first.mu);
    let want = dense_mvn_logpdf(&ybar, &mean, &cov).unwrap();
    assert!((aggregated_marginal_full(&problem, &state).unwrap() - want).abs() < 1e-10);
}

#[test]
fn aggregated_nobias_cases() {
    let x = DMatrix::from_fn(6, 1, |i, _| i as f64 / 5.0);
    let spec = KernelSpec::new(mscal::kernels::KernelFamily::Matern52, vec![4.0]).unwrap();
    let r = build_correlation_matrix(&spec, &x).unwrap();
    let ybar = DVector::from_vec(vec![0.3, 0.1, -0.2, 0.5, 0.0, 0.9]);
    let f = DVector::from_element(6, 0.1);

    // no discrepancy: independent normals with variance sigma2_0 / k
    let v = aggregated_marginal_nobias(&ybar, &f, 0.2, 0.8, 4, 0.0, &r).unwrap();
    let s = 0.2;
    let want: f64 = ybar
        .iter()
        .map(|y| -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (y - 0.3f64).powi(2) / s))
        .sum();
    assert!((v - want).abs() < 1e-12);

    // many sources: the noise averages out
    let big = aggregated_marginal_nobias(&ybar, &f, 0.2, 0.8, 1_000_000_000, 1.3, &r).unwrap();
    let limit = dense_mvn_logpdf(&ybar, &(&f + DVector::from_element(6, 0.2)), &(r.entries() * 1.3)).unwrap();
    assert!((big - limit).abs() < 1e-6);

    // one point
    let x1 = DMatrix::from_element(1, 1, 0.0);
    let r1 = build_correlation_matrix(&spec, &x1).unwrap();
    let v1 = aggregated_marginal_nobias(
        &DVector::from_element(1, 1.0),
        &DVector::from_element(1, 0.25),
        0.25,
        0.6,
        3,
        0.3,
        &r1,
    )
    .unwrap();
    let var: f64 = 0.2 + 0.3;
    let want1 = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.25 / (2.0 * var);
    assert!((v1 - want1).abs() < 1e-14);
}

#[test]
fn aggregated_forms_nest() {
    let RandomInstance { problem, mut state } = instance(41, 9, 4, DiscrepancyMode::Gasp, false);
    for s in &mut state.sources {
        s.eta = 0.3;
        s.mu = 0.15;
    }
    let full = aggregated_marginal_full(&problem, &state).unwrap();
    let ybar = mscal::data::stack_sources(&problem.data).unwrap().outputs;
    let f = &problem.model_outputs(&state.theta).unwrap()[0];
    let d = problem.discrepancy_correlation(&state).unwrap();
    let nb = aggregated_marginal_nobias(&ybar, f, 0.15, 0.3 * state.tau2, 4, state.tau2, &d).unwrap();
    assert!((full - nb).abs() < 1e-10);
}

#[test]
fn full_likelihood_splits_into_stack_plus_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let n = rng.random_range(1..=50);
        let k = rng.random_range(1..=10);
        let RandomInstance { problem, .. } = instance(rng.random(), n, k, DiscrepancyMode::Gasp, false);
        let f = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let delta = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let d = decomposition_check(&problem.data, &f, &delta, rng.random_range(-1.0..1.0), rng.random_range(0.01..3.0))
            .unwrap();
        assert!(d.gap().abs() < 1e-9, "gap {}", d.gap());
    }
}

#[test]
fn sgasp_with_zero_lambda_is_gasp() {
    for seed in 0..10 {
        let RandomInstance { problem, state } = instance(300 + seed, 11, 3, DiscrepancyMode::Gasp, true);
        let mut zero = problem.clone();
        zero.spec.discrepancy = DiscrepancyMode::Sgasp { lambda_z: 0.0 };
        let a = joint_marginal(&problem, &state).unwrap();
        let b = joint_marginal(&zero, &state).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        let (ma, ca) = posterior_discrepancy(&problem, &state).unwrap();
        let (mb, cb) = posterior_discrepancy(&zero, &state).unwrap();
        assert!((ma - mb).amax() < 1e-12 && (ca - cb).amax() < 1e-12);
    }
}

#[test]
fn workspace_updates_match_rebuild() {
    let RandomInstance { problem, state } = instance(5, 12, 3, DiscrepancyMode::Sgasp { lambda_z: 40.0 }, true);
    let ws = Workspace::new(&problem, &state).unwrap();
    let mut s = state.clone();
    s.theta[0] += 0.2;
    let ws = ws.update_theta(&problem, &s).unwrap();
    s.sources[1].mu -= 0.3;
    let ws = ws.update_means(&problem, &s);
    s.sources[2].eta *= 1.7;
    s.sources[2].bias.as_mut().unwrap().beta[0] *= 0.8;
    let ws = ws.update_source(&problem, &s, 2).unwrap();
    s.tau2 *= 0.6;
    s.beta_disc[0] *= 1.3;
    let ws = ws.update_discrepancy(&problem, &s).unwrap();
    let fresh = Workspace::new(&problem, &s).unwrap();
    assert!((ws.log_lik() - fresh.log_lik()).abs() < 1e-10);
    assert!((ws.log_lik() - dense_joint(&problem, &s)).abs() < 1e-8);
}

#[test]
fn weighted_sources_match_dense_plus_correction() {
    let RandomInstance { problem, state } = instance(9, 7, 2, DiscrepancyMode::Gasp, true);
    let mut wp = problem.clone();
    let w = DVector::from_vec(vec![1.0, 4.0, 2.0, 9.0, 1.0, 3.0, 5.0]);
    for s in &mut wp.data.sources {
        s.weights = Some(w.clone());
    }
    let fast = joint_marginal(&wp, &state).unwrap();
    let dense = dense_joint(&wp, &state);
    let correction: f64 = (0..2)
        .map(|l| mscal::likelihood::weighting_correction(state.noise_var(l), Some(&w)))
        .sum();
    assert!((fast - dense - correction).abs() < 1e-8);
}

#[test]
fn dense_correlation_agrees_with_builder() {
    let x = DMatrix::from_fn(9, 2, |i, j| ((i * 3 + j * 5) % 7) as f64 / 7.0);
    let spec = KernelSpec::new(mscal::kernels::KernelFamily::Matern52, vec![2.0, 5.0]).unwrap();
    let a = dense_correlation(&spec, &x, &x).unwrap();
    let b = build_correlation_matrix(&spec, &x).unwrap();
    assert!((a - b.entries()).amax() < 1e-15);
}

#[test]
fn tiny_noise_relative_to_discrepancy_stays_accurate() {
    for seed in 0..10 {
        for mode in modes(12) {
            let RandomInstance { problem, mut state } = instance(seed, 12, 1, mode, false);
            state.tau2 = 50.0;
            state.sources[0].eta = 1e-9;
            let fast = joint_marginal(&problem, &state).unwrap();
            let dense = dense_joint(&problem, &state);
            assert!(
                (fast - dense).abs() < 1e-6 * dense.abs().max(1.0),
                "seed {seed} {mode:?}: {fast} vs {dense}"
            );
        }
    }
}
