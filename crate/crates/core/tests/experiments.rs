use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};

use mscal::discrepancy::DiscrepancyMode;
use mscal::experiments::{
    equally_spaced, example2_data, fit_example2, run_example1, run_example3_replicate, sample_limiting_stack,
    simulate_mogi_images, split_seed, Example1Config, Example2Config, Example3Config, Method, MogiConfig,
};
use mscal::inference::McmcSettings;
use mscal::kernels::{KernelFamily, KernelSpec};
use mscal::likelihood::{joint_marginal, ParameterState, SourceParams};
use mscal::verify::{dense_correlation, limiting_mle_variance};

/// Exact variance of the generalized least squares mean: `tau2 / (1' R^-1 1)`.
fn gls_variance(n: usize, gamma: f64, tau2: f64) -> f64 {
    let spec = KernelSpec::new(KernelFamily::Exponential, vec![1.0 / gamma]).unwrap();
    let x = equally_spaced(n);
    let r = dense_correlation(&spec, &x, &x).unwrap();
    let inv = r.try_inverse().unwrap();
    tau2 / inv.sum()
}

#[test]
fn limiting_stack_draws_have_the_stated_moments() {
    let (n, theta, mu, tau2) = (5, 0.7, -0.2, 1.5);
    let spec = KernelSpec::new(KernelFamily::Exponential, vec![10.0]).unwrap();
    let x = equally_spaced(n);
    let cov = dense_correlation(&spec, &x, &x).unwrap() * tau2;
    let draws = 100_000;
    let mut sum = DVector::zeros(n);
    let mut outer = DMatrix::zeros(n, n);
    for s in 0..draws {
        let y = sample_limiting_stack(n, theta, mu, tau2, &spec, split_seed(9, s)).unwrap();
        outer += &y * y.transpose();
        sum += y;
    }
    let mean = &sum / draws as f64;
    let sample_cov = (outer - &mean * mean.transpose() * draws as f64) / (draws - 1) as f64;
    for i in 0..n {
        let se = (cov[(i, i)] / draws as f64).sqrt();
        assert!((mean[i] - (theta + mu)).abs() < 4.0 * se, "mean {i}: {}", mean[i]);
        for j in 0..n {
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / draws as f64).sqrt();
            assert!(
                (sample_cov[(i, j)] - cov[(i, j)]).abs() < 4.0 * se,
                "cov ({i},{j}): {} vs {}",
                sample_cov[(i, j)],
                cov[(i, j)]
            );
        }
    }
}

#[test]
fn mean_estimator_mse_matches_gls_variance() {
    let cfg = Example1Config {
        n_grid: vec![20, 60],
        reps: 4000,
        ..Example1Config::default()
    };
    for row in run_example1(&cfg).unwrap() {
        let exact = gls_variance(row.n, cfg.gamma, cfg.tau2);
        // The MSE of a mean-zero normal over `reps` draws has relative SE sqrt(2 / reps).
        let se = exact * (2.0 / cfg.reps as f64).sqrt();
        assert!((row.mse - exact).abs() < 4.0 * se, "n={}: {} vs {}", row.n, row.mse, exact);
    }
}

#[test]
fn gls_variance_approaches_the_limit() {
    let limit = limiting_mle_variance(1.0, 0.1).unwrap();
    let gaps: Vec<f64> = [25, 50, 100, 400].iter().map(|&n| (gls_variance(n, 0.1, 1.0) - limit).abs()).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(gaps[3] / limit < 0.005);
}

#[test]
fn zero_discrepancy_variance_gives_zero_error() {
    let cfg = Example1Config {
        n_grid: vec![10],
        reps: 50,
        tau2: 0.0,
        ..Example1Config::default()
    };
    let rows = run_example1(&cfg).unwrap();
    assert_eq!(rows[0].mse, 0.0);
    assert_eq!(rows[0].limit, 0.0);
}

/// Reported fitted values for the two-input toy problem, as
/// (theta, tau2, ranges, noise variance).
const REPORTED_GASP: ([f64; 2], f64, [f64; 2], f64) = ([13.2, 1.90], 132.0, [1.44, 1.8], 1.76e-3);
const REPORTED_SGASP: ([f64; 2], f64, [f64; 2], f64) = ([3.76, 2.01], 354.0, [1.72, 2.13], 1.74e-3);

fn state_from(reported: ([f64; 2], f64, [f64; 2], f64)) -> ParameterState {
    let (theta, tau2, gamma, noise) = reported;
    ParameterState {
        theta: theta.to_vec(),
        tau2,
        beta_disc: gamma.iter().map(|g| 1.0 / g).collect(),
        sources: vec![SourceParams {
            mu: 0.0,
            eta: noise / tau2,
            bias: None,
        }],
    }
}

#[test]
fn toy_fits_dominate_the_reported_estimates() {
    let cfg = Example2Config {
        n_starts: 6,
        holdout: 100,
        ..Example2Config::default()
    };
    let data = example2_data(&cfg).unwrap();
    for (mode, reported) in [
        (DiscrepancyMode::Gasp, REPORTED_GASP),
        (DiscrepancyMode::sgasp_default(cfg.n).unwrap(), REPORTED_SGASP),
    ] {
        let (problem, fit) = fit_example2(&data, mode, &cfg).unwrap();
        let at_reported = joint_marginal(&problem, &state_from(reported)).unwrap();
        let at_fit = joint_marginal(&problem, &fit.state).unwrap();
        assert!((at_fit - fit.log_lik).abs() <= 1e-8 * at_fit.abs().max(1.0));
        assert!(
            at_fit >= at_reported - 1e-6,
            "fit {at_fit} below reported point {at_reported}"
        );
    }
}

#[test]
fn toy_data_follow_the_seeds() {
    let cfg = Example2Config::default();
    let a = example2_data(&cfg).unwrap();
    let b = example2_data(&cfg).unwrap();
    assert_eq!(a.y, b.y);
    assert_eq!(a.holdout_x, b.holdout_x);
    let c = example2_data(&Example2Config {
        noise_seed: 99,
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(a.x, c.x);
    assert_ne!(a.y, c.y);
    assert!(a.x.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn small_multi_source_replicate_reports_sane_metrics() {
    let cfg = Example3Config {
        k: 2,
        n: 25,
        replicates: 1,
        mcmc: McmcSettings {
            n_samples: 600,
            burn_in: 200,
            thin: 2,
            ..McmcSettings::default()
        },
        ..Example3Config::default()
    };
    let rows = run_example3_replicate(&cfg, 0).unwrap();
    assert_eq!(rows.iter().map(|r| r.method).collect::<Vec<_>>(), Method::ALL.to_vec());
    for r in &rows {
        for v in [r.mse_bias, r.mse_discrepancy, r.mse_reality, r.se_theta] {
            assert!(v.is_finite() && v >= 0.0, "{r:?}");
        }
        assert!(r.theta_lower <= r.theta_median && r.theta_median <= r.theta_upper);
        assert_eq!(r.covers_theta, r.theta_lower <= FRAC_PI_2 && FRAC_PI_2 <= r.theta_upper);
        assert!((0.0..=1.0).contains(&r.min_acceptance));
    }
    assert_eq!(rows, run_example3_replicate(&cfg, 0).unwrap());
}

#[test]
fn mogi_images_carry_their_looks() {
    let cfg = MogiConfig::default();
    let imgs = simulate_mogi_images(&cfg, 4).unwrap();
    assert_eq!(imgs.len(), cfg.looks.len());
    for (img, look) in imgs.iter().zip(&cfg.looks) {
        assert_eq!((img.rows(), img.cols()), (cfg.rows, cfg.cols));
        let got = img.look.expect("look vector set").components();
        let norm = look.iter().map(|c| c * c).sum::<f64>().sqrt();
        for j in 0..3 {
            assert!((got[j] - look[j] / norm).abs() < 1e-15);
        }
        assert!(img.values.iter().all(|v| v.is_finite()));
    }
    assert_ne!(imgs[0].values, imgs[1].values);
}
