//! Mean-parameter MLE under the limiting distribution of stacked data.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{equally_spaced, split_seed};
use crate::error::{domain, Result};
use crate::inference::closed_form_mean_mle;
use crate::kernels::{build_correlation_matrix, CorrelationMatrix, KernelFamily, KernelSpec};
use crate::verify::limiting_mle_variance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Example1Config {
    pub n_grid: Vec<usize>,
    pub reps: usize,
    /// Range of the exponential kernel.
    pub gamma: f64,
    pub tau2: f64,
    pub theta: f64,
    pub seed: u64,
}

impl Default for Example1Config {
    fn default() -> Self {
        Example1Config {
            n_grid: vec![25, 50, 100, 200],
            reps: 10_000,
            gamma: 0.1,
            tau2: 1.0,
            theta: 0.0,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example1Row {
    pub n: usize,
    pub reps: usize,
    pub gamma: f64,
    pub tau2: f64,
    pub mse: f64,
    /// Limiting variance `2 tau2 gamma / (2 gamma + 1)`.
    pub limit: f64,
}

fn draw(r: &CorrelationMatrix, mean: f64, tau2: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let n = r.dim();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut y = r.factor().lower() * z * tau2.sqrt();
    y.add_scalar_mut(mean);
    y
}

/// One draw of `N((theta + mu) 1, tau2 R)` on `n` equally spaced points of `[0, 1]`.
pub fn sample_limiting_stack(n: usize, theta: f64, mu: f64, tau2: f64, kernel: &KernelSpec, seed: u64) -> Result<DVector<f64>> {
    if !(tau2 >= 0.0) {
        return domain("tau2 must be nonnegative");
    }
    let r = build_correlation_matrix(kernel, &equally_spaced(n))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw(&r, theta + mu, tau2, &mut rng))
}

/// Monte Carlo MSE of the mean MLE for each `n`; grid point `j` uses seed
/// `split_seed(seed, j)`.
pub fn run_example1(cfg: &Example1Config) -> Result<Vec<Example1Row>> {
    if cfg.reps == 0 {
        return domain("need at least one replication");
    }
    if !(cfg.gamma > 0.0 && cfg.tau2 >= 0.0) {
        return domain("gamma must be positive and tau2 nonnegative");
    }
    let kernel = KernelSpec::new(KernelFamily::Exponential, vec![1.0 / cfg.gamma])?;
    let limit = if cfg.tau2 > 0.0 {
        limiting_mle_variance(cfg.tau2, cfg.gamma)?
    } else {
        0.0
    };
    cfg.n_grid
        .par_iter()
        .enumerate()
        .map(|(j, &n)| {
            if n < 2 {
                return domain("each n must be at least 2");
            }
            let r = build_correlation_matrix(&kernel, &equally_spaced(n))?;
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, j as u64));
            let mut sse = 0.0;
            for _ in 0..cfg.reps {
                let y = draw(&r, cfg.theta, cfg.tau2, &mut rng);
                let err = closed_form_mean_mle(&y, &r)? - cfg.theta;
                sse += err * err;
            }
            Ok(Example1Row {
                n,
                reps: cfg.reps,
                gamma: cfg.gamma,
                tau2: cfg.tau2,
                mse: sse / cfg.reps as f64,
                limit,
            })
        })
        .collect()
}
