//! Separating shared discrepancy from per-source bias with full and stacked data.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{draw_gasp, equally_spaced, split_seed};
use crate::data::{stack_sources, MultiSourceDataset, SourceObservations};
use crate::discrepancy::DiscrepancyMode;
use crate::error::{domain, Result};
use crate::forward::ToySine;
use crate::inference::{mcmc_run, summarize, McmcSettings, PosteriorSamples, PriorSpec};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::likelihood::{ModelSpec, Problem};
use crate::predict::{evaluate_mse, Predictor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Example3Config {
    pub k: usize,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub theta: f64,
    /// Standard deviation and range of the discrepancy.
    pub tau: f64,
    pub gamma: f64,
    /// Bias standard deviations run linearly from the first to the second value.
    pub bias_sd: (f64, f64),
    pub gamma_bias: f64,
    pub noise_sd: f64,
    pub kernel: KernelFamily,
    pub mcmc: McmcSettings,
}

impl Default for Example3Config {
    fn default() -> Self {
        Example3Config {
            k: 5,
            n: 100,
            replicates: 20,
            seed: 1,
            theta: FRAC_PI_2,
            tau: 0.2,
            gamma: 0.1,
            bias_sd: (0.4, 0.8),
            gamma_bias: 0.02,
            noise_sd: 0.05,
            kernel: KernelFamily::Matern52,
            mcmc: McmcSettings {
                n_samples: 5000,
                burn_in: 1000,
                thin: 5,
                ..McmcSettings::default()
            },
        }
    }
}

impl Example3Config {
    /// Chain lengths and replicate count of the full-size study.
    pub fn full_scale(mut self) -> Self {
        self.replicates = 200;
        self.mcmc.n_samples = 20_000;
        self.mcmc.burn_in = 4000;
        self.mcmc.thin = 10;
        self
    }

    fn bias_sd(&self, l: usize) -> f64 {
        if self.k == 1 {
            return self.bias_sd.0;
        }
        self.bias_sd.0 + (self.bias_sd.1 - self.bias_sd.0) * l as f64 / (self.k - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GaspFull,
    SgaspFull,
    GaspStack,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::GaspFull, Method::SgaspFull, Method::GaspStack];

    pub fn name(self) -> &'static str {
        match self {
            Method::GaspFull => "gasp_full",
            Method::SgaspFull => "sgasp_full",
            Method::GaspStack => "gasp_stack",
        }
    }
}

/// Simulated truth and observations of one replicate.
#[derive(Clone, Debug)]
pub struct Example3Truth {
    pub x: DMatrix<f64>,
    pub theta: f64,
    pub delta: DVector<f64>,
    pub biases: Vec<DVector<f64>>,
    pub ys: Vec<DVector<f64>>,
}

impl Example3Truth {
    pub fn reality(&self) -> DVector<f64> {
        self.x.column(0).map(|x| (self.theta * x).sin()) + &self.delta
    }

    pub fn dataset(&self) -> Result<MultiSourceDataset> {
        let sources = self
            .ys
            .iter()
            .enumerate()
            .map(|(l, y)| SourceObservations::new(self.x.clone(), y.clone(), format!("source{}", l + 1)))
            .collect::<Result<Vec<_>>>()?;
        MultiSourceDataset::new(sources)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example3Row {
    pub replicate: usize,
    pub method: Method,
    pub mse_bias: f64,
    pub mse_discrepancy: f64,
    pub mse_reality: f64,
    pub se_theta: f64,
    pub theta_mean: f64,
    pub theta_median: f64,
    pub theta_lower: f64,
    pub theta_upper: f64,
    pub covers_theta: bool,
    pub min_acceptance: f64,
}

pub fn simulate_example3(cfg: &Example3Config, seed: u64) -> Result<Example3Truth> {
    if cfg.k < 2 || cfg.n < 2 {
        return domain("need at least two sources and two inputs");
    }
    let x = equally_spaced(cfg.n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disc = KernelSpec::new(cfg.kernel.clone(), vec![1.0 / cfg.gamma])?;
    let delta = draw_gasp(&mut rng, &disc, &x, cfg.tau * cfg.tau)?;
    let bias_kernel = KernelSpec::new(cfg.kernel.clone(), vec![1.0 / cfg.gamma_bias])?;
    let f = x.column(0).map(|v| (cfg.theta * v).sin());
    let mut biases = Vec::with_capacity(cfg.k);
    let mut ys = Vec::with_capacity(cfg.k);
    for l in 0..cfg.k {
        let sd = cfg.bias_sd(l);
        let b = draw_gasp(&mut rng, &bias_kernel, &x, sd * sd)?;
        let noise = DVector::from_fn(cfg.n, |_, _| cfg.noise_sd * rng.sample::<f64, _>(StandardNormal));
        ys.push(&f + &delta + &b + noise);
        biases.push(b);
    }
    Ok(Example3Truth {
        x,
        theta: cfg.theta,
        delta,
        biases,
        ys,
    })
}

fn problem_for(truth: &Example3Truth, method: Method, cfg: &Example3Config) -> Result<Problem> {
    let full = truth.dataset()?;
    let (data, discrepancy, bias_family) = match method {
        Method::GaspFull => (full, DiscrepancyMode::Gasp, Some(cfg.kernel.clone())),
        Method::SgaspFull => (full, DiscrepancyMode::sgasp_default(cfg.n)?, Some(cfg.kernel.clone())),
        Method::GaspStack => (
            MultiSourceDataset::new(vec![stack_sources(&full)?])?,
            DiscrepancyMode::Gasp,
            None,
        ),
    };
    let spec = ModelSpec {
        discrepancy,
        discrepancy_family: cfg.kernel.clone(),
        bias_family,
        fit_mean: false,
    };
    Problem::new(data, Arc::new(ToySine), spec)
}

/// Metrics of one method from its posterior draws. For the stacked method,
/// which has no bias process, source `l` bias is estimated by the residual
/// `y_l - f - delta` at the posterior mean of reality.
pub fn estimate_example3(
    truth: &Example3Truth,
    problem: &Problem,
    samples: &PosteriorSamples,
    method: Method,
    replicate: usize,
) -> Result<Example3Row> {
    if samples.is_empty() {
        return domain("no retained draws");
    }
    let n = truth.x.nrows();
    let k = truth.ys.len();
    let d = samples.len() as f64;
    let mut delta = DVector::zeros(n);
    let mut reality = DVector::zeros(n);
    let mut biases = vec![DVector::zeros(n); k];
    for (state, dl) in samples.draws_with_delta() {
        delta += &dl;
        reality += problem.forward.evaluate(&state.theta, &truth.x, None)? + &dl;
        if problem.spec.has_bias() {
            let pred = Predictor::new(problem, &state, &dl)?;
            for (l, b) in biases.iter_mut().enumerate() {
                *b += pred.bias_at_design(l)?;
            }
        }
    }
    delta /= d;
    reality /= d;
    if problem.spec.has_bias() {
        for b in biases.iter_mut() {
            *b /= d;
        }
    } else {
        for (b, y) in biases.iter_mut().zip(&truth.ys) {
            *b = y - &reality;
        }
    }
    let mut bias_sse = 0.0;
    for (b, t) in biases.iter().zip(&truth.biases) {
        bias_sse += evaluate_mse(b.as_slice(), t.as_slice())?;
    }
    let theta = summarize("theta[1]", &samples.column("theta[1]")?)?;
    let min_acceptance = samples
        .acceptance
        .iter()
        .filter(|a| a.proposed > 0)
        .map(|a| a.rate)
        .fold(f64::INFINITY, f64::min);
    Ok(Example3Row {
        replicate,
        method,
        mse_bias: bias_sse / k as f64,
        mse_discrepancy: evaluate_mse(delta.as_slice(), truth.delta.as_slice())?,
        mse_reality: evaluate_mse(reality.as_slice(), truth.reality().as_slice())?,
        se_theta: (theta.mean - truth.theta).powi(2),
        theta_mean: theta.mean,
        theta_median: theta.median,
        theta_lower: theta.lower,
        theta_upper: theta.upper,
        covers_theta: theta.covers(truth.theta),
        min_acceptance,
    })
}

/// All three methods on replicate `r`. The replicate seed is
/// `split_seed(seed, r)`; the data use its stream 0 and method `m` its
/// stream `m + 1`.
pub fn run_example3_replicate(cfg: &Example3Config, r: usize) -> Result<Vec<Example3Row>> {
    let rep_seed = split_seed(cfg.seed, r as u64);
    let truth = simulate_example3(cfg, split_seed(rep_seed, 0))?;
    let mut rows = Vec::with_capacity(Method::ALL.len());
    for (m, method) in Method::ALL.into_iter().enumerate() {
        let problem = problem_for(&truth, method, cfg)?;
        let priors = PriorSpec::default_for(&problem)?;
        let settings = McmcSettings {
            seed: split_seed(rep_seed, m as u64 + 1),
            ..cfg.mcmc.clone()
        };
        let samples = mcmc_run(&problem, &priors, &settings, None)?;
        rows.push(estimate_example3(&truth, &problem, &samples, method, r)?);
    }
    Ok(rows)
}

/// Every replicate, concurrently; rows ordered by replicate then method.
pub fn run_example3(cfg: &Example3Config) -> Result<Vec<Example3Row>> {
    if cfg.replicates == 0 {
        return domain("need at least one replicate");
    }
    let per: Vec<Vec<Example3Row>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_example3_replicate(cfg, r))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}
