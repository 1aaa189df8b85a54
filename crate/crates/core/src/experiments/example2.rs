//! GaSP against S-GaSP calibration of a misspecified two-parameter model.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{maximin_lhs, split_seed};
use crate::data::{MultiSourceDataset, SourceObservations};
use crate::discrepancy::DiscrepancyMode;
use crate::error::{domain, Result};
use crate::forward::{lim_reality, toy_trig2d, ForwardModel, ToyTrig2d};
use crate::inference::{mle_fit, MleResult, MleSettings};
use crate::kernels::KernelFamily;
use crate::likelihood::{ModelSpec, Problem, Workspace};
use crate::predict::{evaluate_mse, Predictor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Example2Config {
    pub n: usize,
    pub noise_sd: f64,
    /// Random Latin hypercubes screened for the design.
    pub candidates: usize,
    pub holdout: usize,
    pub n_starts: usize,
    pub design_seed: u64,
    pub noise_seed: u64,
}

impl Default for Example2Config {
    fn default() -> Self {
        Example2Config {
            n: 30,
            noise_sd: 0.05,
            candidates: 200,
            holdout: 1000,
            n_starts: 10,
            design_seed: 1,
            noise_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example2Row {
    pub replicate: usize,
    pub model: String,
    pub mse_fm: f64,
    pub mse_fm_delta: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub tau2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub sigma2_0: f64,
    pub log_lik: f64,
}

#[derive(Clone, Debug)]
pub struct Example2Data {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub holdout_x: DMatrix<f64>,
    pub holdout_truth: DVector<f64>,
}

fn reality_at(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |i, _| lim_reality([x[(i, 0)], x[(i, 1)]]))
}

/// Design, noisy field data and held-out reality. The held-out points use
/// `split_seed(design_seed, 1)`.
pub fn example2_data(cfg: &Example2Config) -> Result<Example2Data> {
    if cfg.n < 2 || cfg.holdout == 0 || cfg.candidates == 0 {
        return domain("need n >= 2, a held-out set and at least one candidate design");
    }
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| crate::error::Error::Domain(e.to_string()))?;
    let x = maximin_lhs(cfg.n, 2, cfg.candidates, cfg.design_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
    let mut y = reality_at(&x);
    for v in y.iter_mut() {
        *v += noise.sample(&mut rng);
    }
    let mut hold = ChaCha8Rng::seed_from_u64(split_seed(cfg.design_seed, 1));
    let holdout_x = DMatrix::from_fn(cfg.holdout, 2, |_, _| hold.random::<f64>());
    let holdout_truth = reality_at(&holdout_x);
    Ok(Example2Data {
        x,
        y,
        holdout_x,
        holdout_truth,
    })
}

/// Fits the single-source, no-bias model with the given discrepancy by MLE.
pub fn fit_example2(data: &Example2Data, mode: DiscrepancyMode, cfg: &Example2Config) -> Result<(Problem, MleResult)> {
    let obs = SourceObservations::new(data.x.clone(), data.y.clone(), "field")?;
    let spec = ModelSpec {
        discrepancy: mode,
        discrepancy_family: KernelFamily::Matern52,
        bias_family: None,
        fit_mean: false,
    };
    let problem = Problem::new(MultiSourceDataset::new(vec![obs])?, Arc::new(ToyTrig2d), spec)?;
    let settings = MleSettings {
        n_starts: cfg.n_starts,
        seed: cfg.noise_seed,
        ..MleSettings::default()
    };
    let fit = mle_fit(&problem, &ToyTrig2d.default_bounds(), &settings, None)?;
    Ok((problem, fit))
}

fn row(name: &str, data: &Example2Data, problem: &Problem, fit: &MleResult) -> Result<Example2Row> {
    let s = &fit.state;
    let theta = [s.theta[0], s.theta[1]];
    let delta = Workspace::new(problem, s)?.delta_mean();
    let pred = Predictor::new(problem, s, &delta)?;
    let xs = &data.holdout_x;
    let mut fm = Vec::with_capacity(xs.nrows());
    let mut fm_delta = Vec::with_capacity(xs.nrows());
    for i in 0..xs.nrows() {
        let f = toy_trig2d(theta, [xs[(i, 0)], xs[(i, 1)]]);
        fm.push(f);
        fm_delta.push(f + pred.discrepancy(&[xs[(i, 0)], xs[(i, 1)]])?.mean);
    }
    let truth = data.holdout_truth.as_slice();
    Ok(Example2Row {
        replicate: 0,
        model: name.into(),
        mse_fm: evaluate_mse(&fm, truth)?,
        mse_fm_delta: evaluate_mse(&fm_delta, truth)?,
        theta1: theta[0],
        theta2: theta[1],
        tau2: s.tau2,
        gamma1: 1.0 / s.beta_disc[0],
        gamma2: 1.0 / s.beta_disc[1],
        sigma2_0: s.noise_var(0),
        log_lik: fit.log_lik,
    })
}

/// One replication: rows for GaSP and S-GaSP, in that order.
pub fn run_example2(cfg: &Example2Config) -> Result<Vec<Example2Row>> {
    let data = example2_data(cfg)?;
    let mut rows = Vec::with_capacity(2);
    for (name, mode) in [
        ("gasp", DiscrepancyMode::Gasp),
        ("sgasp", DiscrepancyMode::sgasp_default(cfg.n)?),
    ] {
        let (problem, fit) = fit_example2(&data, mode, cfg)?;
        rows.push(row(name, &data, &problem, &fit)?);
    }
    Ok(rows)
}

/// Replicated runs; replicate `r` uses design seed `split_seed(seed, 2r)`
/// and noise seed `split_seed(seed, 2r + 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Example2Study {
    pub replicates: usize,
    pub seed: u64,
    pub base: Example2Config,
}

impl Default for Example2Study {
    fn default() -> Self {
        Example2Study {
            replicates: 5,
            seed: 1,
            base: Example2Config::default(),
        }
    }
}

pub fn run_example2_study(study: &Example2Study) -> Result<Vec<Example2Row>> {
    if study.replicates == 0 {
        return domain("need at least one replicate");
    }
    let per: Vec<Vec<Example2Row>> = (0..study.replicates)
        .into_par_iter()
        .map(|r| {
            let cfg = Example2Config {
                design_seed: split_seed(study.seed, 2 * r as u64),
                noise_seed: split_seed(study.seed, 2 * r as u64 + 1),
                ..study.base.clone()
            };
            let mut rows = run_example2(&cfg)?;
            for row in rows.iter_mut() {
                row.replicate = r;
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}
