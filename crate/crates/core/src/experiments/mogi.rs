//! Synthetic multi-look deformation scenario around a Mogi source.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{draw_gasp, split_seed};
use crate::data::{uniform_subsample_aligned, GridImage, MultiSourceDataset};
use crate::discrepancy::DiscrepancyMode;
use crate::error::{domain, Result};
use crate::forward::{ForwardModel, LookVector, Mogi, MogiParams};
use crate::inference::{mcmc_run, summarize, McmcSettings, PriorSpec};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::likelihood::{ModelSpec, Problem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MogiConfig {
    pub rows: usize,
    pub cols: usize,
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
    /// East, north, depth (m), volume rate (m^3/s), Poisson ratio.
    pub theta: [f64; 5],
    /// One look vector per source; normalized before use.
    pub looks: Vec<[f64; 3]>,
    pub bias_sd: f64,
    pub bias_range: f64,
    /// Standard deviation of the per-image reference offset.
    pub offset_sd: f64,
    pub noise_sd: f64,
    /// Pixels kept per image.
    pub m: usize,
    pub replicates: usize,
    pub seed: u64,
    pub mcmc: McmcSettings,
}

impl Default for MogiConfig {
    fn default() -> Self {
        MogiConfig {
            rows: 20,
            cols: 20,
            origin: [-3750.0, -4250.0],
            spacing: [500.0, 500.0],
            theta: [1000.0, 500.0, 2500.0, 0.04, 0.28],
            looks: vec![
                [-0.62, -0.11, 0.77],
                [0.62, -0.11, 0.77],
                [-0.38, -0.07, 0.92],
                [0.38, -0.07, 0.92],
                [0.0, 0.0, 1.0],
            ],
            bias_sd: 0.004,
            bias_range: 3000.0,
            offset_sd: 0.005,
            noise_sd: 0.002,
            m: 100,
            replicates: 10,
            seed: 1,
            mcmc: McmcSettings {
                n_samples: 5000,
                burn_in: 1000,
                thin: 5,
                ..McmcSettings::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MogiRow {
    pub replicate: usize,
    pub east_median: f64,
    pub north_median: f64,
    pub depth_true: f64,
    pub depth_median: f64,
    pub depth_lower: f64,
    pub depth_upper: f64,
    pub depth_rel_err: f64,
    pub volume_true: f64,
    pub volume_median: f64,
    pub volume_lower: f64,
    pub volume_upper: f64,
    pub volume_rel_err: f64,
    pub poisson_median: f64,
    pub min_acceptance: f64,
}

/// Full images for every look: Mogi LoS velocity plus a GaSP bias, a
/// constant offset and white noise.
pub fn simulate_mogi_images(cfg: &MogiConfig, seed: u64) -> Result<Vec<GridImage>> {
    if cfg.looks.is_empty() || cfg.rows == 0 || cfg.cols == 0 {
        return domain("need at least one look and a non-empty grid");
    }
    if !MogiParams::from_slice(&cfg.theta)?.within_bounds() {
        return domain("true source parameters lie outside the prior box");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (cfg.rows, cfg.cols);
    let coords = DMatrix::from_fn(rows * cols, 2, |i, j| {
        let (r, c) = (i / cols, i % cols);
        [cfg.origin[0] + c as f64 * cfg.spacing[0], cfg.origin[1] + r as f64 * cfg.spacing[1]][j]
    });
    let kernel = KernelSpec::new(KernelFamily::Matern52, vec![1.0 / cfg.bias_range; 2])?;
    let mut images = Vec::with_capacity(cfg.looks.len());
    for v in &cfg.looks {
        let look = LookVector::normalized(*v)?;
        let signal = Mogi.evaluate(&cfg.theta, &coords, Some(&look))?;
        let bias = draw_gasp(&mut rng, &kernel, &coords, cfg.bias_sd * cfg.bias_sd)?;
        let offset = cfg.offset_sd * rng.sample::<f64, _>(StandardNormal);
        let noise = DVector::from_fn(rows * cols, |_, _| cfg.noise_sd * rng.sample::<f64, _>(StandardNormal));
        let total = signal + bias + noise;
        let values = DMatrix::from_fn(rows, cols, |r, c| total[r * cols + c] + offset);
        let mut img = GridImage::new(cfg.origin, cfg.spacing, values)?;
        img.look = Some(look);
        images.push(img);
    }
    Ok(images)
}

/// S-GaSP discrepancy, Matérn bias per source and free source means.
pub fn mogi_problem(data: MultiSourceDataset) -> Result<Problem> {
    let spec = ModelSpec {
        discrepancy: DiscrepancyMode::sgasp_default(data.n())?,
        discrepancy_family: KernelFamily::Matern52,
        bias_family: Some(KernelFamily::Matern52),
        fit_mean: true,
    };
    Problem::new(data, Arc::new(Mogi), spec)
}

/// Replicate `r` with seed `s = split_seed(seed, r)`: images from stream 0
/// of `s`, pixel selection from stream 1, the chain from stream 2.
pub fn run_mogi_replicate(cfg: &MogiConfig, r: usize) -> Result<MogiRow> {
    let rep = split_seed(cfg.seed, r as u64);
    let images = simulate_mogi_images(cfg, split_seed(rep, 0))?;
    let data = uniform_subsample_aligned(&images, cfg.m, split_seed(rep, 1))?;
    let problem = mogi_problem(data)?;
    let priors = PriorSpec::default_for(&problem)?;
    let settings = McmcSettings {
        seed: split_seed(rep, 2),
        ..cfg.mcmc.clone()
    };
    let samples = mcmc_run(&problem, &priors, &settings, None)?;
    let s = |j: usize| summarize(&format!("theta[{j}]"), &samples.column(&format!("theta[{j}]"))?);
    let (east, north, depth, volume, poisson) = (s(1)?, s(2)?, s(3)?, s(4)?, s(5)?);
    let rel = |est: f64, truth: f64| ((est - truth) / truth).abs();
    Ok(MogiRow {
        replicate: r,
        east_median: east.median,
        north_median: north.median,
        depth_true: cfg.theta[2],
        depth_median: depth.median,
        depth_lower: depth.lower,
        depth_upper: depth.upper,
        depth_rel_err: rel(depth.median, cfg.theta[2]),
        volume_true: cfg.theta[3],
        volume_median: volume.median,
        volume_lower: volume.lower,
        volume_upper: volume.upper,
        volume_rel_err: rel(volume.median, cfg.theta[3]),
        poisson_median: poisson.median,
        min_acceptance: samples
            .acceptance
            .iter()
            .filter(|a| a.proposed > 0)
            .map(|a| a.rate)
            .fold(f64::INFINITY, f64::min),
    })
}

pub fn run_mogi(cfg: &MogiConfig) -> Result<Vec<MogiRow>> {
    if cfg.replicates == 0 {
        return domain("need at least one replicate");
    }
    (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_mogi_replicate(cfg, r))
        .collect()
}
