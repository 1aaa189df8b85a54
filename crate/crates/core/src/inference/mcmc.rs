//! Metropolis-within-Gibbs over parameter blocks, with an exact draw of the
//! discrepancy at the design after every sweep.
//!
//! Every block targets the posterior with the discrepancy and biases
//! integrated out, so the sampled discrepancy never enters an acceptance
//! ratio; it is drawn from its Gaussian conditional and recorded.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::params::{initial_state, model_coords, parse_coords, Coord, ParamLayout, Transform};
use super::prior::{log_prior, PriorSpec};
use crate::error::{domain, Error, Result};
use crate::likelihood::{ParameterState, Problem, Workspace};

const TARGET_ACCEPTANCE: f64 = 0.3;
const ADAPT_WINDOW: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcSettings {
    /// Total sweeps including burn-in.
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Proposal standard deviations on the free scale, by parameter name.
    /// Unlisted parameters get defaults.
    pub proposal_scales: BTreeMap<String, f64>,
    /// Robbins-Monro and per-coordinate scale adaptation during burn-in.
    pub adapt: bool,
    /// Parameter names held at their initial values.
    pub fixed: Vec<String>,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            n_samples: 20_000,
            burn_in: 4_000,
            thin: 10,
            seed: 0,
            proposal_scales: BTreeMap::new(),
            adapt: true,
            fixed: Vec::new(),
        }
    }
}

impl McmcSettings {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_samples {
            return domain(format!("burn-in {} must be below the sample count {}", self.burn_in, self.n_samples));
        }
        if self.thin == 0 {
            return domain("thin must be at least 1");
        }
        if self.proposal_scales.values().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return domain("proposal scales must be positive");
        }
        Ok(())
    }

    pub fn n_retained(&self) -> usize {
        (self.n_samples - self.burn_in).div_ceil(self.thin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BlockKind {
    Theta,
    Means,
    Source(usize),
    Discrepancy,
}

impl BlockKind {
    fn name(&self) -> String {
        match self {
            BlockKind::Theta => "theta".into(),
            BlockKind::Means => "mu".into(),
            BlockKind::Source(l) => format!("source[{}]", l + 1),
            BlockKind::Discrepancy => "discrepancy".into(),
        }
    }

    fn of(c: &Coord) -> Self {
        match *c {
            Coord::Theta(_) => BlockKind::Theta,
            Coord::Mu(_) => BlockKind::Means,
            Coord::Sigma2(l) | Coord::Beta(l, _) | Coord::Eta(l) => BlockKind::Source(l),
            Coord::Tau2 | Coord::BetaDisc(_) => BlockKind::Discrepancy,
        }
    }
}

struct Block {
    kind: BlockKind,
    idx: Vec<usize>,
    log_scale: f64,
    proposed: usize,
    accepted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: String,
    pub proposed: usize,
    pub accepted: usize,
    /// Acceptance rate after burn-in.
    pub rate: f64,
}

#[derive(Clone, Debug)]
pub struct PosteriorSamples {
    /// Every model parameter, fixed ones included.
    pub names: Vec<String>,
    /// One row per retained draw, columns as `names`.
    pub draws: Vec<Vec<f64>>,
    pub log_post: Vec<f64>,
    /// Discrepancy at the design, one per retained draw.
    pub deltas: Vec<DVector<f64>>,
    pub acceptance: Vec<BlockAcceptance>,
    pub seed: u64,
    pub settings: McmcSettings,
    template: ParameterState,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Domain(format!("no parameter named '{name}'")))?;
        Ok(self.draws.iter().map(|r| r[j]).collect())
    }

    /// The parameter state of retained draw `i`.
    pub fn state(&self, i: usize) -> ParameterState {
        let mut s = self.template.clone();
        for (name, v) in self.names.iter().zip(&self.draws[i]) {
            Coord::parse(name).expect("names come from coordinates").set(&mut s, *v);
        }
        s
    }

    /// `(state, delta)` pairs for prediction.
    pub fn draws_with_delta(&self) -> Vec<(ParameterState, DVector<f64>)> {
        (0..self.len()).map(|i| (self.state(i), self.deltas[i].clone())).collect()
    }

    /// One row per retained draw: parameters, then `log_post`.
    pub fn write_chain_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = self.names.clone();
        header.push("log_post".into());
        wtr.write_record(&header)?;
        for (row, lp) in self.draws.iter().zip(&self.log_post) {
            let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
            rec.push(lp.to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// One row per retained draw, columns `delta[1]..delta[n]`.
    pub fn write_delta_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let n = self.deltas.first().map_or(0, |d| d.len());
        wtr.write_record((1..=n).map(|i| format!("delta[{i}]")))?;
        for d in &self.deltas {
            wtr.write_record(d.iter().map(f64::to_string))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn default_scale(problem: &Problem, c: &Coord) -> f64 {
    match *c {
        Coord::Mu(l) => {
            let y = &problem.data.sources[l].outputs;
            let n = y.len() as f64;
            let mean = y.mean();
            let sd = (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            if sd > 0.0 {
                0.1 * sd
            } else {
                0.1
            }
        }
        _ => 0.1,
    }
}

struct Chain<'a> {
    problem: &'a Problem,
    priors: &'a PriorSpec,
    layout: ParamLayout,
    u: Vec<f64>,
    state: ParameterState,
    ws: Workspace,
    log_post: f64,
    log_jac: f64,
}

impl Chain<'_> {
    fn propose(&self, kind: BlockKind, u: Vec<f64>) -> Result<(ParameterState, Workspace, f64)> {
        let state = self.layout.from_free(&self.state, &u);
        let lp = log_prior(self.problem, self.priors, &state)?;
        if lp == f64::NEG_INFINITY {
            return Err(Error::Domain("outside prior support".into()));
        }
        let ws = match kind {
            BlockKind::Theta => self.ws.update_theta(self.problem, &state)?,
            BlockKind::Means => self.ws.update_means(self.problem, &state),
            BlockKind::Source(l) => self.ws.update_source(self.problem, &state, l)?,
            BlockKind::Discrepancy => self.ws.update_discrepancy(self.problem, &state)?,
        };
        let total = ws.log_lik() + lp;
        Ok((state, ws, total))
    }
}

/// Runs one chain from `init` (or the default initial state).
pub fn mcmc_run(
    problem: &Problem,
    priors: &PriorSpec,
    settings: &McmcSettings,
    init: Option<&ParameterState>,
) -> Result<PosteriorSamples> {
    settings.validate()?;
    priors.validate(problem)?;
    let fixed = parse_coords(&settings.fixed)?;
    let layout = ParamLayout::new(problem, &priors.theta_bounds, &fixed, true)?;
    let state = match init {
        Some(s) => {
            s.validate(problem)?;
            s.clone()
        }
        None => initial_state(problem, &priors.theta_bounds)?,
    };
    let u = layout.to_free(&state);
    let ws = Workspace::new(problem, &state).map_err(|e| Error::Initialization(e.to_string()))?;
    let lp0 = log_prior(problem, priors, &state)?;
    let log_post = ws.log_lik() + lp0;
    if !log_post.is_finite() || u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Initialization(format!("log posterior {log_post} at the initial state")));
    }
    for name in settings.proposal_scales.keys() {
        let c = Coord::parse(name)?;
        if !layout.coords.contains(&c) {
            return domain(format!("proposal scale given for '{name}', which is not sampled"));
        }
    }
    let mut base: Vec<f64> = layout
        .coords
        .iter()
        .map(|c| {
            settings
                .proposal_scales
                .get(&c.to_string())
                .copied()
                .unwrap_or_else(|| default_scale(problem, c))
        })
        .collect();
    let mut blocks: Vec<Block> = Vec::new();
    for (i, c) in layout.coords.iter().enumerate() {
        let kind = BlockKind::of(c);
        match blocks.iter_mut().find(|b| b.kind == kind) {
            Some(b) => b.idx.push(i),
            None => blocks.push(Block {
                kind,
                idx: vec![i],
                log_scale: 0.0,
                proposed: 0,
                accepted: 0,
            }),
        }
    }
    let log_jac = layout.log_jacobian(&u);
    let mut chain = Chain {
        problem,
        priors,
        layout,
        u,
        state,
        ws,
        log_post,
        log_jac,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let all = model_coords(problem);
    let mut out = PosteriorSamples {
        names: all.iter().map(|c| c.to_string()).collect(),
        draws: Vec::with_capacity(settings.n_retained()),
        log_post: Vec::with_capacity(settings.n_retained()),
        deltas: Vec::with_capacity(settings.n_retained()),
        acceptance: Vec::new(),
        seed: settings.seed,
        settings: settings.clone(),
        template: chain.state.clone(),
    };
    let mut history: Vec<Vec<f64>> = Vec::new();
    for t in 0..settings.n_samples {
        let burning = t < settings.burn_in;
        if t == settings.burn_in {
            for b in &mut blocks {
                b.proposed = 0;
                b.accepted = 0;
            }
        }
        for b in &mut blocks {
            let step = b.log_scale.exp();
            let mut u = chain.u.clone();
            for &j in &b.idx {
                let z: f64 = rng.sample(StandardNormal);
                u[j] += step * base[j] * z;
            }
            let jac = chain.layout.log_jacobian(&u);
            let log_u: f64 = rng.random::<f64>().ln();
            b.proposed += 1;
            let accepted = match chain.propose(b.kind, u.clone()) {
                Ok((state, ws, lp)) => {
                    let ratio = lp + jac - chain.log_post - chain.log_jac;
                    if lp.is_finite() && log_u < ratio {
                        chain.u = u;
                        chain.state = state;
                        chain.ws = ws;
                        chain.log_post = lp;
                        chain.log_jac = jac;
                        true
                    } else {
                        false
                    }
                }
                Err(e) => {
                    log::debug!("block {} proposal rejected: {e}", b.kind.name());
                    false
                }
            };
            if accepted {
                b.accepted += 1;
            }
            if settings.adapt && burning {
                let a = if accepted { 1.0 } else { 0.0 };
                b.log_scale += (a - TARGET_ACCEPTANCE) / ((t + 1) as f64).powf(0.6);
            }
        }
        let delta = chain.ws.draw_delta(&mut rng);
        if settings.adapt && burning {
            history.push(chain.u.clone());
            if (t + 1) % ADAPT_WINDOW == 0 && t + 1 >= 2 * ADAPT_WINDOW {
                rescale(&mut base, &mut blocks, &history[history.len() / 2..], &chain.layout);
            }
        }
        if !burning && (t - settings.burn_in) % settings.thin == 0 {
            out.draws.push(all.iter().map(|c| c.get(&chain.state)).collect());
            out.log_post.push(chain.log_post);
            out.deltas.push(delta);
        }
    }
    out.acceptance = blocks
        .iter()
        .map(|b| BlockAcceptance {
            block: b.kind.name(),
            proposed: b.proposed,
            accepted: b.accepted,
            rate: if b.proposed == 0 { 0.0 } else { b.accepted as f64 / b.proposed as f64 },
        })
        .collect();
    Ok(out)
}

/// Sets each coordinate's proposal scale to `2.38 / sqrt(d)` times its
/// sample standard deviation over `recent`, and restarts the block scale.
fn rescale(base: &mut [f64], blocks: &mut [Block], recent: &[Vec<f64>], layout: &ParamLayout) {
    let m = recent.len() as f64;
    if m < 2.0 {
        return;
    }
    for b in blocks.iter_mut() {
        let d = b.idx.len() as f64;
        let mut changed = false;
        for &j in &b.idx {
            let mean = recent.iter().map(|u| u[j]).sum::<f64>() / m;
            let var = recent.iter().map(|u| (u[j] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            let sd = var.sqrt();
            let floor = match layout.transforms[j] {
                Transform::Identity => 1e-12 * mean.abs().max(1e-300),
                _ => 1e-6,
            };
            if sd > floor {
                base[j] = 2.38 / d.sqrt() * sd;
                changed = true;
            }
        }
        if changed {
            b.log_scale = 0.0;
        }
    }
}
