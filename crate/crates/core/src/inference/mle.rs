//! Maximum likelihood by multi-start limited-memory BFGS on transformed
//! coordinates, with central-difference gradients.

use std::collections::VecDeque;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{initial_state, parse_coords, Coord, ParamLayout, Transform};
use crate::error::{domain, Error, Result};
use crate::kernels::CorrelationMatrix;
use crate::likelihood::{joint_marginal, ParameterState, Problem};

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-8;
const PATIENCE: usize = 5;
const MEMORY: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleSettings {
    pub n_starts: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Parameter names held at their starting values.
    pub fixed: Vec<String>,
    /// Optimize log inverse ranges (true) or the inverse ranges themselves.
    pub log_ranges: bool,
    /// Standard deviation of the start perturbations on the free scale.
    pub spread: f64,
}

impl Default for MleSettings {
    fn default() -> Self {
        MleSettings {
            n_starts: 10,
            seed: 0,
            max_iter: 500,
            fixed: Vec::new(),
            log_ranges: true,
            spread: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    pub start: usize,
    pub initial_log_lik: f64,
    pub log_lik: f64,
    /// Log-likelihood after each iteration.
    pub trajectory: Vec<f64>,
    pub converged: bool,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    pub state: ParameterState,
    pub log_lik: f64,
    pub best_start: usize,
    pub starts: Vec<StartTrace>,
}

#[derive(Clone, Debug)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub trajectory: Vec<f64>,
    pub converged: bool,
    pub message: String,
}

fn gradient(f: &impl Fn(&[f64]) -> f64, x: &[f64], fx: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let xi = x[i];
            xp[i] = xi + FD_STEP;
            let up = f(&xp);
            xp[i] = xi - FD_STEP;
            let down = f(&xp);
            xp[i] = xi;
            match (up.is_finite(), down.is_finite()) {
                (true, true) => (up - down) / (2.0 * FD_STEP),
                (true, false) => (up - fx) / FD_STEP,
                (false, true) => (fx - down) / FD_STEP,
                (false, false) => 0.0,
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f`; non-finite values are treated as infeasible and rejected
/// by the line search. Stops when the relative change of `f` stays below
/// `1e-8` for five consecutive iterations.
pub(crate) fn lbfgs(f: impl Fn(&[f64]) -> f64, x0: &[f64], max_iter: usize) -> Minimum {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Minimum {
            x,
            value: fx,
            trajectory: Vec::new(),
            converged: false,
            message: "objective is not finite at the start".into(),
        };
    }
    let mut trajectory = Vec::new();
    if n == 0 {
        return Minimum {
            x,
            value: fx,
            trajectory,
            converged: true,
            message: "no free parameters".into(),
        };
    }
    let mut g = gradient(&f, &x, fx);
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut quiet = 0;
    for iter in 0..max_iter {
        if g.iter().all(|v| v.abs() < 1e-12) {
            return Minimum {
                x,
                value: fx,
                trajectory,
                converged: true,
                message: format!("gradient vanished after {iter} iterations"),
            };
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = mem.back().map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if mem.is_empty() {
            (1.0 / d.iter().map(|v| v.abs()).fold(0.0, f64::max)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let fn_ = f(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fn_));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_)) = accepted else {
            if !mem.is_empty() {
                mem.clear();
                continue;
            }
            let converged = quiet > 0 || g.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-6;
            return Minimum {
                x,
                value: fx,
                trajectory,
                converged,
                message: format!("line search failed after {iter} iterations"),
            };
        };
        let gn = gradient(&f, &xn, fn_);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if mem.len() == MEMORY {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let rel = (fx - fn_).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fn_;
        g = gn;
        trajectory.push(fx);
        quiet = if rel < REL_TOL { quiet + 1 } else { 0 };
        if quiet >= PATIENCE {
            return Minimum {
                x,
                value: fx,
                trajectory,
                converged: true,
                message: format!("converged after {} iterations", iter + 1),
            };
        }
    }
    Minimum {
        x,
        value: fx,
        trajectory,
        converged: false,
        message: format!("iteration limit {max_iter} reached"),
    }
}

/// Maximizes the joint marginal likelihood over the free coordinates.
///
/// Start 0 is `init` (or the default initial state); the other starts
/// perturb it by Gaussian noise of scale `spread` on the free scale, drawn
/// from independent streams of the seed. Starts run in parallel.
pub fn mle_fit(
    problem: &Problem,
    bounds: &[(f64, f64)],
    settings: &MleSettings,
    init: Option<&ParameterState>,
) -> Result<MleResult> {
    if settings.n_starts == 0 {
        return domain("need at least one start");
    }
    let fixed = parse_coords(&settings.fixed)?;
    let layout = ParamLayout::new(problem, bounds, &fixed, settings.log_ranges)?;
    let template = match init {
        Some(s) => {
            s.validate(problem)?;
            s.clone()
        }
        None => initial_state(problem, bounds)?,
    };
    let u0 = layout.to_free(&template);
    if u0.iter().any(|v| !v.is_finite()) {
        return domain("starting state lies on the boundary of the parameter space");
    }
    let objective = |u: &[f64]| -> f64 {
        if layout.transforms.iter().zip(u).any(|(t, v)| *t == Transform::Identity && !v.is_finite()) {
            return f64::INFINITY;
        }
        let s = layout.from_free(&template, u);
        match joint_marginal(problem, &s) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        }
    };
    let runs: Vec<(usize, Minimum, f64)> = (0..settings.n_starts)
        .into_par_iter()
        .map(|i| {
            let mut start = u0.clone();
            if i > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
                rng.set_stream(i as u64);
                for (v, t) in start.iter_mut().zip(&layout.transforms) {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += match t {
                        Transform::Identity => z * settings.spread * v.abs().max(1.0),
                        _ => z * settings.spread,
                    };
                }
            }
            let initial = -objective(&start);
            (i, lbfgs(objective, &start, settings.max_iter), initial)
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    let mut starts = Vec::with_capacity(runs.len());
    for (i, m, initial) in &runs {
        if m.value.is_finite() && best.is_none_or(|(_, v)| m.value < v) {
            best = Some((*i, m.value));
        }
        starts.push(StartTrace {
            start: *i,
            initial_log_lik: *initial,
            log_lik: -m.value,
            trajectory: m.trajectory.iter().map(|v| -v).collect(),
            converged: m.converged,
            message: m.message.clone(),
        });
    }
    let Some((best_start, _)) = best else {
        let diag: Vec<String> = starts.iter().map(|s| format!("start {}: {}", s.start, s.message)).collect();
        return Err(Error::Optimization(diag.join("; ")));
    };
    let m = &runs[best_start].1;
    if !m.converged {
        log::warn!("best start did not meet the convergence criterion: {}", m.message);
    }
    let state = layout.from_free(&template, &m.x);
    let log_lik = joint_marginal(problem, &state)?;
    Ok(MleResult {
        state,
        log_lik,
        best_start,
        starts,
    })
}

/// Generalized least squares constant `(1^T R^{-1} 1)^{-1} 1^T R^{-1} y`.
pub fn closed_form_mean_mle(ybar: &DVector<f64>, r: &CorrelationMatrix) -> Result<f64> {
    if ybar.len() != r.dim() {
        return domain(format!("{} observations for a {}-point correlation", ybar.len(), r.dim()));
    }
    let ones = DVector::from_element(ybar.len(), 1.0);
    let w = r.factor().solve(&ones);
    Ok(w.dot(ybar) / w.sum())
}

/// Coordinates fixed by name, for callers that hold some parameters known.
pub fn fixed_names(coords: &[Coord]) -> Vec<String> {
    coords.iter().map(|c| c.to_string()).collect()
}
