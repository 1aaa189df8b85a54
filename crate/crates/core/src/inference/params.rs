//! Named coordinates of a parameter state and their unconstrained transforms.

use std::fmt;

use crate::error::{domain, Error, Result};
use crate::likelihood::{BiasParams, ParameterState, Problem, SourceParams};

/// One scalar of a [`ParameterState`]. Indices are zero-based; names are
/// one-based (`theta[1]`, `beta[2][1]`, ...).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Coord {
    Theta(usize),
    Mu(usize),
    Sigma2(usize),
    Beta(usize, usize),
    Eta(usize),
    Tau2,
    BetaDisc(usize),
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Coord::Theta(j) => write!(f, "theta[{}]", j + 1),
            Coord::Mu(l) => write!(f, "mu[{}]", l + 1),
            Coord::Sigma2(l) => write!(f, "sigma2[{}]", l + 1),
            Coord::Beta(l, t) => write!(f, "beta[{}][{}]", l + 1, t + 1),
            Coord::Eta(l) => write!(f, "eta[{}]", l + 1),
            Coord::Tau2 => write!(f, "tau2"),
            Coord::BetaDisc(t) => write!(f, "beta_disc[{}]", t + 1),
        }
    }
}

fn parse_indices(rest: &str) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    let mut s = rest;
    while !s.is_empty() {
        let inner = s.strip_prefix('[')?;
        let end = inner.find(']')?;
        let i: usize = inner[..end].parse().ok()?;
        if i == 0 {
            return None;
        }
        out.push(i - 1);
        s = &inner[end + 1..];
    }
    Some(out)
}

impl Coord {
    pub fn parse(name: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unknown parameter '{name}'"));
        if name == "tau2" {
            return Ok(Coord::Tau2);
        }
        let open = name.find('[').ok_or_else(bad)?;
        let idx = parse_indices(&name[open..]).ok_or_else(bad)?;
        match (&name[..open], idx.as_slice()) {
            ("theta", [j]) => Ok(Coord::Theta(*j)),
            ("mu", [l]) => Ok(Coord::Mu(*l)),
            ("sigma2", [l]) => Ok(Coord::Sigma2(*l)),
            ("beta", [l, t]) => Ok(Coord::Beta(*l, *t)),
            ("eta", [l]) => Ok(Coord::Eta(*l)),
            ("beta_disc", [t]) => Ok(Coord::BetaDisc(*t)),
            _ => Err(bad()),
        }
    }

    pub fn get(&self, s: &ParameterState) -> f64 {
        match *self {
            Coord::Theta(j) => s.theta[j],
            Coord::Mu(l) => s.sources[l].mu,
            Coord::Sigma2(l) => s.sources[l].bias.as_ref().map_or(f64::NAN, |b| b.sigma2),
            Coord::Beta(l, t) => s.sources[l].bias.as_ref().map_or(f64::NAN, |b| b.beta[t]),
            Coord::Eta(l) => s.sources[l].eta,
            Coord::Tau2 => s.tau2,
            Coord::BetaDisc(t) => s.beta_disc[t],
        }
    }

    pub fn set(&self, s: &mut ParameterState, v: f64) {
        match *self {
            Coord::Theta(j) => s.theta[j] = v,
            Coord::Mu(l) => s.sources[l].mu = v,
            Coord::Sigma2(l) => {
                if let Some(b) = s.sources[l].bias.as_mut() {
                    b.sigma2 = v;
                }
            }
            Coord::Beta(l, t) => {
                if let Some(b) = s.sources[l].bias.as_mut() {
                    b.beta[t] = v;
                }
            }
            Coord::Eta(l) => s.sources[l].eta = v,
            Coord::Tau2 => s.tau2 = v,
            Coord::BetaDisc(t) => s.beta_disc[t] = v,
        }
    }
}

/// Every coordinate of the model in canonical order: calibration
/// parameters, means, per-source covariance parameters, discrepancy.
/// Means are left out when they are not fitted.
pub fn model_coords(problem: &Problem) -> Vec<Coord> {
    let p = problem.dim();
    let k = problem.k();
    let mut out: Vec<Coord> = (0..problem.forward.n_params()).map(Coord::Theta).collect();
    if problem.spec.fit_mean {
        out.extend((0..k).map(Coord::Mu));
    }
    for l in 0..k {
        if problem.spec.has_bias() {
            out.push(Coord::Sigma2(l));
            out.extend((0..p).map(|t| Coord::Beta(l, t)));
        }
        out.push(Coord::Eta(l));
    }
    out.push(Coord::Tau2);
    out.extend((0..p).map(Coord::BetaDisc));
    out
}

/// Map from a constrained scalar to the real line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Identity,
    Log,
    Logit { lo: f64, hi: f64 },
}

impl Transform {
    pub fn to_free(&self, x: f64) -> f64 {
        match *self {
            Transform::Identity => x,
            Transform::Log => x.ln(),
            Transform::Logit { lo, hi } => {
                let q = (x - lo) / (hi - lo);
                (q / (1.0 - q)).ln()
            }
        }
    }

    pub fn from_free(&self, u: f64) -> f64 {
        match *self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
            Transform::Logit { lo, hi } => {
                let q = if u >= 0.0 {
                    1.0 / (1.0 + (-u).exp())
                } else {
                    let e = u.exp();
                    e / (1.0 + e)
                };
                (lo + (hi - lo) * q).clamp(lo, hi)
            }
        }
    }

    /// `log |dx/du|`.
    pub fn log_jacobian(&self, u: f64) -> f64 {
        match *self {
            Transform::Identity => 0.0,
            Transform::Log => u,
            Transform::Logit { lo, hi } => {
                // log q + log(1 - q) with q = sigmoid(u)
                let softplus = |v: f64| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
                (hi - lo).ln() - softplus(-u) - softplus(u)
            }
        }
    }
}

/// The free coordinates of an inference run and their transforms.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub coords: Vec<Coord>,
    pub transforms: Vec<Transform>,
}

impl ParamLayout {
    /// All model coordinates except `fixed`. Calibration parameters use a
    /// logit on `bounds`; means are raw; everything else is log-scaled, or
    /// raw for inverse ranges when `log_ranges` is false.
    pub fn new(problem: &Problem, bounds: &[(f64, f64)], fixed: &[Coord], log_ranges: bool) -> Result<Self> {
        check_bounds(problem, bounds)?;
        let all = model_coords(problem);
        for c in fixed {
            if !all.contains(c) {
                return domain(format!("cannot fix '{c}': not a parameter of this model"));
            }
        }
        let coords: Vec<Coord> = all.into_iter().filter(|c| !fixed.contains(c)).collect();
        let transforms = coords
            .iter()
            .map(|c| match *c {
                Coord::Theta(j) => Transform::Logit {
                    lo: bounds[j].0,
                    hi: bounds[j].1,
                },
                Coord::Mu(_) => Transform::Identity,
                Coord::Beta(..) | Coord::BetaDisc(_) if !log_ranges => Transform::Identity,
                _ => Transform::Log,
            })
            .collect();
        Ok(ParamLayout { coords, transforms })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn to_free(&self, state: &ParameterState) -> Vec<f64> {
        self.coords
            .iter()
            .zip(&self.transforms)
            .map(|(c, t)| t.to_free(c.get(state)))
            .collect()
    }

    /// Writes `u` into a copy of `template`.
    pub fn from_free(&self, template: &ParameterState, u: &[f64]) -> ParameterState {
        let mut s = template.clone();
        for ((c, t), &v) in self.coords.iter().zip(&self.transforms).zip(u) {
            c.set(&mut s, t.from_free(v));
        }
        s
    }

    pub fn log_jacobian(&self, u: &[f64]) -> f64 {
        self.transforms.iter().zip(u).map(|(t, &v)| t.log_jacobian(v)).sum()
    }
}

pub(crate) fn check_bounds(problem: &Problem, bounds: &[(f64, f64)]) -> Result<()> {
    if bounds.len() != problem.forward.n_params() {
        return domain(format!(
            "{} bounds for {} calibration parameters",
            bounds.len(),
            problem.forward.n_params()
        ));
    }
    if bounds.iter().any(|&(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
        return domain("calibration bounds must be finite with lower < upper");
    }
    Ok(())
}

pub fn parse_coords(names: &[String]) -> Result<Vec<Coord>> {
    names.iter().map(|n| Coord::parse(n)).collect()
}

fn sample_var(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = v.clone().sum::<f64>() / n;
    v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Starting state: `theta` at the centre of the box, means at the source
/// sample means, variances at residual sample variances, inverse ranges at
/// one over the input range and nuggets at 0.1.
pub fn initial_state(problem: &Problem, bounds: &[(f64, f64)]) -> Result<ParameterState> {
    check_bounds(problem, bounds)?;
    let theta: Vec<f64> = bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    let f = problem.model_outputs(&theta)?;
    let x = problem.inputs();
    let beta: Vec<f64> = (0..problem.dim())
        .map(|t| {
            let col = x.column(t);
            let range = col.max() - col.min();
            if range > 0.0 {
                1.0 / range
            } else {
                1.0
            }
        })
        .collect();
    let mut sources = Vec::with_capacity(problem.k());
    let mut var_sum = 0.0;
    for (l, src) in problem.data.sources.iter().enumerate() {
        let resid: Vec<f64> = src.outputs.iter().zip(f[l].iter()).map(|(y, fm)| y - fm).collect();
        let mu = if problem.spec.fit_mean {
            resid.iter().sum::<f64>() / resid.len() as f64
        } else {
            0.0
        };
        let mut v = sample_var(resid.iter().copied());
        if !(v > 0.0) || !v.is_finite() {
            v = 1.0;
        }
        var_sum += v;
        sources.push(SourceParams {
            mu,
            eta: 0.1,
            bias: problem.spec.has_bias().then(|| BiasParams {
                sigma2: v,
                beta: beta.clone(),
            }),
        });
    }
    let state = ParameterState {
        theta,
        tau2: var_sum / problem.k() as f64,
        beta_disc: beta,
        sources,
    };
    state.validate(problem)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for c in [
            Coord::Theta(0),
            Coord::Mu(3),
            Coord::Sigma2(1),
            Coord::Beta(2, 1),
            Coord::Eta(0),
            Coord::Tau2,
            Coord::BetaDisc(1),
        ] {
            assert_eq!(Coord::parse(&c.to_string()).unwrap(), c);
        }
        assert_eq!(Coord::Beta(0, 1).to_string(), "beta[1][2]");
        for bad in ["theta", "theta[0]", "beta[1]", "gamma[1]", "tau2[1]", "mu[x]"] {
            assert!(Coord::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn transforms_invert() {
        let ts = [
            Transform::Identity,
            Transform::Log,
            Transform::Logit { lo: -2.0, hi: 5.0 },
        ];
        for t in ts {
            for x in [0.1, 0.7, 3.0] {
                let back = t.from_free(t.to_free(x));
                assert!((back - x).abs() < 1e-12, "{t:?} {x}");
            }
        }
    }

    #[test]
    fn logit_jacobian_matches_finite_difference() {
        let t = Transform::Logit { lo: 1.0, hi: 4.0 };
        for u in [-30.0, -2.0, 0.0, 0.5, 12.0] {
            let h = 1e-6;
            let d = (t.from_free(u + h) - t.from_free(u - h)) / (2.0 * h);
            if d > 1e-9 {
                assert!((t.log_jacobian(u) - d.ln()).abs() < 1e-5, "u {u}");
            }
        }
        assert!(t.log_jacobian(800.0).is_finite());
        assert!(t.from_free(800.0) <= 4.0 && t.from_free(-800.0) >= 1.0);
    }
}
