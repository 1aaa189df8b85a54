//! Jointly robust prior on inverse ranges and nuggets, and the full log posterior.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::params::check_bounds;
use crate::error::{domain, Result};
use crate::likelihood::{joint_marginal, ParameterState, Problem};

/// Parameters `(a, b, C)` of one jointly robust prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JrParams {
    pub a: f64,
    pub b: f64,
    pub c: Vec<f64>,
}

impl JrParams {
    /// `a = 1/2 - p`, `b = 1`, `C_t = n^{-1/p} (max_t - min_t)`.
    pub fn default_for(problem: &Problem) -> Result<Self> {
        let p = problem.dim();
        let n = problem.n() as f64;
        let x = problem.inputs();
        let c: Vec<f64> = (0..p)
            .map(|t| {
                let col = x.column(t);
                n.powf(-1.0 / p as f64) * (col.max() - col.min())
            })
            .collect();
        let out = JrParams {
            a: 0.5 - p as f64,
            b: 1.0,
            c,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.c.len() as f64;
        if !(self.a > -1.0 - p) {
            return domain(format!("JR prior needs a > -1 - p, got a = {}", self.a));
        }
        if !(self.b > 0.0) {
            return domain(format!("JR prior needs b > 0, got {}", self.b));
        }
        if self.c.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return domain("JR prior scale constants must be positive (is an input constant?)");
        }
        Ok(())
    }

    pub fn log_density(&self, beta: &[f64], eta: f64) -> Result<f64> {
        jr_prior_logdensity(beta, eta, self.a, self.b, &self.c)
    }
}

/// `log c + a log(s) - b s` with `s = sum_t C_t beta_t + eta` and
/// `c = p! b^{a+p+1} prod C_t / Gamma(a+p+1)`.
pub fn jr_prior_logdensity(beta: &[f64], eta: f64, a: f64, b: f64, c: &[f64]) -> Result<f64> {
    let p = beta.len();
    if c.len() != p {
        return domain(format!("{} scale constants for {p} inverse ranges", c.len()));
    }
    let pf = p as f64;
    let s = beta.iter().zip(c).map(|(bt, ct)| bt * ct).sum::<f64>() + eta;
    if !(s > 0.0) || !s.is_finite() {
        return domain(format!("JR prior argument must be positive, got {s}"));
    }
    let log_c = ln_gamma(pf + 1.0) + (a + pf + 1.0) * b.ln() + c.iter().map(|v| v.ln()).sum::<f64>() - ln_gamma(a + pf + 1.0);
    Ok(log_c + a * s.ln() - b * s)
}

/// Uniform box on `theta`, JR priors on the correlation parameters and
/// `1 / variance` priors on the variances. Means have a flat prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub theta_bounds: Vec<(f64, f64)>,
    pub discrepancy: JrParams,
    /// Shared by every bias process (all sources have the same inputs).
    pub bias: JrParams,
}

impl PriorSpec {
    pub fn default_for(problem: &Problem) -> Result<Self> {
        let jr = JrParams::default_for(problem)?;
        Ok(PriorSpec {
            theta_bounds: problem.forward.default_bounds(),
            discrepancy: jr.clone(),
            bias: jr,
        })
    }

    pub fn validate(&self, problem: &Problem) -> Result<()> {
        check_bounds(problem, &self.theta_bounds)?;
        for jr in [&self.discrepancy, &self.bias] {
            jr.validate()?;
            if jr.c.len() != problem.dim() {
                return domain("JR prior dimension does not match the inputs");
            }
        }
        Ok(())
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.theta_bounds.len()
            && theta
                .iter()
                .zip(&self.theta_bounds)
                .all(|(t, (lo, hi))| *t >= *lo && *t <= *hi)
    }
}

/// Log prior density; `-inf` outside the calibration box.
///
/// With bias processes each source contributes `JR(beta_l, eta_l) - log sigma2_l`
/// and the discrepancy `JR(beta_disc, 0) - log tau2`. Without bias the nugget
/// is relative to `tau2`: a single source uses `JR(beta_disc, eta_1)`, several
/// sources use `JR(beta_disc, 0)` and `1 / eta_l` for each nugget.
pub fn log_prior(problem: &Problem, priors: &PriorSpec, state: &ParameterState) -> Result<f64> {
    if !priors.contains(&state.theta) {
        return Ok(f64::NEG_INFINITY);
    }
    let box_volume: f64 = priors.theta_bounds.iter().map(|(lo, hi)| (hi - lo).ln()).sum();
    let mut lp = -box_volume - state.tau2.ln();
    if problem.spec.has_bias() {
        lp += priors.discrepancy.log_density(&state.beta_disc, 0.0)?;
        for s in &state.sources {
            let b = s.bias.as_ref().expect("validated state");
            lp += priors.bias.log_density(&b.beta, s.eta)? - b.sigma2.ln();
        }
    } else if state.sources.len() == 1 {
        lp += priors.discrepancy.log_density(&state.beta_disc, state.sources[0].eta)?;
    } else {
        lp += priors.discrepancy.log_density(&state.beta_disc, 0.0)?;
        for s in &state.sources {
            if !(s.eta > 0.0) {
                return Ok(f64::NEG_INFINITY);
            }
            lp -= s.eta.ln();
        }
    }
    Ok(lp)
}

/// Joint marginal likelihood plus [`log_prior`].
pub fn log_posterior(problem: &Problem, priors: &PriorSpec, state: &ParameterState) -> Result<f64> {
    let lp = log_prior(problem, priors, state)?;
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    Ok(joint_marginal(problem, state)? + lp)
}
