//! Predictive distributions at new inputs, given the discrepancy at the design.
//!
//! For the S-GaSP the scaling acts only on the discrepancy at the design
//! points, so once those values are fixed the predictive distribution at a
//! new input is the GaSP conditional built from `R`. `R_z` enters only
//! through the draw or estimate of the discrepancy.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::kernels::{build_correlation_matrix, correlation_vector, design_row, KernelSpec};
use crate::likelihood::{ParameterState, Problem, SourceCovariance};
use crate::linalg::Factor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Discrepancy,
    Bias,
    Field,
    Reality,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Discrepancy,
        Component::Bias,
        Component::Field,
        Component::Reality,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Component::Discrepancy => "discrepancy",
            Component::Bias => "bias",
            Component::Field => "field",
            Component::Reality => "reality",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .map_or_else(|| domain(format!("unknown component '{s}'")), Ok)
    }
}

fn clamp_variance(v: f64, what: &str) -> f64 {
    if v >= 0.0 {
        return v;
    }
    if v < -1e-10 {
        log::warn!("{what}: negative predictive variance {v:e} clamped to zero");
    }
    0.0
}

#[derive(Debug)]
struct BiasCache {
    kernel: KernelSpec,
    sigma2: f64,
    cov: SourceCovariance,
    resid: DVector<f64>,
    alpha: DVector<f64>,
}

/// Predictions for one parameter state and discrepancy vector.
#[derive(Debug)]
pub struct Predictor<'a> {
    problem: &'a Problem,
    state: &'a ParameterState,
    kernel: KernelSpec,
    r: Factor,
    r_alpha: DVector<f64>,
    bias: Vec<Option<BiasCache>>,
}

impl<'a> Predictor<'a> {
    pub fn new(problem: &'a Problem, state: &'a ParameterState, delta: &DVector<f64>) -> Result<Self> {
        state.validate(problem)?;
        let n = problem.n();
        if delta.len() != n {
            return domain(format!("discrepancy has {} values for {n} design points", delta.len()));
        }
        let kernel = problem.discrepancy_kernel(state)?;
        let r = build_correlation_matrix(&kernel, problem.inputs())?.factor().clone();
        let r_alpha = r.solve(delta);
        let f = problem.model_outputs(&state.theta)?;
        let mut bias = Vec::with_capacity(problem.k());
        for l in 0..problem.k() {
            bias.push(match problem.bias_kernel(state, l)? {
                None => None,
                Some(kernel) => {
                    let cov = problem.source_covariance(state, l)?;
                    let y = &problem.data.sources[l].outputs;
                    let mu = state.sources[l].mu;
                    let resid = DVector::from_fn(n, |i, _| y[i] - f[l][i] - mu - delta[i]);
                    let alpha = cov.solve(&resid);
                    let sigma2 = state.sources[l].bias.as_ref().map_or(0.0, |b| b.sigma2);
                    Some(BiasCache {
                        kernel,
                        sigma2,
                        cov,
                        resid,
                        alpha,
                    })
                }
            });
        }
        Ok(Predictor {
            problem,
            state,
            kernel,
            r,
            r_alpha,
            bias,
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.problem.dim() {
            return domain(format!("input has {} coordinates, expected {}", x.len(), self.problem.dim()));
        }
        Ok(())
    }

    fn check_source(&self, l: usize) -> Result<()> {
        if l >= self.problem.k() {
            return domain(format!("source {l} out of range for {} sources", self.problem.k()));
        }
        Ok(())
    }

    /// Mean `r^T R^{-1} delta`, variance `tau2 (1 - r^T R^{-1} r)`.
    pub fn discrepancy(&self, x: &[f64]) -> Result<Prediction> {
        self.check_input(x)?;
        let r = correlation_vector(&self.kernel, x, self.problem.inputs())?;
        let mean = r.dot(&self.r_alpha);
        let var = self.state.tau2 * (1.0 - self.r.quad_form(&r));
        Ok(Prediction {
            mean,
            variance: clamp_variance(var, "discrepancy"),
        })
    }

    /// Mean `sigma2 r^T Sigma^{-1} (y_tilde - delta)`, variance
    /// `sigma2 (1 - sigma2 r^T Sigma^{-1} r)`.
    pub fn bias(&self, l: usize, x: &[f64]) -> Result<Prediction> {
        self.check_input(x)?;
        self.check_source(l)?;
        let Some(b) = &self.bias[l] else {
            return domain("the model has no source bias");
        };
        let r = correlation_vector(&b.kernel, x, self.problem.inputs())?;
        let mean = b.sigma2 * r.dot(&b.alpha);
        let var = b.sigma2 * (1.0 - b.sigma2 * r.dot(&b.cov.solve(&r)));
        Ok(Prediction {
            mean,
            variance: clamp_variance(var, "bias"),
        })
    }

    /// Posterior mean of the bias of source `l` at its design points,
    /// `sigma2 R_l Sigma^{-1} r = r - sigma2_0 W^{-1} Sigma^{-1} r`.
    pub fn bias_at_design(&self, l: usize) -> Result<DVector<f64>> {
        self.check_source(l)?;
        let Some(b) = &self.bias[l] else {
            return domain("the model has no source bias");
        };
        let noise = self.state.noise_var(l);
        let w = self.problem.data.sources[l].weights.as_ref();
        Ok(DVector::from_fn(b.resid.len(), |i, _| {
            b.resid[i] - noise * b.alpha[i] / w.map_or(1.0, |w| w[i])
        }))
    }

    fn model_at(&self, l: usize, x: &[f64]) -> Result<f64> {
        let xm = DMatrix::from_row_slice(1, x.len(), x);
        let look = self.problem.data.sources[l].look;
        Ok(self.problem.forward.evaluate(&self.state.theta, &xm, look.as_ref())?[0])
    }

    /// Observation of source `l` at `x`, including its mean and noise.
    pub fn field(&self, l: usize, x: &[f64]) -> Result<Prediction> {
        self.check_source(l)?;
        let d = self.discrepancy(x)?;
        let mut mean = d.mean + self.model_at(l, x)? + self.state.sources[l].mu;
        let mut variance = d.variance + self.state.noise_var(l);
        if self.bias[l].is_some() {
            let b = self.bias(l, x)?;
            mean += b.mean;
            variance += b.variance;
        }
        Ok(Prediction { mean, variance })
    }

    /// `f(x, theta) + delta(x)`, projected on the look vector of source `l`.
    pub fn reality(&self, l: usize, x: &[f64]) -> Result<Prediction> {
        self.check_source(l)?;
        let d = self.discrepancy(x)?;
        Ok(Prediction {
            mean: d.mean + self.model_at(l, x)?,
            variance: d.variance,
        })
    }

    pub fn component(&self, c: Component, l: usize, x: &[f64]) -> Result<Prediction> {
        match c {
            Component::Discrepancy => self.discrepancy(x),
            Component::Bias => self.bias(l, x),
            Component::Field => self.field(l, x),
            Component::Reality => self.reality(l, x),
        }
    }

    /// Predictions at every row of `xs`.
    pub fn batch(&self, c: Component, l: usize, xs: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        (0..xs.nrows())
            .map(|i| {
                self.component(c, l, &design_row(xs, i))
            })
            .collect()
    }
}

/// Averages predictions over posterior draws of `(state, delta)`. The
/// variance is the mixture variance, mean of variances plus variance of
/// means; with one draw it is that draw's prediction.
pub fn average_over_draws(
    problem: &Problem,
    draws: &[(ParameterState, DVector<f64>)],
    c: Component,
    l: usize,
    xs: &DMatrix<f64>,
) -> Result<Vec<Prediction>> {
    if draws.is_empty() {
        return domain("no posterior draws to average");
    }
    let m = xs.nrows();
    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    let mut sum_var = vec![0.0; m];
    for (state, delta) in draws {
        let p = Predictor::new(problem, state, delta)?;
        for (i, pred) in p.batch(c, l, xs)?.into_iter().enumerate() {
            sum[i] += pred.mean;
            sum_sq[i] += pred.mean * pred.mean;
            sum_var[i] += pred.variance;
        }
    }
    let d = draws.len() as f64;
    Ok((0..m)
        .map(|i| {
            let mean = sum[i] / d;
            let spread = if draws.len() == 1 { 0.0 } else { (sum_sq[i] / d - mean * mean).max(0.0) };
            Prediction {
                mean,
                variance: sum_var[i] / d + spread,
            }
        })
        .collect())
}

/// Mean squared difference.
pub fn evaluate_mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return domain(format!("{} predictions for {} truths", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return domain("no predictions");
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// Writes `x1..xp,source,mean,variance,component`.
pub fn write_predictions_csv<W: Write>(
    w: W,
    xs: &DMatrix<f64>,
    source: usize,
    component: Component,
    preds: &[Prediction],
) -> Result<()> {
    if preds.len() != xs.nrows() {
        return domain("prediction count does not match the inputs");
    }
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (1..=xs.ncols()).map(|j| format!("x{j}")).collect();
    header.extend(["source", "mean", "variance", "component"].map(String::from));
    wtr.write_record(&header)?;
    for (i, p) in preds.iter().enumerate() {
        let mut row: Vec<String> = xs.row(i).iter().map(f64::to_string).collect();
        row.push((source + 1).to_string());
        row.push(p.mean.to_string());
        row.push(p.variance.to_string());
        row.push(component.name().to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
