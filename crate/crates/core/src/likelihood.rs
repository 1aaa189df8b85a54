//! Marginal likelihoods of the multi-source model.
//!
//! For aligned sources with `Sigma_l = sigma2_l R_l + sigma2_0l W^{-1}` and
//! discrepancy correlation `D = L L^T` (`R`, or `R_z` for the S-GaSP), the
//! stacked data are Gaussian with covariance `blockdiag(Sigma_l) + tau2 (1 1^T) (x) D`.
//! Writing `W_l = chol(Sigma_l)^{-1} L` and `M = I + tau2 sum_l W_l^T W_l`,
//!
//! ```text
//! log p = -(nk/2) log 2pi - 1/2 log|M| - 1/2 sum_l log|Sigma_l|
//!         - 1/2 (sum_l r_l^T Sigma_l^{-1} r_l - tau2 c^T M^{-1} c)
//! ```
//!
//! with `r_l` the residuals and `c = L^T sum_l Sigma_l^{-1} r_l`. Only the
//! `k + 1` n-by-n factorizations are needed, and the posterior of the
//! discrepancy at the design is `N(tau2 L M^{-1} c, tau2 L M^{-1} L^T)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{stack_sources, MultiSourceDataset, SourceObservations};
use crate::discrepancy::DiscrepancyMode;
use crate::error::{domain, Error, Result};
use crate::forward::{ForwardModel, LookVector};
use crate::kernels::{build_correlation_matrix, CorrelationMatrix, KernelFamily, KernelSpec};
use crate::linalg::{Factor, LN_2PI};

/// Structural choices of a calibration model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub discrepancy: DiscrepancyMode,
    #[serde(default)]
    pub discrepancy_family: KernelFamily,
    /// Kernel of the per-source bias; `None` drops the bias processes.
    #[serde(default)]
    pub bias_family: Option<KernelFamily>,
    /// Whether the source means `mu_l` are free parameters.
    #[serde(default)]
    pub fit_mean: bool,
}

impl ModelSpec {
    pub fn has_bias(&self) -> bool {
        self.bias_family.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasParams {
    pub sigma2: f64,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub mu: f64,
    /// Noise-to-signal ratio. The signal is the bias variance when a bias
    /// process is present and the discrepancy variance otherwise.
    pub eta: f64,
    pub bias: Option<BiasParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub theta: Vec<f64>,
    pub tau2: f64,
    pub beta_disc: Vec<f64>,
    pub sources: Vec<SourceParams>,
}

impl ParameterState {
    /// Noise variance `sigma2_0l` of source `l`.
    pub fn noise_var(&self, l: usize) -> f64 {
        let s = &self.sources[l];
        match &s.bias {
            Some(b) => s.eta * b.sigma2,
            None => s.eta * self.tau2,
        }
    }

    pub fn validate(&self, problem: &Problem) -> Result<()> {
        let p = problem.dim();
        if self.theta.len() != problem.forward.n_params() {
            return domain(format!(
                "state has {} calibration parameters, model takes {}",
                self.theta.len(),
                problem.forward.n_params()
            ));
        }
        if self.sources.len() != problem.k() {
            return domain(format!("state has {} sources, data has {}", self.sources.len(), problem.k()));
        }
        if !(self.tau2 > 0.0) || !self.tau2.is_finite() {
            return domain(format!("tau2 must be positive, got {}", self.tau2));
        }
        check_betas(&self.beta_disc, p, "discrepancy")?;
        for (l, s) in self.sources.iter().enumerate() {
            if !(s.eta >= 0.0) || !s.eta.is_finite() || !s.mu.is_finite() {
                return domain(format!("source {l}: invalid mean or nugget"));
            }
            match (&s.bias, problem.spec.has_bias()) {
                (Some(b), true) => {
                    if !(b.sigma2 > 0.0) || !b.sigma2.is_finite() {
                        return domain(format!("source {l}: bias variance must be positive"));
                    }
                    check_betas(&b.beta, p, "bias")?;
                }
                (None, false) => {}
                _ => return domain(format!("source {l}: bias parameters do not match the model")),
            }
        }
        if self.theta.iter().any(|t| !t.is_finite()) {
            return domain("non-finite calibration parameter");
        }
        Ok(())
    }
}

fn check_betas(beta: &[f64], p: usize, what: &str) -> Result<()> {
    if beta.len() != p {
        return domain(format!("{what} has {} inverse ranges for {p} input dimensions", beta.len()));
    }
    if beta.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
        return domain(format!("{what} inverse ranges must be positive"));
    }
    Ok(())
}

/// Rows `start..start + len` of a pooled source come from one original source.
#[derive(Clone, Debug, PartialEq)]
struct Segment {
    start: usize,
    len: usize,
    look: Option<LookVector>,
}

/// Data, forward model and model structure of one calibration problem.
#[derive(Clone, Debug)]
pub struct Problem {
    pub data: MultiSourceDataset,
    pub forward: Arc<dyn ForwardModel>,
    pub spec: ModelSpec,
    segments: Option<Vec<Segment>>,
}

impl Problem {
    /// Misaligned sources are rejected by the bias model. Without bias they
    /// are pooled into one source with a shared mean and noise variance.
    pub fn new(data: MultiSourceDataset, forward: Arc<dyn ForwardModel>, spec: ModelSpec) -> Result<Self> {
        spec.discrepancy.validate()?;
        if data.sources.is_empty() {
            return domain("no data sources");
        }
        let p = data.sources[0].dim();
        if data.sources.iter().any(|s| s.dim() != p) {
            return domain("sources have different input dimensions");
        }
        if p != forward.input_dim() {
            return domain(format!(
                "{} takes {}-dimensional inputs, data are {p}-dimensional",
                forward.name(),
                forward.input_dim()
            ));
        }
        if data.aligned {
            return Ok(Problem {
                data,
                forward,
                spec,
                segments: None,
            });
        }
        if spec.has_bias() {
            data.require_aligned()?;
        }
        log::info!("pooling {} misaligned sources into one", data.k());
        let (pooled, segments) = pool_sources(&data)?;
        Ok(Problem {
            data: MultiSourceDataset::new(vec![pooled])?,
            forward,
            spec,
            segments: Some(segments),
        })
    }

    pub fn k(&self) -> usize {
        self.data.k()
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        self.data.inputs()
    }

    pub fn is_pooled(&self) -> bool {
        self.segments.is_some()
    }

    pub fn discrepancy_kernel(&self, state: &ParameterState) -> Result<KernelSpec> {
        KernelSpec::new(self.spec.discrepancy_family.clone(), state.beta_disc.clone())
    }

    pub fn bias_kernel(&self, state: &ParameterState, l: usize) -> Result<Option<KernelSpec>> {
        match (&self.spec.bias_family, &state.sources[l].bias) {
            (Some(fam), Some(b)) => Ok(Some(KernelSpec::new(fam.clone(), b.beta.clone())?)),
            (None, None) => Ok(None),
            _ => domain(format!("source {l}: bias parameters do not match the model")),
        }
    }

    /// `R` or `R_z` at the design.
    pub fn discrepancy_correlation(&self, state: &ParameterState) -> Result<CorrelationMatrix> {
        self.spec
            .discrepancy
            .correlation(&self.discrepancy_kernel(state)?, self.inputs())
    }

    /// Forward model at the design of each source, projected on its look vector.
    pub fn model_outputs(&self, theta: &[f64]) -> Result<Vec<DVector<f64>>> {
        match &self.segments {
            None => self
                .data
                .sources
                .iter()
                .map(|s| self.forward.evaluate(theta, &s.inputs, s.look.as_ref()))
                .collect(),
            Some(segs) => {
                let src = &self.data.sources[0];
                let mut out = DVector::zeros(src.n());
                for seg in segs {
                    let x = src.inputs.rows(seg.start, seg.len).into_owned();
                    let f = self.forward.evaluate(theta, &x, seg.look.as_ref())?;
                    out.rows_mut(seg.start, seg.len).copy_from(&f);
                }
                Ok(vec![out])
            }
        }
    }

    pub fn source_covariance(&self, state: &ParameterState, l: usize) -> Result<SourceCovariance> {
        let src = &self.data.sources[l];
        let noise = state.noise_var(l);
        match self.bias_kernel(state, l)? {
            None => SourceCovariance::diagonal(noise, src.weights.as_ref(), src.n()),
            Some(kernel) => {
                let sigma2 = state.sources[l].bias.as_ref().map(|b| b.sigma2).unwrap_or(0.0);
                let r = build_correlation_matrix(&kernel, &src.inputs)?;
                SourceCovariance::dense(r.entries(), sigma2, noise, src.weights.as_ref())
            }
        }
    }
}

fn pool_sources(data: &MultiSourceDataset) -> Result<(SourceObservations, Vec<Segment>)> {
    let total: usize = data.sources.iter().map(|s| s.n()).sum();
    let p = data.dim();
    let mut inputs = DMatrix::zeros(total, p);
    let mut outputs = DVector::zeros(total);
    let weighted = data.sources.iter().any(|s| s.weights.is_some());
    let mut weights = DVector::from_element(total, 1.0);
    let mut segments = Vec::new();
    let mut start = 0;
    for s in &data.sources {
        inputs.rows_mut(start, s.n()).copy_from(&s.inputs);
        outputs.rows_mut(start, s.n()).copy_from(&s.outputs);
        if let Some(w) = &s.weights {
            weights.rows_mut(start, s.n()).copy_from(w);
        }
        segments.push(Segment {
            start,
            len: s.n(),
            look: s.look,
        });
        start += s.n();
    }
    let mut pooled = SourceObservations::new(inputs, outputs, "pooled")?;
    if weighted {
        pooled = pooled.with_weights(weights)?;
    }
    Ok((pooled, segments))
}

/// Log-density offset turning a Gaussian with noise covariance
/// `sigma2_0 diag(1/w)` into the weighted likelihood whose normalizer is
/// `(2 pi sigma2_0)^{-N/2}` with `N = sum(w)`.
pub fn weighting_correction(noise_var: f64, weights: Option<&DVector<f64>>) -> f64 {
    match weights {
        None => 0.0,
        Some(w) => {
            let total = w.sum();
            let j = w.len() as f64;
            -0.5 * (total - j) * (LN_2PI + noise_var.ln()) - 0.5 * w.iter().map(|v| v.ln()).sum::<f64>()
        }
    }
}

/// Weighted Gaussian noise log-likelihood
/// `-(N/2) log(2 pi sigma2_0) - sum_j w_j r_j^2 / (2 sigma2_0)` with `N = sum(w)`.
pub fn weighted_noise_loglik(resid: &DVector<f64>, weights: &DVector<f64>, noise_var: f64) -> Result<f64> {
    if resid.len() != weights.len() {
        return domain("residual and weight lengths differ");
    }
    if !(noise_var > 0.0) {
        return domain(format!("noise variance must be positive, got {noise_var}"));
    }
    let total = weights.sum();
    let ss: f64 = resid.iter().zip(weights.iter()).map(|(r, w)| w * r * r).sum();
    Ok(-0.5 * total * (LN_2PI + noise_var.ln()) - 0.5 * ss / noise_var)
}

/// `Sigma_l = sigma2_l R_l + sigma2_0l diag(1/w)`.
#[derive(Clone, Debug)]
pub enum SourceCovariance {
    Diagonal {
        var: DVector<f64>,
        log_det: f64,
        correction: f64,
    },
    Dense {
        factor: Factor,
        correction: f64,
    },
}

impl SourceCovariance {
    pub fn diagonal(noise_var: f64, weights: Option<&DVector<f64>>, n: usize) -> Result<Self> {
        if !(noise_var > 0.0) || !noise_var.is_finite() {
            return Err(Error::Singular(format!("noise variance {noise_var} is not positive")));
        }
        let var = match weights {
            Some(w) => w.map(|wi| noise_var / wi),
            None => DVector::from_element(n, noise_var),
        };
        let log_det = var.iter().map(|v| v.ln()).sum();
        Ok(SourceCovariance::Diagonal {
            var,
            log_det,
            correction: weighting_correction(noise_var, weights),
        })
    }

    pub fn dense(r: &DMatrix<f64>, sigma2: f64, noise_var: f64, weights: Option<&DVector<f64>>) -> Result<Self> {
        let n = r.nrows();
        let mut cov = r * sigma2;
        for i in 0..n {
            cov[(i, i)] += match weights {
                Some(w) => noise_var / w[i],
                None => noise_var,
            };
        }
        let correction = if noise_var > 0.0 {
            weighting_correction(noise_var, weights)
        } else {
            0.0
        };
        Ok(SourceCovariance::Dense {
            factor: Factor::with_jitter(&cov, "source covariance")?,
            correction,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            SourceCovariance::Diagonal { var, .. } => var.len(),
            SourceCovariance::Dense { factor, .. } => factor.dim(),
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            SourceCovariance::Diagonal { log_det, .. } => *log_det,
            SourceCovariance::Dense { factor, .. } => factor.log_det(),
        }
    }

    /// Constant added to the Gaussian log-density for weighted data.
    pub fn correction(&self) -> f64 {
        match self {
            SourceCovariance::Diagonal { correction, .. } | SourceCovariance::Dense { correction, .. } => *correction,
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            SourceCovariance::Diagonal { var, .. } => b.component_div(var),
            SourceCovariance::Dense { factor, .. } => factor.solve(b),
        }
    }

    /// `C^{-1} b` for a square root `C C^T = Sigma_l`.
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            SourceCovariance::Diagonal { var, .. } => b.zip_map(var, |bi, v| bi / v.sqrt()),
            SourceCovariance::Dense { factor, .. } => factor.whiten(b),
        }
    }

    /// `C^{-1} B` for a square root `C C^T = Sigma_l`.
    pub fn whiten_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SourceCovariance::Diagonal { var, .. } => {
                let mut out = b.clone();
                for (i, v) in var.iter().enumerate() {
                    out.row_mut(i).scale_mut(1.0 / v.sqrt());
                }
                out
            }
            SourceCovariance::Dense { factor, .. } => factor.whiten_mat(b),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SourceCovariance::Diagonal { var, .. } => DMatrix::from_diagonal(var),
            SourceCovariance::Dense { factor, .. } => factor.reconstruct(),
        }
    }

    /// Log-density of `N(0, Sigma_l)` at `resid`, including the weighting correction.
    pub fn logpdf(&self, resid: &DVector<f64>) -> f64 {
        let quad = resid.dot(&self.solve(resid));
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det() + quad) + self.correction()
    }
}

/// `log N(y; f + mu 1 + delta, Sigma_l)`.
pub fn source_marginal(
    y: &DVector<f64>,
    f: &DVector<f64>,
    delta: &DVector<f64>,
    mu: f64,
    cov: &SourceCovariance,
) -> Result<f64> {
    let n = y.len();
    if f.len() != n || delta.len() != n || cov.dim() != n {
        return domain("source marginal: length mismatch");
    }
    let resid = DVector::from_fn(n, |i, _| y[i] - f[i] - mu - delta[i]);
    Ok(cov.logpdf(&resid))
}

#[derive(Debug)]
struct DiscCache {
    corr: CorrelationMatrix,
    lower_t: DMatrix<f64>,
}

#[derive(Debug)]
struct SourceCache {
    cov: SourceCovariance,
    contrib: DMatrix<f64>,
}

/// Cached factorizations for repeated likelihood evaluation.
///
/// Cloning shares every factorization; the `update_*` methods return a new
/// workspace that recomputes only what the changed parameters touch.
#[derive(Clone, Debug)]
pub struct Workspace {
    f: Arc<Vec<DVector<f64>>>,
    disc: Arc<DiscCache>,
    sources: Vec<Arc<SourceCache>>,
    m: Arc<Factor>,
    tau2: f64,
    resid: Vec<DVector<f64>>,
    c: DVector<f64>,
    mc: DVector<f64>,
    log_lik: f64,
}

impl Workspace {
    pub fn new(problem: &Problem, state: &ParameterState) -> Result<Self> {
        state.validate(problem)?;
        let f = Arc::new(problem.model_outputs(&state.theta)?);
        let disc = Arc::new(build_disc(problem, state)?);
        let sources = (0..problem.k())
            .map(|l| build_source(problem, state, l, &disc).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let m = Arc::new(build_m(&sources, state.tau2)?);
        let mut ws = Workspace {
            f,
            disc,
            sources,
            m,
            tau2: state.tau2,
            resid: Vec::new(),
            c: DVector::zeros(0),
            mc: DVector::zeros(0),
            log_lik: 0.0,
        };
        ws.refresh(problem, state);
        Ok(ws)
    }

    /// After a change of `theta`.
    pub fn update_theta(&self, problem: &Problem, state: &ParameterState) -> Result<Self> {
        let mut ws = self.clone();
        ws.f = Arc::new(problem.model_outputs(&state.theta)?);
        ws.refresh(problem, state);
        Ok(ws)
    }

    /// After a change of the source means.
    pub fn update_means(&self, problem: &Problem, state: &ParameterState) -> Self {
        let mut ws = self.clone();
        ws.refresh(problem, state);
        ws
    }

    /// After a change of the covariance parameters of source `l`.
    pub fn update_source(&self, problem: &Problem, state: &ParameterState, l: usize) -> Result<Self> {
        let mut ws = self.clone();
        ws.sources[l] = Arc::new(build_source(problem, state, l, &ws.disc)?);
        ws.m = Arc::new(build_m(&ws.sources, state.tau2)?);
        ws.refresh(problem, state);
        Ok(ws)
    }

    /// After a change of `tau2`, `beta_disc`, or of every nugget in a model
    /// without bias (whose noise variances scale with `tau2`).
    pub fn update_discrepancy(&self, problem: &Problem, state: &ParameterState) -> Result<Self> {
        let mut ws = self.clone();
        ws.disc = Arc::new(build_disc(problem, state)?);
        ws.sources = if problem.spec.has_bias() {
            // Source covariances do not involve the discrepancy parameters here.
            ws.sources
                .iter()
                .map(|s| Arc::new(whiten_source(s.cov.clone(), &ws.disc)))
                .collect()
        } else {
            (0..problem.k())
                .map(|l| build_source(problem, state, l, &ws.disc).map(Arc::new))
                .collect::<Result<Vec<_>>>()?
        };
        ws.m = Arc::new(build_m(&ws.sources, state.tau2)?);
        ws.tau2 = state.tau2;
        ws.refresh(problem, state);
        Ok(ws)
    }

    fn refresh(&mut self, problem: &Problem, state: &ParameterState) {
        let k = problem.k();
        let n = problem.n();
        let mut b = DVector::zeros(n);
        let mut whitened = Vec::with_capacity(k);
        let mut log_det = 0.0;
        let mut correction = 0.0;
        self.resid.clear();
        for l in 0..k {
            let y = &problem.data.sources[l].outputs;
            let r = DVector::from_fn(n, |i, _| y[i] - self.f[l][i] - state.sources[l].mu);
            b += self.sources[l].cov.solve(&r);
            whitened.push(self.sources[l].cov.whiten(&r));
            log_det += self.sources[l].cov.log_det();
            correction += self.sources[l].cov.correction();
            self.resid.push(r);
        }
        self.c = &self.disc.lower_t * b;
        self.mc = self.m.solve(&self.c);
        // quad - tau2 c^T M^{-1} c, written as the ridge objective
        // sum_l |b_l - tau W_l v|^2 + |v|^2 at its minimizer v to avoid cancellation.
        let v = &self.mc * self.tau2.sqrt();
        let u = self.disc.corr.factor().lower() * &v * self.tau2.sqrt();
        let mut reduced = v.norm_squared();
        for (l, bl) in whitened.iter().enumerate() {
            reduced += (bl - self.sources[l].cov.whiten(&u)).norm_squared();
        }
        self.log_lik = -0.5 * ((n * k) as f64 * LN_2PI + self.m.log_det() + log_det + reduced) + correction;
    }

    pub fn log_lik(&self) -> f64 {
        self.log_lik
    }

    /// Forward-model outputs at the current `theta`.
    pub fn model_outputs(&self) -> &[DVector<f64>] {
        &self.f
    }

    pub fn residuals(&self) -> &[DVector<f64>] {
        &self.resid
    }

    pub fn discrepancy_correlation(&self) -> &CorrelationMatrix {
        &self.disc.corr
    }

    pub fn source_covariance(&self, l: usize) -> &SourceCovariance {
        &self.sources[l].cov
    }

    /// Posterior mean of the discrepancy at the design.
    pub fn delta_mean(&self) -> DVector<f64> {
        self.disc.corr.factor().lower() * &self.mc * self.tau2
    }

    /// Posterior covariance of the discrepancy at the design.
    pub fn delta_cov(&self) -> DMatrix<f64> {
        let v = self.m.whiten_mat(&self.disc.lower_t);
        let mut out = v.transpose() * v * self.tau2;
        symmetrize(&mut out);
        out
    }

    /// One exact draw from the conditional posterior of the discrepancy.
    pub fn draw_delta<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.c.len();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = self.m.unwhiten_t(&z);
        let l = self.disc.corr.factor().lower();
        l * (&self.mc * self.tau2 + u * self.tau2.sqrt())
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn build_disc(problem: &Problem, state: &ParameterState) -> Result<DiscCache> {
    let corr = problem.discrepancy_correlation(state)?;
    let lower_t = corr.factor().lower().transpose();
    Ok(DiscCache { corr, lower_t })
}

fn build_source(problem: &Problem, state: &ParameterState, l: usize, disc: &DiscCache) -> Result<SourceCache> {
    Ok(whiten_source(problem.source_covariance(state, l)?, disc))
}

fn whiten_source(cov: SourceCovariance, disc: &DiscCache) -> SourceCache {
    let w = cov.whiten_mat(disc.corr.factor().lower());
    let contrib = w.transpose() * w;
    SourceCache { cov, contrib }
}

fn build_m(sources: &[Arc<SourceCache>], tau2: f64) -> Result<Factor> {
    let n = sources[0].contrib.nrows();
    let mut m = DMatrix::zeros(n, n);
    for s in sources {
        m += &s.contrib;
    }
    m *= tau2;
    for i in 0..n {
        m[(i, i)] += 1.0;
    }
    symmetrize(&mut m);
    Factor::with_jitter(&m, "discrepancy posterior precision")
}

/// Log marginal density of all sources with discrepancy and biases integrated out.
pub fn joint_marginal(problem: &Problem, state: &ParameterState) -> Result<f64> {
    Ok(Workspace::new(problem, state)?.log_lik())
}

/// Posterior mean and covariance of the discrepancy at the design.
pub fn posterior_discrepancy(problem: &Problem, state: &ParameterState) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let ws = Workspace::new(problem, state)?;
    Ok((ws.delta_mean(), ws.delta_cov()))
}

/// Density of the stacked data implied by the full model:
/// `N(mean_l f_l + mean(mu) 1, (1/k^2) sum_l Sigma_l + tau2 D)`.
pub fn aggregated_marginal_full(problem: &Problem, state: &ParameterState) -> Result<f64> {
    state.validate(problem)?;
    let stacked = stack_sources(&problem.data)?;
    let k = problem.k() as f64;
    let f = problem.model_outputs(&state.theta)?;
    let mu_bar = state.sources.iter().map(|s| s.mu).sum::<f64>() / k;
    let n = problem.n();
    let mut mean = DVector::from_element(n, mu_bar);
    for fl in &f {
        mean += fl / k;
    }
    let d = problem.discrepancy_correlation(state)?;
    let mut cov = d.jittered() * state.tau2;
    for l in 0..problem.k() {
        cov += problem.source_covariance(state, l)?.to_dense() / (k * k);
    }
    symmetrize(&mut cov);
    let factor = Factor::with_jitter(&cov, "aggregated covariance")?;
    Ok(factor.gaussian_logpdf(&(stacked.outputs - mean)))
}

/// `log N(ybar; f + mu 1, (sigma2_0 / k) I + tau2 D)`.
pub fn aggregated_marginal_nobias(
    ybar: &DVector<f64>,
    f: &DVector<f64>,
    mu: f64,
    sigma02: f64,
    k: usize,
    tau2: f64,
    d: &CorrelationMatrix,
) -> Result<f64> {
    let n = ybar.len();
    if f.len() != n || d.dim() != n {
        return domain("aggregated density: length mismatch");
    }
    if !(sigma02 >= 0.0 && tau2 >= 0.0) || k == 0 {
        return domain("variances must be nonnegative and k positive");
    }
    let mut cov = d.jittered() * tau2;
    for i in 0..n {
        cov[(i, i)] += sigma02 / k as f64;
    }
    let factor = Factor::with_jitter(&cov, "aggregated covariance")?;
    Ok(factor.gaussian_logpdf(&DVector::from_fn(n, |i, _| ybar[i] - f[i] - mu)))
}

/// Full-data and stacked log-likelihoods of the model without bias, given
/// the discrepancy, and the constant linking them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    pub full: f64,
    pub stack: f64,
    pub constant: f64,
}

impl Decomposition {
    /// `full - stack - constant`; zero up to roundoff.
    pub fn gap(&self) -> f64 {
        self.full - self.stack - self.constant
    }
}

pub fn decomposition_check(
    ds: &MultiSourceDataset,
    f: &DVector<f64>,
    delta: &DVector<f64>,
    mu: f64,
    sigma02: f64,
) -> Result<Decomposition> {
    if !(sigma02 > 0.0) {
        return domain(format!("noise variance must be positive, got {sigma02}"));
    }
    let stacked = stack_sources(ds)?;
    let n = ds.n();
    if f.len() != n || delta.len() != n {
        return domain("decomposition: length mismatch");
    }
    let k = ds.k() as f64;
    let nf = n as f64;
    let mean = DVector::from_fn(n, |i, _| f[i] + delta[i] + mu);
    let full: f64 = ds
        .sources
        .iter()
        .map(|s| -0.5 * nf * (LN_2PI + sigma02.ln()) - (&s.outputs - &mean).norm_squared() / (2.0 * sigma02))
        .sum();
    let stack = -0.5 * nf * (LN_2PI + (sigma02 / k).ln()) - k * (&stacked.outputs - &mean).norm_squared() / (2.0 * sigma02);
    let scatter: f64 = ds
        .sources
        .iter()
        .map(|s| (&s.outputs - &stacked.outputs).norm_squared())
        .sum();
    let constant = -0.5 * nf * (k - 1.0) * (LN_2PI + sigma02.ln()) - 0.5 * nf * k.ln() - scatter / (2.0 * sigma02);
    Ok(Decomposition { full, stack, constant })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::ToyMean;

    fn line_data(ys: &[&[f64]]) -> MultiSourceDataset {
        let n = ys[0].len();
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64);
        MultiSourceDataset::new(
            ys.iter()
                .enumerate()
                .map(|(l, y)| SourceObservations::new(x.clone(), DVector::from_column_slice(y), format!("s{l}")).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn nobias(mode: DiscrepancyMode) -> ModelSpec {
        ModelSpec {
            discrepancy: mode,
            discrepancy_family: KernelFamily::Matern52,
            bias_family: None,
            fit_mean: false,
        }
    }

    #[test]
    fn single_point_standard_normal() {
        let cov = SourceCovariance::dense(&DMatrix::identity(1, 1), 1.0, 0.0, None).unwrap();
        let v = source_marginal(
            &DVector::from_element(1, 0.7),
            &DVector::from_element(1, 0.2),
            &DVector::from_element(1, 0.5),
            0.0,
            &cov,
        )
        .unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn misaligned_bias_model_rejected() {
        let a = SourceObservations::new(DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), DVector::zeros(2), "a").unwrap();
        let b = SourceObservations::new(DMatrix::from_column_slice(2, 1, &[0.0, 2.0]), DVector::zeros(2), "b").unwrap();
        let ds = MultiSourceDataset::new(vec![a, b]).unwrap();
        let mut spec = nobias(DiscrepancyMode::Gasp);
        spec.bias_family = Some(KernelFamily::Matern52);
        let err = Problem::new(ds.clone(), Arc::new(ToyMean), spec).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
        let pooled = Problem::new(ds, Arc::new(ToyMean), nobias(DiscrepancyMode::Gasp)).unwrap();
        assert!(pooled.is_pooled());
        assert_eq!((pooled.k(), pooled.n()), (1, 4));
    }

    #[test]
    fn weighted_gaussian_matches_weighted_form() {
        let w = DVector::from_vec(vec![4.0, 1.0, 3.0]);
        let r = DVector::from_vec(vec![0.3, -0.1, 0.8]);
        let s0 = 0.7;
        let cov = SourceCovariance::diagonal(s0, Some(&w), 3).unwrap();
        let direct = weighted_noise_loglik(&r, &w, s0).unwrap();
        assert!((cov.logpdf(&r) - direct).abs() < 1e-13);
    }

    #[test]
    fn no_discrepancy_limit() {
        let ds = line_data(&[&[0.3, -0.2, 0.5, 0.1]]);
        let problem = Problem::new(ds, Arc::new(ToyMean), nobias(DiscrepancyMode::Gasp)).unwrap();
        let state = ParameterState {
            theta: vec![0.1],
            tau2: 1e-12,
            beta_disc: vec![3.0],
            sources: vec![SourceParams {
                mu: 0.0,
                eta: 0.5e12,
                bias: None,
            }],
        };
        let ll = joint_marginal(&problem, &state).unwrap();
        let cov = problem.source_covariance(&state, 0).unwrap();
        let y = &problem.data.sources[0].outputs;
        let direct = source_marginal(y, &DVector::from_element(4, 0.1), &DVector::zeros(4), 0.0, &cov).unwrap();
        assert!((ll - direct).abs() < 1e-8);
    }

    #[test]
    fn decomposition_trivial_cases() {
        let ds = line_data(&[&[0.3, -0.2, 0.5]]);
        let f = DVector::zeros(3);
        let d = decomposition_check(&ds, &f, &f, 0.0, 0.4).unwrap();
        assert_eq!(d.constant, 0.0);
        let same = line_data(&[&[0.3, -0.2, 0.5], &[0.3, -0.2, 0.5]]);
        let d = decomposition_check(&same, &f, &f, 0.1, 0.4).unwrap();
        let want = -0.5 * 3.0 * (LN_2PI + 0.4f64.ln()) - 0.5 * 3.0 * 2f64.ln();
        assert!((d.constant - want).abs() < 1e-14);
        assert!(d.gap().abs() < 1e-12);
    }
}
