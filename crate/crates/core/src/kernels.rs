//! Stationary correlation functions and correlation-matrix construction.
//!
//! All kernels are products over input dimensions of a one-dimensional
//! correlation evaluated at the scaled distance `s = |x_a - x_b| * beta`,
//! where `beta = 1 / gamma` is the inverse range of that dimension.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::linalg::Factor;

const SQRT5: f64 = 2.236_067_977_499_79;

/// One-dimensional correlation shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Correlation1d {
    /// `exp(-s^alpha)` with roughness `alpha` in (0, 2].
    PowerExponential(f64),
    /// Matérn with smoothness 5/2.
    Matern52,
    /// `exp(-s)`, identical to `PowerExponential(1.0)`.
    Exponential,
}

impl Correlation1d {
    /// Correlation at scaled distance `s >= 0`.
    #[inline]
    pub fn at_scaled(self, s: f64) -> f64 {
        match self {
            Correlation1d::PowerExponential(alpha) => (-s.powf(alpha)).exp(),
            Correlation1d::Exponential => Correlation1d::PowerExponential(1.0).at_scaled(s),
            Correlation1d::Matern52 => {
                let r = SQRT5 * s;
                (1.0 + r + r * r / 3.0) * (-r).exp()
            }
        }
    }

    fn validate(self) -> Result<()> {
        if let Correlation1d::PowerExponential(alpha) = self {
            if !(alpha > 0.0 && alpha <= 2.0) {
                return domain(format!("power-exponential roughness {alpha} outside (0, 2]"));
            }
        }
        Ok(())
    }
}

/// Kernel family for a product kernel over `p` input dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// Power exponential with a fixed roughness per dimension.
    PowerExponential(Vec<f64>),
    Matern52,
    Exponential,
}

impl Default for KernelFamily {
    fn default() -> Self {
        KernelFamily::Matern52
    }
}

impl KernelFamily {
    /// The one-dimensional correlation used for dimension `t`.
    pub fn component(&self, t: usize) -> Correlation1d {
        match self {
            KernelFamily::PowerExponential(alphas) => Correlation1d::PowerExponential(alphas[t]),
            KernelFamily::Matern52 => Correlation1d::Matern52,
            KernelFamily::Exponential => Correlation1d::Exponential,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "matern52" | "matern_5_2" => Ok(KernelFamily::Matern52),
            "exponential" | "exp" => Ok(KernelFamily::Exponential),
            other => domain(format!("unknown kernel family '{other}'")),
        }
    }
}

/// Evaluates a one-dimensional correlation at distance `d` with range `gamma`.
pub fn eval_kernel_1d(family: Correlation1d, d: f64, gamma: f64) -> Result<f64> {
    family.validate()?;
    if !d.is_finite() || d < 0.0 {
        return domain(format!("distance must be finite and nonnegative, got {d}"));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return domain(format!("range must be positive and finite, got {gamma}"));
    }
    Ok(family.at_scaled(d / gamma))
}

/// A product kernel with per-dimension inverse ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub inverse_ranges: Vec<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, inverse_ranges: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec {
            family,
            inverse_ranges,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.inverse_ranges.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inverse_ranges.is_empty() {
            return domain("kernel needs at least one input dimension");
        }
        if let Some(b) = self
            .inverse_ranges
            .iter()
            .find(|b| !(**b > 0.0) || !b.is_finite())
        {
            return domain(format!("inverse range must be positive and finite, got {b}"));
        }
        if let KernelFamily::PowerExponential(alphas) = &self.family {
            if alphas.len() != self.dim() {
                return domain(format!(
                    "{} roughness values for {} dimensions",
                    alphas.len(),
                    self.dim()
                ));
            }
        }
        for t in 0..self.dim() {
            self.family.component(t).validate()?;
        }
        Ok(())
    }

    #[inline]
    fn eval_unchecked<'a>(
        &self,
        xa: impl Iterator<Item = &'a f64>,
        xb: impl Iterator<Item = &'a f64>,
    ) -> f64 {
        let mut k = 1.0;
        for (t, (a, b)) in xa.zip(xb).enumerate() {
            let s = (a - b).abs() * self.inverse_ranges[t];
            k *= self.family.component(t).at_scaled(s);
        }
        k
    }
}

/// Evaluates the product kernel between two input points.
pub fn eval_product_kernel(spec: &KernelSpec, xa: &[f64], xb: &[f64]) -> Result<f64> {
    spec.validate()?;
    if xa.len() != spec.dim() || xb.len() != spec.dim() {
        return domain(format!(
            "points of dimension {} and {} for a {}-dimensional kernel",
            xa.len(),
            xb.len(),
            spec.dim()
        ));
    }
    Ok(spec.eval_unchecked(xa.iter(), xb.iter()))
}

/// Dense kernel matrix `K(x_i, x_j)` between the rows of `a` and `b`.
pub fn cross_correlation(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if a.ncols() != spec.dim() || b.ncols() != spec.dim() {
        return domain(format!(
            "designs with {} and {} columns for a {}-dimensional kernel",
            a.ncols(),
            b.ncols(),
            spec.dim()
        ));
    }
    let mut out = DMatrix::from_element(a.nrows(), b.nrows(), 1.0);
    for t in 0..spec.dim() {
        let corr = spec.family.component(t);
        let beta = spec.inverse_ranges[t];
        let ca = a.column(t);
        let cb = b.column(t);
        for j in 0..b.nrows() {
            for i in 0..a.nrows() {
                out[(i, j)] *= corr.at_scaled((ca[i] - cb[j]).abs() * beta);
            }
        }
    }
    Ok(out)
}

/// Kernel vector between a single point and every row of `design`.
pub fn correlation_vector(spec: &KernelSpec, x: &[f64], design: &DMatrix<f64>) -> Result<DVector<f64>> {
    let row = DMatrix::from_row_slice(1, x.len(), x);
    Ok(cross_correlation(spec, design, &row)?.column(0).into_owned())
}

/// A correlation matrix together with its Cholesky factorization.
#[derive(Clone, Debug)]
pub struct CorrelationMatrix {
    entries: DMatrix<f64>,
    factor: Factor,
}

impl CorrelationMatrix {
    /// Wraps an already computed symmetric matrix, factorizing it with the jitter ladder.
    pub fn from_entries(entries: DMatrix<f64>, what: &str) -> Result<Self> {
        let factor = Factor::with_jitter(&entries, what)?;
        Ok(CorrelationMatrix { entries, factor })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    pub fn log_det(&self) -> f64 {
        self.factor.log_det()
    }

    pub fn jitter_used(&self) -> f64 {
        self.factor.jitter()
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// `R + jitter I`, the matrix the factor actually represents.
    pub fn jittered(&self) -> DMatrix<f64> {
        let mut m = self.entries.clone();
        let j = self.jitter_used();
        for i in 0..m.nrows() {
            m[(i, i)] += j;
        }
        m
    }
}

/// Builds and factorizes the correlation matrix of `spec` on the rows of `inputs`.
pub fn build_correlation_matrix(spec: &KernelSpec, inputs: &DMatrix<f64>) -> Result<CorrelationMatrix> {
    if inputs.nrows() == 0 {
        return domain("design has no rows");
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return domain("design contains non-finite inputs");
    }
    let entries = cross_correlation(spec, inputs, inputs)?;
    CorrelationMatrix::from_entries(entries, &format!("correlation matrix for {spec:?}"))
}

/// Row `i` of a design as an owned vector.
pub fn design_row(inputs: &DMatrix<f64>, i: usize) -> Vec<f64> {
    let r: RowDVector<f64> = inputs.row(i).into_owned();
    r.iter().copied().collect()
}
