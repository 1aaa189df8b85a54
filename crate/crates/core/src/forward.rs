//! Forward models `f^M(x, theta)`.
//!
//! Every model implements [`ForwardModel`], which maps a parameter vector
//! and an `n x p` design to an `n`-vector of outputs, so the likelihood and
//! samplers never need to know which physics they are calibrating.
//!
//! The Mogi point source returns velocities in m/yr: the volume change
//! rate is given in m^3/s and displacements are multiplied by the Julian
//! year, [`SECONDS_PER_YEAR`].

use std::f64::consts::PI;
use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Seconds in a Julian year (365.25 days).
pub const SECONDS_PER_YEAR: f64 = 31_557_600.0;

/// Unit satellite look vector in (east, north, up) components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct LookVector([f64; 3]);

impl LookVector {
    pub const VERTICAL: LookVector = LookVector([0.0, 0.0, 1.0]);

    /// Accepts a vector whose norm is 1 within 1e-12.
    pub fn new(v: [f64; 3]) -> Result<Self> {
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= 1e-12) {
            return domain(format!("look vector norm {norm} is not 1"));
        }
        Ok(LookVector(v))
    }

    pub fn normalized(v: [f64; 3]) -> Result<Self> {
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return domain("cannot normalize a zero look vector");
        }
        Ok(LookVector([v[0] / norm, v[1] / norm, v[2] / norm]))
    }

    pub fn components(&self) -> [f64; 3] {
        self.0
    }
}

impl TryFrom<[f64; 3]> for LookVector {
    type Error = Error;
    fn try_from(v: [f64; 3]) -> Result<Self> {
        LookVector::new(v)
    }
}

impl From<LookVector> for [f64; 3] {
    fn from(l: LookVector) -> Self {
        l.0
    }
}

/// Parameters of a Mogi point source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MogiParams {
    /// East coordinate of the source (m).
    pub east: f64,
    /// North coordinate of the source (m).
    pub north: f64,
    /// Depth below the surface, positive down (m).
    pub depth: f64,
    /// Volume change rate (m^3/s).
    pub volume_rate: f64,
    /// Poisson ratio of the host rock.
    pub poisson: f64,
}

impl MogiParams {
    pub const BOUNDS: [(f64, f64); 5] = [
        (-2000.0, 3000.0),
        (-2000.0, 5000.0),
        (500.0, 6000.0),
        (0.0, 0.15),
        (0.25, 0.33),
    ];

    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        match theta {
            &[east, north, depth, volume_rate, poisson] => Ok(MogiParams {
                east,
                north,
                depth,
                volume_rate,
                poisson,
            }),
            _ => domain(format!("Mogi model takes 5 parameters, got {}", theta.len())),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.east, self.north, self.depth, self.volume_rate, self.poisson]
    }

    pub fn within_bounds(&self) -> bool {
        self.to_vec()
            .iter()
            .zip(Self::BOUNDS.iter())
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

/// Surface displacement rate (m/s) of a Mogi source at surface point `x`.
pub fn mogi_displacement_3d(params: &MogiParams, x: [f64; 2]) -> Result<[f64; 3]> {
    if !(params.depth > 0.0) {
        return domain(format!("source depth must be positive, got {}", params.depth));
    }
    let de = x[0] - params.east;
    let dn = x[1] - params.north;
    let r2 = de * de + dn * dn + params.depth * params.depth;
    let r3 = r2 * r2.sqrt();
    if !(r3 > 0.0) || !r3.is_finite() {
        return Err(Error::Singular("Mogi source distance is zero".into()));
    }
    let scale = (1.0 - params.poisson) * params.volume_rate / (PI * r3);
    Ok([scale * de, scale * dn, scale * params.depth])
}

/// Line-of-sight component `u . look`.
pub fn project_los(u: [f64; 3], look: &LookVector) -> f64 {
    let l = look.components();
    u[0] * l[0] + u[1] * l[1] + u[2] * l[2]
}

pub fn toy_sine(theta: f64, x: f64) -> f64 {
    (theta * x).sin()
}

pub fn toy_mean(theta: f64, _x: f64) -> f64 {
    theta
}

/// `theta_1 + theta_2 sin(5 x_1)`.
pub fn toy_trig2d(theta: [f64; 2], x: [f64; 2]) -> f64 {
    theta[0] + theta[1] * (5.0 * x[0]).sin()
}

/// The reality used with [`toy_trig2d`]:
/// `((30 + 5 x_1 sin(5 x_1)) (4 + exp(-5 x_2)) - 100) / 6`.
pub fn lim_reality(x: [f64; 2]) -> f64 {
    ((30.0 + 5.0 * x[0] * (5.0 * x[0]).sin()) * (4.0 + (-5.0 * x[1]).exp()) - 100.0) / 6.0
}

/// A forward model evaluated on a whole design at once.
pub trait ForwardModel: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn n_params(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Prior box used when the caller does not supply one.
    fn default_bounds(&self) -> Vec<(f64, f64)>;
    fn evaluate(&self, theta: &[f64], inputs: &DMatrix<f64>, look: Option<&LookVector>) -> Result<DVector<f64>>;

    fn check(&self, theta: &[f64], inputs: &DMatrix<f64>) -> Result<()> {
        if theta.len() != self.n_params() {
            return domain(format!(
                "{} takes {} parameters, got {}",
                self.name(),
                self.n_params(),
                theta.len()
            ));
        }
        if inputs.ncols() != self.input_dim() {
            return domain(format!(
                "{} needs {}-dimensional inputs, got {}",
                self.name(),
                self.input_dim(),
                inputs.ncols()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mogi;

impl ForwardModel for Mogi {
    fn name(&self) -> &'static str {
        "mogi"
    }
    fn n_params(&self) -> usize {
        5
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn default_bounds(&self) -> Vec<(f64, f64)> {
        MogiParams::BOUNDS.to_vec()
    }
    /// LoS velocity in m/yr; without a look vector the vertical component is returned.
    fn evaluate(&self, theta: &[f64], inputs: &DMatrix<f64>, look: Option<&LookVector>) -> Result<DVector<f64>> {
        self.check(theta, inputs)?;
        let params = MogiParams::from_slice(theta)?;
        let look = look.copied().unwrap_or(LookVector::VERTICAL);
        let mut out = DVector::zeros(inputs.nrows());
        for i in 0..inputs.nrows() {
            let u = mogi_displacement_3d(&params, [inputs[(i, 0)], inputs[(i, 1)]])?;
            out[i] = project_los(u, &look) * SECONDS_PER_YEAR;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ToySine;

impl ForwardModel for ToySine {
    fn name(&self) -> &'static str {
        "toy_sine"
    }
    fn n_params(&self) -> usize {
        1
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn default_bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 3.0)]
    }
    fn evaluate(&self, theta: &[f64], inputs: &DMatrix<f64>, _look: Option<&LookVector>) -> Result<DVector<f64>> {
        self.check(theta, inputs)?;
        Ok(inputs.column(0).map(|x| toy_sine(theta[0], x)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ToyMean;

impl ForwardModel for ToyMean {
    fn name(&self) -> &'static str {
        "toy_mean"
    }
    fn n_params(&self) -> usize {
        1
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn default_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-10.0, 10.0)]
    }
    fn evaluate(&self, theta: &[f64], inputs: &DMatrix<f64>, _look: Option<&LookVector>) -> Result<DVector<f64>> {
        self.check(theta, inputs)?;
        Ok(inputs.column(0).map(|x| toy_mean(theta[0], x)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ToyTrig2d;

impl ForwardModel for ToyTrig2d {
    fn name(&self) -> &'static str {
        "toy_trig2d"
    }
    fn n_params(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn default_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-50.0, 50.0), (-50.0, 50.0)]
    }
    fn evaluate(&self, theta: &[f64], inputs: &DMatrix<f64>, _look: Option<&LookVector>) -> Result<DVector<f64>> {
        self.check(theta, inputs)?;
        Ok(DVector::from_fn(inputs.nrows(), |i, _| {
            toy_trig2d([theta[0], theta[1]], [inputs[(i, 0)], inputs[(i, 1)]])
        }))
    }
}

pub const MODEL_NAMES: [&str; 4] = ["mogi", "toy_sine", "toy_mean", "toy_trig2d"];

/// Looks up a registered forward model.
pub fn by_name(name: &str) -> Result<Box<dyn ForwardModel>> {
    match name {
        "mogi" => Ok(Box::new(Mogi)),
        "toy_sine" => Ok(Box::new(ToySine)),
        "toy_mean" => Ok(Box::new(ToyMean)),
        "toy_trig2d" => Ok(Box::new(ToyTrig2d)),
        other => domain(format!(
            "unknown forward model '{other}', expected one of {}",
            MODEL_NAMES.join(", ")
        )),
    }
}
