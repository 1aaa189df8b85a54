//! Calibration of physical models from several biased, spatially
//! correlated data sources.
//!
//! Field data from source `l` are modelled as
//! `y_l(x) = f(x, theta) + delta(x) + delta_l(x) + mu_l + eps_l`, with a
//! discrepancy `delta` shared by all sources and a measurement bias
//! `delta_l` specific to each one.

pub mod data;
pub mod discrepancy;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod inference;
pub mod kernels;
pub mod likelihood;
pub mod linalg;
pub mod predict;
pub mod verify;

pub use error::{Error, Result};
