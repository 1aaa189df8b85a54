use std::fs::File;
use std::path::{Path, PathBuf};

use mscal::inference::{McmcSettings, MleSettings};
use mscal::kernels::KernelFamily;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::{ModeArg, ModelArg};
use crate::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Loads a JSON config, checking `schema_version` when present. A missing
/// path gives the defaults.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let mut v: serde_json::Value = serde_json::from_reader(File::open(path)?)?;
    if let Some(obj) = v.as_object_mut() {
        if let Some(ver) = obj.remove("schema_version") {
            if ver.as_u64() != Some(SCHEMA_VERSION as u64) {
                return Err(CliError::Usage(format!(
                    "config schema_version {ver} is not supported, expected {SCHEMA_VERSION}"
                )));
            }
        }
    }
    Ok(serde_json::from_value(v)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub model: ModelArg,
    /// Scaling parameter of the S-GaSP; the default grows with the square root of n.
    pub lambda_z: Option<f64>,
    pub kernel: KernelFamily,
    /// `None` drops the per-source bias processes.
    pub bias_kernel: Option<KernelFamily>,
    pub fit_mean: bool,
    pub forward: String,
    pub data: Vec<PathBuf>,
    /// Overrides the look vectors found in observation sidecars.
    pub looks: Vec<[f64; 3]>,
    /// Box for the calibration parameters; defaults to the forward model's.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub mode: ModeArg,
    pub seed: u64,
    pub mle: MleSettings,
    pub mcmc: McmcSettings,
    /// Discrepancy draws stored with a maximum likelihood fit.
    pub delta_draws: usize,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig {
            model: ModelArg::Sgasp,
            lambda_z: None,
            kernel: KernelFamily::Matern52,
            bias_kernel: Some(KernelFamily::Matern52),
            fit_mean: false,
            forward: String::new(),
            data: Vec::new(),
            looks: Vec::new(),
            bounds: None,
            mode: ModeArg::Mle,
            seed: 0,
            mle: MleSettings::default(),
            mcmc: McmcSettings::default(),
            delta_draws: 100,
        }
    }
}
