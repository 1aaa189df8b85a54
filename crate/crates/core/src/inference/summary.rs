use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics, Statistics};

use super::mcmc::{BlockAcceptance, McmcSettings, PosteriorSamples};
use crate::error::{Error, Result};

/// Posterior mean, standard deviation, median and central 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CoordSummary {
    pub fn covers(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Summary of one column of draws. The standard deviation uses the `m - 1`
/// denominator (zero for one draw); quantiles follow the default of
/// `statrs`.
pub fn summarize(name: &str, values: &[f64]) -> Result<CoordSummary> {
    if values.is_empty() {
        return Err(Error::Empty(format!("no draws for {name}")));
    }
    let mean = values.mean();
    let sd = if values.len() > 1 { values.std_dev() } else { 0.0 };
    let mut data = Data::new(values.to_vec());
    Ok(CoordSummary {
        name: name.to_string(),
        mean,
        sd,
        median: data.median(),
        lower: data.quantile(0.025),
        upper: data.quantile(0.975),
    })
}

pub fn posterior_summaries(samples: &PosteriorSamples) -> Result<Vec<CoordSummary>> {
    if samples.is_empty() {
        return Err(Error::Empty("posterior chain has no retained draws".into()));
    }
    samples
        .names
        .iter()
        .map(|n| summarize(n, &samples.column(n)?))
        .collect()
}

/// Contents of the JSON summary written next to a chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainReport {
    pub seed: u64,
    pub settings: McmcSettings,
    pub retained: usize,
    pub acceptance: Vec<BlockAcceptance>,
    pub summaries: Vec<CoordSummary>,
}

impl ChainReport {
    pub fn new(samples: &PosteriorSamples) -> Result<Self> {
        Ok(ChainReport {
            seed: samples.seed,
            settings: samples.settings.clone(),
            retained: samples.len(),
            acceptance: samples.acceptance.clone(),
            summaries: posterior_summaries(samples)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_chain() {
        let s = summarize("c", &[2.5; 40]).unwrap();
        assert_eq!((s.mean, s.sd, s.lower, s.upper, s.median), (2.5, 0.0, 2.5, 2.5, 2.5));
    }

    #[test]
    fn two_value_chain() {
        let v: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let s = summarize("b", &v).unwrap();
        assert_eq!(s.mean, 0.5);
        assert_eq!((s.lower, s.upper), (0.0, 1.0));
    }

    #[test]
    fn empty_chain_is_an_error() {
        assert!(summarize("e", &[]).is_err());
    }
}
