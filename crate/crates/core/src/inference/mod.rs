//! Priors, maximum likelihood and posterior sampling.

mod mcmc;
mod mle;
mod params;
mod prior;
mod summary;

pub use mcmc::{mcmc_run, BlockAcceptance, McmcSettings, PosteriorSamples};
pub use mle::{closed_form_mean_mle, fixed_names, mle_fit, MleResult, MleSettings, StartTrace};
pub use params::{initial_state, model_coords, parse_coords, Coord, ParamLayout, Transform};
pub use prior::{jr_prior_logdensity, log_posterior, log_prior, JrParams, PriorSpec};
pub use summary::{posterior_summaries, summarize, ChainReport, CoordSummary};
