//! Blocked Metropolis-within-Gibbs sampling.

pub mod adapt;
pub mod diagnostics;
pub mod init;
pub mod priors;
pub mod sampler;
pub mod transform;
pub mod update;

pub use crate::model::{Block, HazardParams, ParameterState};
pub use adapt::rm_adapt;
pub use diagnostics::{mcse, rhat, summarize_values, SummaryRow};
pub use sampler::{run_chains, AcceptanceStats, ChainConfig, ChainDraws, PosteriorDraws, Stage};
pub use update::{gibbs_tau, mh_update};
