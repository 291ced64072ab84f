//! Counterfactual inference in structural causal models whose image
//! mechanism is a hierarchical latent-variable model.

pub mod autodiff;
pub mod cli;
pub mod cftrain;
pub mod error;
pub mod format;
pub mod ladder;
pub mod mechanisms;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scm;
pub mod soundness;
pub mod synthpop;
pub mod vqglm;

pub use error::{Error, Result};
