//! Preference-optimization laboratory: a tiny transformer language model,
//! the Cringe family of contrastive losses (binary, pairwise soft-margin,
//! hard-margin), DPO and unlikelihood baselines, pair mining, the iterative
//! generate-label-retrain loop, and the metrics used to evaluate it.

pub mod config;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod losses;
pub mod numerics;
pub mod pco;
pub mod preferences;
pub mod tinylm;

pub use error::{Error, Result};
