//! Preference and contrastive losses: cross-entropy, the token-level Cringe
//! contrastive loss, its binary, pairwise soft-margin and hard-margin
//! sequence objectives, plus DPO and unlikelihood baselines.
//!
//! All reductions are masked means over valid response tokens of the whole
//! batch, except DPO which averages over pairs.

mod batch;
mod config;
mod objective;
mod sampler;
pub mod sequence;
pub mod token;

pub use batch::{BinaryBatch, BinaryItem, Label, PairBatch, PreferencePair};
pub use config::{LossConfig, LossVariant};
pub use objective::{
    binarize_pairs, binary_objective, gate, pair_objective, pairwise_margin, reference_logprobs, score, score_pair,
};
pub use sampler::{categorical, keyed_uniform, CandidateSampler};
pub use sequence::{Pathways, ScoredPair, ScoredSeq};
pub use token::{ce_token_loss, cringe_candidates, cringe_token_loss, unlikelihood_token_loss};
