//! Reward models, preference datasets, and pair construction: repetition
//! mining (blocked greedy vs greedy), best/worst-of-n pairing, binarization,
//! and median-split labeling for binary feedback.

mod dataset;
mod mining;
mod reward;

pub use dataset::{subsample_indices, DatasetEntry, PreferenceDataset, Provenance};
pub use mining::{
    best_worst_of_n, label_by_median, median_labels, mine_best_worst, mine_repetition_pairs, select_best_worst,
    MiningOutcome, SampleSpec, ScoredChoice,
};
pub use reward::RewardModel;
