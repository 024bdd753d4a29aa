//! Training orchestration: supervised fine-tuning, preference training with
//! any loss variant, and the iterative generate-label-retrain loop that
//! always restarts from the fine-tuned model.

mod iterate;
mod trainer;

pub use iterate::{pco_run, Evaluator, IterationOutcome, IterationReport, Mixing, PcoSettings};
pub use trainer::{
    batch_order, gate_saturation, mean_ce, sft, train, train_pref, EarlyStopping, Hooks, LrSchedule, TrainData,
    TrainOutcome, TrainPlan,
};
