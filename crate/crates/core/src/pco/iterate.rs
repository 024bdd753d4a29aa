use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::MetricReport;
use crate::losses::{BinaryItem, LossConfig, LossVariant};
use crate::numerics::{checkpoint, Scalar};
use crate::preferences::{label_by_median, mine_best_worst, subsample_indices, PreferenceDataset, RewardModel, SampleSpec};
use crate::tinylm::{DecodeStrategy, TinyLm};

use super::trainer::{train, train_pref, Hooks, TrainData, TrainPlan};

/// How mined data joins the original data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// 1:1 by count, down-sampling the larger side.
    Balanced,
    Concat,
}

/// Generation and labeling settings of the iterative loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcoSettings {
    pub samples_per_prompt: usize,
    pub strategy: DecodeStrategy,
    pub max_new_tokens: usize,
    pub mixing: Mixing,
}

impl Default for PcoSettings {
    fn default() -> Self {
        PcoSettings {
            samples_per_prompt: 4,
            strategy: DecodeStrategy::Temperature(0.7),
            max_new_tokens: 300,
            mixing: Mixing::Balanced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration_index: usize,
    pub variant: LossVariant,
    /// Training examples by provenance: pairs, or labeled responses for
    /// binary feedback.
    pub pairs_used: BTreeMap<String, usize>,
    /// Original plus newly labeled examples before mixing.
    pub available_before_mixing: usize,
    pub final_train_loss: f64,
    pub gate_saturation: Vec<f64>,
    pub metrics: Option<MetricReport>,
    pub checkpoint: Option<String>,
}

pub struct IterationOutcome<T: Scalar> {
    pub report: IterationReport,
    pub model: TinyLm<T>,
    /// Pairs mined during this iteration (empty for iteration 1 and binary runs).
    pub mined: PreferenceDataset,
}

/// Evaluation applied to each iteration's model.
pub type Evaluator<'a, T> = &'a (dyn Fn(&TinyLm<T>) -> Result<MetricReport> + Sync);

fn mix<X: Clone>(original: &[X], mined: &[X], mixing: Mixing, seed: u64) -> (Vec<X>, usize, usize) {
    let (a, b) = match mixing {
        Mixing::Concat => ((0..original.len()).collect(), (0..mined.len()).collect()),
        Mixing::Balanced if original.is_empty() || mined.is_empty() => {
            ((0..original.len()).collect(), (0..mined.len()).collect())
        }
        Mixing::Balanced => {
            let n = original.len().min(mined.len());
            (subsample_indices(original.len(), n, seed, 0), subsample_indices(mined.len(), n, seed, 1))
        }
    };
    let mut out: Vec<X> = a.iter().map(|&i| original[i].clone()).collect();
    out.extend(b.iter().map(|&i| mined[i].clone()));
    (out, a.len(), b.len())
}

/// The iterative loop: iteration 1 trains on `original`; each later
/// iteration samples responses to `prompts` from the previous iteration's
/// model, labels them with `reward`, mixes them with `original`, and trains
/// again from `sft`. Binary Cringe labels each response by a median split
/// instead of pairing best and worst.
#[allow(clippy::too_many_arguments)]
pub fn pco_run<T: Scalar>(
    sft: &TinyLm<T>,
    original: &PreferenceDataset,
    prompts: &[Vec<usize>],
    reward: &RewardModel,
    iterations: usize,
    cfg: &LossConfig,
    plan: &TrainPlan,
    settings: &PcoSettings,
    evaluate: Option<Evaluator<'_, T>>,
    out_dir: Option<&Path>,
) -> Result<Vec<IterationOutcome<T>>> {
    if iterations < 1 {
        return Err(Error::Config("iterations must be >= 1".into()));
    }
    if original.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let binary = cfg.variant == LossVariant::BinaryCringe;
    let original_items: Vec<BinaryItem> = original.binarize().items;
    let probe: Vec<_> = original.pairs().into_iter().take(32).collect();
    let mut outcomes: Vec<IterationOutcome<T>> = Vec::with_capacity(iterations);
    for it in 1..=iterations {
        let plan_i = TrainPlan {
            iteration_index: it,
            ..plan.clone()
        };
        let hooks = Hooks {
            evaluate: None,
            probe_pairs: Some(&probe),
        };
        let spec = SampleSpec {
            n: settings.samples_per_prompt,
            strategy: settings.strategy,
            max_new_tokens: settings.max_new_tokens,
            seed: plan.seed,
            iteration: it,
        };
        let mut mined = PreferenceDataset::new();
        let mut pairs_used = BTreeMap::new();
        let (trained, available) = if binary {
            let new_items = match outcomes.last() {
                Some(prev) => label_by_median(&prev.model, prompts, reward, &spec)?,
                None => Vec::new(),
            };
            let (items, n_orig, n_new) = mix(&original_items, &new_items, settings.mixing, plan.seed);
            pairs_used.insert("original".to_string(), n_orig);
            if it > 1 {
                pairs_used.insert(format!("mined_iteration_{it}"), n_new);
            }
            let available = original_items.len() + new_items.len();
            (train(sft.clone(), TrainData::Binary(&items), cfg, &plan_i, &hooks)?, available)
        } else {
            let train_set = match outcomes.last() {
                Some(prev) => {
                    mined = mine_best_worst(&prev.model, prompts, reward, &spec)?;
                    match settings.mixing {
                        Mixing::Concat => PreferenceDataset::merge(original, &mined),
                        Mixing::Balanced => PreferenceDataset::merge_balanced(original, &mined, plan.seed),
                    }
                }
                None => original.clone(),
            };
            pairs_used = train_set.provenance_counts();
            let available = original.len() + mined.len();
            (train_pref(sft, &train_set.pairs(), cfg, &plan_i, &hooks)?, available)
        };
        let checkpoint = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("iteration_{it}.ckpt"));
                let meta = serde_json::json!({
                    "lm": trained.model.config,
                    "iteration": it,
                    "variant": cfg.variant,
                });
                checkpoint::save(&path, &trained.model.params, plan.seed, None, meta)?;
                Some(path.display().to_string())
            }
            None => None,
        };
        let metrics = match evaluate {
            Some(f) => Some(f(&trained.model)?),
            None => None,
        };
        let report = IterationReport {
            iteration_index: it,
            variant: cfg.variant,
            pairs_used,
            available_before_mixing: available,
            final_train_loss: trained.final_loss(),
            gate_saturation: trained.gate_saturation.clone(),
            metrics,
            checkpoint,
        };
        log::info!("finished iteration {it}: {:?}", report.pairs_used);
        outcomes.push(IterationOutcome {
            report,
            model: trained.model,
            mined,
        });
    }
    Ok(outcomes)
}
