//! End-to-end toy experiments built from the library pieces: corpus,
//! fine-tuning, pair mining, the iterative loop, and evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RewardSpec};
use crate::corpus::Grammar;
use crate::error::Result;
use crate::evalkit::{evaluate_outputs, MetricReport, Output};
use crate::losses::{LossConfig, LossVariant};
use crate::numerics::rng::{self, stream};
use crate::numerics::Scalar;
use crate::pco::{pco_run, sft, Hooks, IterationReport, TrainOutcome};
use crate::preferences::{mine_best_worst, mine_repetition_pairs, PreferenceDataset, RewardModel, SampleSpec};
use crate::tinylm::{decode, DecodeStrategy, NextToken, PromptResponse, TinyLm, Vocab};

/// Sentences and prompts for one experiment. Fine-tuning uses the first
/// sentences of the corpus; prompt and evaluation splits come from disjoint
/// index ranges after the whole corpus.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub vocab: Vocab,
    pub sft: Vec<PromptResponse>,
    pub pair_prompts: Vec<Vec<usize>>,
    pub unlabeled_prompts: Vec<Vec<usize>>,
    pub eval_prompts: Vec<Vec<usize>>,
    pub eval_references: Vec<Vec<usize>>,
}

impl ToyData {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let g = Grammar::new(cfg.corpus.clone(), cfg.seed)?;
        let d = &cfg.data;
        let sft = g.sentences(0..d.sft as u64);
        // held-out ranges follow the whole written corpus
        let mut start = d.sft.max(cfg.corpus.n_sentences) as u64;
        let mut take = |n: usize| {
            let r = start..start + n as u64;
            start += n as u64;
            g.sentences(r)
        };
        let prompts = |s: Vec<PromptResponse>| s.into_iter().map(|x| x.prompt_tokens).collect::<Vec<_>>();
        let pair_prompts = prompts(take(d.pair_prompts));
        let unlabeled_prompts = prompts(take(d.unlabeled_prompts));
        let eval = take(d.eval);
        Ok(ToyData {
            vocab: g.vocab(),
            sft,
            pair_prompts,
            unlabeled_prompts,
            eval_prompts: eval.iter().map(|s| s.prompt_tokens.clone()).collect(),
            eval_references: eval.into_iter().map(|s| s.response_tokens).collect(),
        })
    }
}

/// Builds the configured reward model; hidden coefficients derive from the seed.
pub fn reward_model(spec: RewardSpec, vocab_size: usize, seed: u64) -> RewardModel {
    match spec {
        RewardSpec::RepetitionPenalty { n } => RewardModel::RepetitionPenalty { n },
        RewardSpec::HiddenLinear { length_penalty } => {
            RewardModel::hidden_linear(vocab_size, rng::derive_seed(seed, &[stream::REWARD]), length_penalty)
        }
    }
}

/// Greedy outputs for every prompt, in prompt order.
pub fn greedy_outputs<M: NextToken + Sync>(model: &M, prompts: &[Vec<usize>], max_new_tokens: usize) -> Result<Vec<Output>> {
    prompts
        .par_iter()
        .map(|p| {
            let mut r = rng::rng_for(0, &[]);
            let g = decode(model, p, DecodeStrategy::Greedy, max_new_tokens, &mut r)?;
            Ok(Output {
                prompt: p.clone(),
                response: g.tokens,
            })
        })
        .collect()
}

/// Metric report of `model` on the held-out prompts against `baseline` outputs.
pub fn evaluate_model<M: NextToken + Sync>(
    model: &M,
    data: &ToyData,
    baseline: &[Output],
    judge: &RewardModel,
    cfg: &ExperimentConfig,
) -> Result<MetricReport> {
    let outs = greedy_outputs(model, &data.eval_prompts, cfg.eval.max_new_tokens)?;
    evaluate_outputs(&outs, &data.eval_references, baseline, judge, cfg.eval.ngram, cfg.seed)
}

pub fn run_sft<T: Scalar>(cfg: &ExperimentConfig, data: &ToyData) -> Result<TrainOutcome<T>> {
    let model = TinyLm::<T>::new(cfg.lm.clone(), cfg.seed)?;
    let plan = crate::pco::TrainPlan {
        seed: cfg.seed,
        ..cfg.sft.clone()
    };
    sft(model, &data.sft, &plan, &Hooks::default())
}

fn pref_plan(cfg: &ExperimentConfig) -> crate::pco::TrainPlan {
    crate::pco::TrainPlan {
        seed: cfg.seed,
        ..cfg.pref.clone()
    }
}

/// Iterative training with `variant`, one metric report per iteration.
pub fn run_iterations<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &ToyData,
    sft_model: &TinyLm<T>,
    original: &PreferenceDataset,
    reward: &RewardModel,
    variant: LossVariant,
    baseline: &[Output],
) -> Result<Vec<IterationReport>> {
    let loss = LossConfig { variant, ..cfg.loss };
    let eval = |m: &TinyLm<T>| evaluate_model(m, data, baseline, reward, cfg);
    let outcomes = pco_run(
        sft_model,
        original,
        &data.unlabeled_prompts,
        reward,
        cfg.iterations,
        &loss,
        &pref_plan(cfg),
        &cfg.pco,
        Some(&eval),
        None,
    )?;
    Ok(outcomes.into_iter().map(|o| o.report).collect())
}

/// Repetition experiment: pairs mined as (blocked greedy, greedy), then
/// Pairwise and Binary Cringe iterations judged by repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub seed: u64,
    pub mined_pairs: usize,
    pub mining_fallbacks: usize,
    pub sft: MetricReport,
    pub pairwise: Vec<IterationReport>,
    pub binary: Vec<IterationReport>,
}

/// Iteration-gain experiment: original pairs are best/worst-of-n under a
/// hidden linear reward; win rates are judged by the same reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub seed: u64,
    pub original_pairs: usize,
    pub iterations: Vec<IterationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub seed: u64,
    pub config_hash: String,
    pub sft_final_loss: f64,
    pub repetition: RepetitionReport,
    pub gain: GainReport,
}

pub fn run_repetition<T: Scalar>(cfg: &ExperimentConfig, data: &ToyData, sft_model: &TinyLm<T>) -> Result<RepetitionReport> {
    let judge = RewardModel::RepetitionPenalty { n: cfg.eval.ngram };
    let baseline = greedy_outputs(sft_model, &data.eval_prompts, cfg.eval.max_new_tokens)?;
    let sft_metrics = evaluate_outputs(&baseline, &data.eval_references, &baseline, &judge, cfg.eval.ngram, cfg.seed)?;
    let mined = mine_repetition_pairs(sft_model, &data.pair_prompts, cfg.eval.ngram, cfg.pco.max_new_tokens)?;
    let run = |v| run_iterations(cfg, data, sft_model, &mined.dataset, &judge, v, &baseline);
    Ok(RepetitionReport {
        seed: cfg.seed,
        mined_pairs: mined.dataset.len(),
        mining_fallbacks: mined.fallbacks,
        sft: sft_metrics,
        pairwise: run(LossVariant::PairwiseCringe)?,
        binary: run(LossVariant::BinaryCringe)?,
    })
}

pub fn run_gain<T: Scalar>(cfg: &ExperimentConfig, data: &ToyData, sft_model: &TinyLm<T>, reward: &RewardModel) -> Result<GainReport> {
    let baseline = greedy_outputs(sft_model, &data.eval_prompts, cfg.eval.max_new_tokens)?;
    let spec = SampleSpec {
        n: cfg.pco.samples_per_prompt,
        strategy: cfg.pco.strategy,
        max_new_tokens: cfg.pco.max_new_tokens,
        seed: cfg.seed,
        iteration: 0,
    };
    let mut original = PreferenceDataset::new();
    for e in mine_best_worst(sft_model, &data.pair_prompts, reward, &spec)?.entries() {
        original.push(e.pair.clone(), crate::preferences::Provenance::Original, e.rewards)?;
    }
    Ok(GainReport {
        seed: cfg.seed,
        original_pairs: original.len(),
        iterations: run_iterations(cfg, data, sft_model, &original, reward, cfg.loss.variant, &baseline)?,
    })
}

/// Both toy experiments on one shared fine-tuned model.
pub fn run_toy<T: Scalar>(cfg: &ExperimentConfig, gain_reward: RewardSpec) -> Result<ToyReport> {
    cfg.validate()?;
    let data = ToyData::generate(cfg)?;
    let sft_out = run_sft::<T>(cfg, &data)?;
    let reward = reward_model(gain_reward, cfg.lm.vocab_size, cfg.seed);
    Ok(ToyReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        sft_final_loss: sft_out.final_loss(),
        repetition: run_repetition(cfg, &data, &sft_out.model)?,
        gain: run_gain(cfg, &data, &sft_out.model, &reward)?,
    })
}
