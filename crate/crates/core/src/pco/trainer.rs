use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    binary_objective, gate, pair_objective, pairwise_margin, sequence, BinaryBatch, BinaryItem, CandidateSampler, Label,
    LossConfig, LossVariant, PreferencePair,
};
use crate::numerics::rng::{self, stream};
use crate::numerics::{adamw_step, AdamWConfig, Graph, OptimState, Scalar};
use crate::tinylm::{PromptResponse, TinyLm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    pub eval_every: usize,
    pub patience: usize,
}

/// Optimization budget and schedule for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate is `optimizer.lr`.
    pub optimizer: AdamWConfig,
    pub warmup_steps: usize,
    pub schedule: LrSchedule,
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    pub early_stopping: Option<EarlyStopping>,
    pub seed: u64,
    pub iteration_index: usize,
    pub start_checkpoint: Option<PathBuf>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            steps: 500,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            warmup_steps: 0,
            schedule: LrSchedule::Constant,
            grad_clip: Some(1.0),
            log_every: 50,
            early_stopping: None,
            seed: 0,
            iteration_index: 1,
            start_checkpoint: None,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("plan: {m}")));
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return bad("steps, batch_size and log_every must be >= 1");
        }
        if self.iteration_index < 1 {
            return bad("iteration_index must be >= 1");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be > 0");
            }
        }
        if let Some(e) = self.early_stopping {
            if e.eval_every == 0 || e.patience == 0 {
                return bad("early_stopping needs eval_every >= 1 and patience >= 1");
            }
        }
        if let Some(p) = &self.start_checkpoint {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.display().to_string()));
            }
        }
        self.optimizer.validate()
    }

    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.optimizer.lr;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let frac = (step - self.warmup_steps) as f64 / span;
        match self.schedule {
            LrSchedule::Constant => peak,
            LrSchedule::Linear => peak * (1.0 - frac),
            LrSchedule::Cosine => peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        }
    }
}

/// What a training run consumes.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    /// Demonstrations trained with cross-entropy.
    Sequences(&'a [PromptResponse]),
    /// Preference pairs; `reference` holds the frozen model's unnormalized
    /// `(log p(y_w), log p(y_l))` per pair, required by DPO.
    Pairs {
        pairs: &'a [PreferencePair],
        reference: Option<&'a [(f64, f64)]>,
    },
    /// Independently labeled responses.
    Binary(&'a [BinaryItem]),
}

impl TrainData<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Sequences(s) => s.len(),
            TrainData::Pairs { pairs, .. } => pairs.len(),
            TrainData::Binary(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Optional callbacks during training.
#[derive(Default)]
pub struct Hooks<'a, T: Scalar> {
    /// Held-out score for early stopping; higher is better.
    pub evaluate: Option<&'a (dyn Fn(&TinyLm<T>) -> Result<f64> + Sync)>,
    /// Fixed pairs on which gate saturation is logged.
    pub probe_pairs: Option<&'a [PreferencePair]>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub model: TinyLm<T>,
    /// Loss at every step taken.
    pub losses: Vec<f64>,
    /// Mean loss per `log_every` window.
    pub window_means: Vec<f64>,
    /// Fraction of probe pairs with gate below 0.1, per window.
    pub gate_saturation: Vec<f64>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn final_loss(&self) -> f64 {
        self.window_means.last().copied().unwrap_or(f64::NAN)
    }
}

/// Deterministic epoch-wise shuffled batches of indices.
pub fn batch_order(n: usize, batch_size: usize, steps: usize, seed: u64, iteration: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0u64;
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    while out.len() < steps {
        let mut batch = Vec::with_capacity(batch_size.min(n));
        while batch.len() < batch_size.min(n) {
            if pos == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut rng::rng_for(seed, &[stream::SHUFFLE, iteration as u64, epoch]));
                epoch += 1;
                pos = 0;
            }
            batch.push(order[pos]);
            pos += 1;
        }
        out.push(batch);
    }
    out
}

/// Fraction of `pairs` whose gate value is below 0.1 under `model`.
pub fn gate_saturation<T: Scalar>(model: &TinyLm<T>, pairs: &[PreferencePair], cfg: &LossConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut closed = 0;
    for p in pairs {
        let m = pairwise_margin(model, p, cfg.normalize_margin)?;
        if gate(m, cfg.b, cfg.tau) < 0.1 {
            closed += 1;
        }
    }
    Ok(closed as f64 / pairs.len() as f64)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Loss of one batch on a fresh tape, with gradients accumulated into the
/// model's parameter buffers.
fn batch_loss<T: Scalar>(
    model: &mut TinyLm<T>,
    data: TrainData<'_>,
    batch: &[usize],
    cfg: &LossConfig,
    sampler_seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let mut sampler = CandidateSampler::new(sampler_seed);
    let loss = match data {
        TrainData::Sequences(seqs) => {
            let items = batch
                .iter()
                .map(|&i| Ok((crate::losses::score(&mut g, &bound, &seqs[i])?, Label::Positive)))
                .collect::<Result<Vec<_>>>()?;
            sequence::binary_cringe(&mut g, &items, cfg, &mut sampler)?
        }
        TrainData::Pairs { pairs, reference } => {
            let sel: Vec<PreferencePair> = batch.iter().map(|&i| pairs[i].clone()).collect();
            let refs: Option<Vec<(f64, f64)>> = reference.map(|r| batch.iter().map(|&i| r[i]).collect());
            pair_objective(&mut g, &bound, &sel, cfg, &mut sampler, refs.as_deref())?
        }
        TrainData::Binary(items) => {
            let b = BinaryBatch {
                items: batch.iter().map(|&i| items[i].clone()).collect(),
            };
            binary_objective(&mut g, &bound, &b, cfg, &mut sampler)?
        }
    };
    let value = g.scalar_value(loss)?.as_f64();
    g.backward(loss)?;
    let vars = bound.vars().to_vec();
    model.params.zero_grad();
    model.params.accumulate_grads(&g, &vars)?;
    Ok(value)
}

/// Trains `model` on `data` with AdamW. The candidate sampler of each step
/// is keyed by `(seed, iteration, step)`.
pub fn train<T: Scalar>(
    mut model: TinyLm<T>,
    data: TrainData<'_>,
    cfg: &LossConfig,
    plan: &TrainPlan,
    hooks: &Hooks<'_, T>,
) -> Result<TrainOutcome<T>> {
    plan.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let TrainData::Pairs { pairs, reference } = data {
        if cfg.variant == LossVariant::Dpo && reference.is_none_or(|r| r.len() != pairs.len()) {
            return Err(Error::invalid("train", "DPO needs one reference pair of log-probabilities per pair"));
        }
    }
    let batches = batch_order(data.len(), plan.batch_size, plan.steps, plan.seed, plan.iteration_index);
    let mut state = OptimState::<T>::new(&model.params, plan.optimizer)?;
    let probe = hooks.probe_pairs.filter(|p| {
        !p.is_empty() && matches!(cfg.variant, LossVariant::PairwiseCringe | LossVariant::HardMarginCringe)
    });
    let mut out = TrainOutcome {
        model: model.clone(),
        losses: Vec::with_capacity(plan.steps),
        window_means: Vec::new(),
        gate_saturation: Vec::new(),
        steps_run: 0,
        stopped_early: false,
    };
    if let Some(p) = probe {
        out.gate_saturation.push(gate_saturation(&model, p, cfg)?);
    }
    let mut best: Option<(f64, TinyLm<T>)> = None;
    let mut since_best = 0;
    let mut window_start = 0;
    for (step, batch) in batches.iter().enumerate() {
        let seed = rng::derive_seed(plan.seed, &[stream::CRINGE, plan.iteration_index as u64, step as u64]);
        let loss = batch_loss(&mut model, data, batch, cfg, seed).map_err(|e| diverged(step, e))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        if let Some(c) = plan.grad_clip {
            model.params.clip_grad_norm(c);
        }
        adamw_step(&mut model.params, &mut state, plan.lr_at(step))?;
        out.losses.push(loss);
        out.steps_run = step + 1;
        if out.steps_run % plan.log_every == 0 || out.steps_run == plan.steps {
            let w = &out.losses[window_start..];
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            window_start = out.losses.len();
            out.window_means.push(mean);
            log::info!("iteration {} step {}: loss {mean:.5}", plan.iteration_index, out.steps_run);
            if let Some(p) = probe {
                let s = gate_saturation(&model, p, cfg)?;
                if out.gate_saturation.last().is_some_and(|&prev| s < prev) {
                    log::warn!("gate saturation fell from {:.3} to {s:.3} at step {}", out.gate_saturation.last().unwrap(), out.steps_run);
                }
                out.gate_saturation.push(s);
            }
        }
        if let (Some(es), Some(eval)) = (plan.early_stopping, hooks.evaluate) {
            if out.steps_run % es.eval_every == 0 {
                let score = eval(&model)?;
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, model.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= es.patience {
                        out.stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    out.model = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok(out)
}

/// Mean per-token cross-entropy of `seqs` under `model`.
pub fn mean_ce<T: Scalar>(model: &TinyLm<T>, seqs: &[PromptResponse]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs {
        let n = s.valid_count();
        total -= model.sequence_logprob(s, false)?.as_f64();
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / count as f64)
}

/// Cross-entropy fine-tuning on demonstrations.
pub fn sft<T: Scalar>(
    model: TinyLm<T>,
    corpus: &[PromptResponse],
    plan: &TrainPlan,
    hooks: &Hooks<'_, T>,
) -> Result<TrainOutcome<T>> {
    let cfg = LossConfig {
        variant: LossVariant::Ce,
        ..LossConfig::default()
    };
    train(model, TrainData::Sequences(corpus), &cfg, plan, hooks)
}

/// Preference training from `start` (the SFT model), which also serves as
/// the frozen DPO reference.
pub fn train_pref<T: Scalar>(
    start: &TinyLm<T>,
    pairs: &[PreferencePair],
    cfg: &LossConfig,
    plan: &TrainPlan,
    hooks: &Hooks<'_, T>,
) -> Result<TrainOutcome<T>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reference = if cfg.variant == LossVariant::Dpo {
        Some(crate::losses::reference_logprobs(start, pairs)?)
    } else {
        None
    };
    train(
        start.clone(),
        TrainData::Pairs {
            pairs,
            reference: reference.as_deref(),
        },
        cfg,
        plan,
        hooks,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch() {
        let b = batch_order(10, 4, 5, 3, 1);
        assert_eq!(b.len(), 5);
        let mut first: Vec<usize> = b.iter().flatten().take(10).copied().collect();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batch_order(10, 4, 5, 3, 1));
        assert_ne!(b, batch_order(10, 4, 5, 4, 1));
        assert_eq!(batch_order(3, 8, 2, 0, 1)[0].len(), 3);
    }

    #[test]
    fn schedules() {
        let mut p = TrainPlan {
            steps: 10,
            warmup_steps: 2,
            ..TrainPlan::default()
        };
        p.optimizer.lr = 1.0;
        assert_eq!(p.lr_at(0), 0.5);
        assert_eq!(p.lr_at(5), 1.0);
        p.schedule = LrSchedule::Linear;
        assert_eq!(p.lr_at(2), 1.0);
        assert!((p.lr_at(6) - 0.5).abs() < 1e-12);
        p.schedule = LrSchedule::Cosine;
        assert!((p.lr_at(6) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn plan_validation() {
        assert!(TrainPlan::default().validate().is_ok());
        let p = TrainPlan {
            iteration_index: 0,
            ..TrainPlan::default()
        };
        assert!(p.validate().is_err());
        let p = TrainPlan {
            start_checkpoint: Some("/nonexistent/sft.ckpt".into()),
            ..TrainPlan::default()
        };
        assert!(matches!(p.validate(), Err(Error::MissingArtifact(_))));
    }
}
