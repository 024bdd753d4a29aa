//! Model-level entry points: run the language model over responses and
//! evaluate the configured objective on the resulting logits.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};
use crate::tinylm::{Bound, PromptResponse, TinyLm};

use super::sequence::{self, Pathways, ScoredPair, ScoredSeq};
use super::{BinaryBatch, CandidateSampler, Label, LossConfig, LossVariant, PreferencePair};

/// `σ((b − M) / τ)`.
pub fn gate(m: f64, b: f64, tau: f64) -> f64 {
    let z = (b - m) / tau;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn score<T: Scalar>(g: &mut Graph<T>, model: &Bound<'_, T>, pr: &PromptResponse) -> Result<ScoredSeq> {
    if pr.valid_count() == 0 {
        return Err(Error::EmptyResponse);
    }
    let logits = model.logits(g, &pr.input(), None)?;
    let (targets, mask) = pr.targets();
    Ok(ScoredSeq { logits, targets, mask })
}

pub fn score_pair<T: Scalar>(g: &mut Graph<T>, model: &Bound<'_, T>, pair: &PreferencePair) -> Result<ScoredPair> {
    Ok(ScoredPair {
        winner: score(g, model, &pair.winner_pr())?,
        loser: score(g, model, &pair.loser_pr())?,
    })
}

/// Margin `M` between winner and loser under `model`.
pub fn pairwise_margin<T: Scalar>(model: &TinyLm<T>, pair: &PreferencePair, normalize: bool) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let sp = score_pair(&mut g, &b, pair)?;
    let m = sequence::margin(&mut g, &sp, normalize)?;
    Ok(g.scalar_value(m)?.as_f64())
}

/// Unnormalized `(log p(y_w|x), log p(y_l|x))` under a frozen model.
pub fn reference_logprobs<T: Scalar>(model: &TinyLm<T>, pairs: &[PreferencePair]) -> Result<Vec<(f64, f64)>> {
    pairs
        .iter()
        .map(|p| {
            Ok((
                model.sequence_logprob(&p.winner_pr(), false)?.as_f64(),
                model.sequence_logprob(&p.loser_pr(), false)?.as_f64(),
            ))
        })
        .collect()
}

/// Splits pairs into (winner, positive), (loser, negative) items in pair order.
pub fn binarize_pairs(pairs: &[PreferencePair]) -> BinaryBatch {
    let mut items = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        items.push(super::BinaryItem {
            pr: p.winner_pr(),
            label: Label::Positive,
        });
        items.push(super::BinaryItem {
            pr: p.loser_pr(),
            label: Label::Negative,
        });
    }
    BinaryBatch { items }
}

pub fn binary_objective<T: Scalar>(
    g: &mut Graph<T>,
    model: &Bound<'_, T>,
    batch: &BinaryBatch,
    cfg: &LossConfig,
    sampler: &mut CandidateSampler,
) -> Result<Var> {
    let mut scored = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        scored.push((score(g, model, &item.pr)?, item.label));
    }
    sequence::binary_cringe(g, &scored, cfg, sampler)
}

/// Evaluates `cfg.variant` on a batch of pairs. DPO needs `reference`.
pub fn pair_objective<T: Scalar>(
    g: &mut Graph<T>,
    model: &Bound<'_, T>,
    pairs: &[PreferencePair],
    cfg: &LossConfig,
    sampler: &mut CandidateSampler,
    reference: Option<&[(f64, f64)]>,
) -> Result<Var> {
    if cfg.variant == LossVariant::BinaryCringe {
        return binary_objective(g, model, &binarize_pairs(pairs), cfg, sampler);
    }
    let scored: Vec<ScoredPair> = pairs.iter().map(|p| score_pair(g, model, p)).collect::<Result<_>>()?;
    match cfg.variant {
        LossVariant::PairwiseCringe => sequence::pairwise_cringe(g, &scored, cfg, sampler, Pathways::default()),
        LossVariant::HardMarginCringe => sequence::hard_margin_cringe(g, &scored, cfg, sampler),
        LossVariant::Dpo => {
            let r = reference.ok_or_else(|| Error::invalid("dpo", "a reference model is required"))?;
            sequence::dpo(g, &scored, r, cfg.dpo_beta)
        }
        LossVariant::Ce => sequence::winner_ce(g, &scored),
        LossVariant::Unlikelihood => sequence::unlikelihood_pairs(g, &scored, cfg.alpha),
        LossVariant::BinaryCringe => unreachable!("handled above"),
    }
}
