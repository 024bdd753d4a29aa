//! Sequence-level objectives over precomputed logits.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};
use crate::tinylm::logprob_from_logits;

use super::token::{ce_token_loss, cringe_token_loss, unlikelihood_token_loss};
use super::{CandidateSampler, Label, LossConfig};

/// Logits of one response and the rows they score.
#[derive(Debug, Clone)]
pub struct ScoredSeq {
    pub logits: Var,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl ScoredSeq {
    pub fn valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone)]
pub struct ScoredPair {
    pub winner: ScoredSeq,
    pub loser: ScoredSeq,
}

/// Which gradient pathways of the gated loss stay live. Disabling one
/// detaches that factor; the forward value is unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pathways {
    pub gate: bool,
    pub body: bool,
}

impl Default for Pathways {
    fn default() -> Self {
        Pathways { gate: true, body: true }
    }
}

/// Sampler item key of a pair's loser. Binarized pairs list the winner then
/// the loser, so pair `i`'s loser is item `2i + 1` in both layouts.
pub fn loser_item(pair: usize) -> usize {
    2 * pair + 1
}

fn total_valid<'a>(seqs: impl Iterator<Item = &'a ScoredSeq>) -> usize {
    seqs.map(ScoredSeq::valid).sum()
}

fn mean_over<T: Scalar>(g: &mut Graph<T>, total: Option<Var>, count: usize) -> Result<Var> {
    match total {
        Some(t) if count > 0 => g.scale(t, T::cast_from(1.0 / count as f64)),
        _ => Ok(g.scalar(T::zero())),
    }
}

fn accumulate<T: Scalar>(g: &mut Graph<T>, acc: Option<Var>, term: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => g.add(a, term)?,
        None => term,
    }))
}

/// Token-level body `Σ CE(y_w) + α Σ cringe(y_l)` for one pair.
fn pair_body<T: Scalar>(
    g: &mut Graph<T>,
    pair: &ScoredPair,
    index: usize,
    cfg: &LossConfig,
    sampler: &mut CandidateSampler,
) -> Result<Var> {
    let w = &pair.winner;
    let l = &pair.loser;
    let ce = ce_token_loss(g, w.logits, &w.targets, &w.mask)?;
    let ce = g.sum(ce)?;
    let cr = cringe_token_loss(g, l.logits, &l.targets, &l.mask, cfg.k, sampler, loser_item(index))?;
    let cr = g.sum(cr)?;
    let cr = g.scale(cr, T::cast_from(cfg.alpha))?;
    g.add(ce, cr)
}

/// `log p(y_w|x) − log p(y_l|x)`, optionally length-normalized.
pub fn margin<T: Scalar>(g: &mut Graph<T>, pair: &ScoredPair, normalize: bool) -> Result<Var> {
    let w = logprob_from_logits(g, pair.winner.logits, &pair.winner.targets, &pair.winner.mask, normalize)?;
    let l = logprob_from_logits(g, pair.loser.logits, &pair.loser.targets, &pair.loser.mask, normalize)?;
    g.sub(w, l)
}

/// `σ((b − M) / τ)` on the tape.
pub fn gate_var<T: Scalar>(g: &mut Graph<T>, m: Var, b: f64, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid("gate", "tau must be > 0"));
    }
    let neg = g.neg(m)?;
    let shifted = g.add_scalar(neg, T::cast_from(b))?;
    let z = g.scale(shifted, T::cast_from(1.0 / tau))?;
    g.sigmoid(z)
}

/// Mean over valid tokens of CE on positives plus `α` times the contrastive
/// loss on negatives.
pub fn binary_cringe<T: Scalar>(
    g: &mut Graph<T>,
    items: &[(ScoredSeq, Label)],
    cfg: &LossConfig,
    sampler: &mut CandidateSampler,
) -> Result<Var> {
    let mut total = None;
    for (i, (seq, label)) in items.iter().enumerate() {
        let term = match label {
            Label::Positive => {
                let ce = ce_token_loss(g, seq.logits, &seq.targets, &seq.mask)?;
                g.sum(ce)?
            }
            Label::Negative => {
                let cr = cringe_token_loss(g, seq.logits, &seq.targets, &seq.mask, cfg.k, sampler, i)?;
                let cr = g.sum(cr)?;
                g.scale(cr, T::cast_from(cfg.alpha))?
            }
        };
        total = accumulate(g, total, term)?;
    }
    mean_over(g, total, total_valid(items.iter().map(|(s, _)| s)))
}

/// Soft-margin gated loss: each pair's token body is scaled by
/// `σ((b − M)/τ)`, and the gradient reaches the model through both the gate
/// and the body.
pub fn pairwise_cringe<T: Scalar>(
    g: &mut Graph<T>,
    pairs: &[ScoredPair],
    cfg: &LossConfig,
    sampler: &mut CandidateSampler,
    pathways: Pathways,
) -> Result<Var> {
    let mut total = None;
    for (i, pair) in pairs.iter().enumerate() {
        let m = margin(g, pair, cfg.normalize_margin)?;
        let mut gate = gate_var(g, m, cfg.b, cfg.tau)?;
        if !pathways.gate {
            gate = g.detach(gate);
        }
        let mut body = pair_body(g, pair, i, cfg, sampler)?;
        if !pathways.body {
            body = g.detach(body);
        }
        let term = g.mul(gate, body)?;
        total = accumulate(g, total, term)?;
    }
    mean_over(g, total, total_valid(pairs.iter().flat_map(|p| [&p.winner, &p.loser])))
}

/// Hard-margin variant: the body counts only for pairs with `M ≤ b`, and the
/// step multiplier carries no gradient.
pub fn hard_margin_cringe<T: Scalar>(
    g: &mut Graph<T>,
    pairs: &[ScoredPair],
    cfg: &LossConfig,
    sampler: &mut CandidateSampler,
) -> Result<Var> {
    let mut total = None;
    for (i, pair) in pairs.iter().enumerate() {
        let m = margin(g, pair, cfg.normalize_margin)?;
        let active = g.scalar_value(m)?.as_f64() <= cfg.b;
        let body = pair_body(g, pair, i, cfg, sampler)?;
        let term = g.scale(body, if active { T::one() } else { T::zero() })?;
        total = accumulate(g, total, term)?;
    }
    mean_over(g, total, total_valid(pairs.iter().flat_map(|p| [&p.winner, &p.loser])))
}

/// `−log σ(β[(log π(y_w) − log π_ref(y_w)) − (log π(y_l) − log π_ref(y_l))])`
/// averaged over pairs, with unnormalized log-probabilities. `reference`
/// holds the frozen model's `(log p(y_w), log p(y_l))` per pair.
pub fn dpo<T: Scalar>(g: &mut Graph<T>, pairs: &[ScoredPair], reference: &[(f64, f64)], beta: f64) -> Result<Var> {
    if reference.len() != pairs.len() {
        return Err(Error::ShapeMismatch {
            op: "dpo",
            lhs: vec![pairs.len()],
            rhs: vec![reference.len()],
        });
    }
    let mut total = None;
    for (pair, &(ref_w, ref_l)) in pairs.iter().zip(reference) {
        let m = margin(g, pair, false)?;
        let shifted = g.add_scalar(m, T::cast_from(ref_l - ref_w))?;
        let z = g.scale(shifted, T::cast_from(-beta))?;
        let term = g.softplus(z)?;
        total = accumulate(g, total, term)?;
    }
    mean_over(g, total, pairs.len())
}

/// Cross-entropy on winners only (supervised fine-tuning on preferred data).
pub fn winner_ce<T: Scalar>(g: &mut Graph<T>, pairs: &[ScoredPair]) -> Result<Var> {
    let mut total = None;
    for pair in pairs {
        let w = &pair.winner;
        let ce = ce_token_loss(g, w.logits, &w.targets, &w.mask)?;
        let term = g.sum(ce)?;
        total = accumulate(g, total, term)?;
    }
    mean_over(g, total, total_valid(pairs.iter().map(|p| &p.winner)))
}

/// CE on winners plus `α` times unlikelihood on losers, mean over valid tokens.
pub fn unlikelihood_pairs<T: Scalar>(g: &mut Graph<T>, pairs: &[ScoredPair], alpha: f64) -> Result<Var> {
    let mut total = None;
    for pair in pairs {
        let w = &pair.winner;
        let l = &pair.loser;
        let ce = ce_token_loss(g, w.logits, &w.targets, &w.mask)?;
        let ce = g.sum(ce)?;
        let ul = unlikelihood_token_loss(g, l.logits, &l.targets, &l.mask)?;
        let ul = g.sum(ul)?;
        let ul = g.scale(ul, T::cast_from(alpha))?;
        let term = g.add(ce, ul)?;
        total = accumulate(g, total, term)?;
    }
    mean_over(g, total, total_valid(pairs.iter().flat_map(|p| [&p.winner, &p.loser])))
}
