//! Step-by-step reference implementations of the three Cringe losses over
//! plain arrays, written to mirror the published pseudo-code line by line
//! (top-(k+1) with masking by a large constant, categorical sampling, a
//! two-way cross-entropy, sequence log-probabilities divided by
//! `mask.sum() + 1e-10`). They share nothing with the tape implementation
//! except the keyed uniforms that drive the categorical draws.
//!
//! Per-token losses are reduced the way the library does: summed and divided
//! by the number of valid target tokens in the batch.

use crate::losses::keyed_uniform;

const BIG: f64 = 1e10;

/// One scored sequence: `rows × vocab` logits, targets, validity.
#[derive(Debug, Clone, PartialEq)]
pub struct RefSeq {
    pub vocab: usize,
    pub logits: Vec<f64>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl RefSeq {
    fn row(&self, r: usize) -> &[f64] {
        &self.logits[r * self.vocab..(r + 1) * self.vocab]
    }

    fn notnull(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    row[t] - lse
}

/// `torch.topk(x, k + 1)`: values and indices, largest first, lower index
/// first among equal values.
pub fn topk(row: &[f64], k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite").then(a.cmp(&b)));
    idx.truncate(k);
    (idx.iter().map(|&i| row[i]).collect(), idx)
}

/// Masked top-(k+1) logits as in the pseudo-code: the target's own entry and,
/// when the target is absent, the last entry are pushed down by 1e10.
pub fn masked_topk_logits(row: &[f64], y: usize, k: usize) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
    let (values, indices) = topk(row, k + 1);
    let topk_has_tgt: Vec<bool> = indices.iter().map(|&i| i == y).collect();
    let mut topk_logits: Vec<f64> = values
        .iter()
        .zip(&topk_has_tgt)
        .map(|(&v, &h)| v - if h { BIG } else { 0.0 })
        .collect();
    if !topk_has_tgt.iter().any(|&h| h) {
        topk_logits[k] -= BIG;
    }
    (values, indices, topk_logits)
}

/// `Categorical(logits).sample()` by inverse CDF on the uniform `u`.
fn sample_categorical(logits: &[f64], u: f64) -> usize {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = p.iter().sum();
    let mut c = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        c += pi;
        if u * z < c {
            return i;
        }
    }
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

/// Vocabulary indices of the positions a negative could be contrasted with.
pub fn candidate_set(row: &[f64], y: usize, k: usize) -> Vec<usize> {
    let (_, indices, topk_logits) = masked_topk_logits(row, y, k);
    indices
        .into_iter()
        .zip(topk_logits)
        .filter(|&(_, l)| l > -BIG / 2.0)
        .map(|(i, _)| i)
        .collect()
}

/// Contrastive loss per row (unmasked), drawing with `(seed, item, row)`.
pub fn contrastive_loss(seq: &RefSeq, k: usize, seed: u64, item: usize) -> Vec<f64> {
    (0..seq.targets.len())
        .map(|r| {
            let x = seq.row(r);
            let y = seq.targets[r];
            let (values, _, topk_logits) = masked_topk_logits(x, y, k);
            let idx_sample = sample_categorical(&topk_logits, keyed_uniform(seed, item, r));
            let sample_preds_value = values[idx_sample];
            let x_negative_target = x[y];
            let x_cr = [sample_preds_value, x_negative_target];
            // cross-entropy with the correct label at index 0
            let m = x_cr[0].max(x_cr[1]);
            let lse = m + ((x_cr[0] - m).exp() + (x_cr[1] - m).exp()).ln();
            lse - x_cr[0]
        })
        .collect()
}

fn ce_loss(seq: &RefSeq) -> Vec<f64> {
    (0..seq.targets.len())
        .map(|r| -log_softmax_at(seq.row(r), seq.targets[r]))
        .collect()
}

/// Binary feedback: `label = true` is positive.
pub fn binary_cringe(items: &[(RefSeq, bool)], alpha: f64, k: usize, seed: u64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (i, (seq, label)) in items.iter().enumerate() {
        let ce = ce_loss(seq);
        let cr = contrastive_loss(seq, k, seed, i);
        let classifier_label = if *label { 1.0 } else { 0.0 };
        for r in 0..seq.targets.len() {
            let notnull = if seq.mask[r] { 1.0 } else { 0.0 };
            let ce_r = ce[r] * classifier_label * notnull;
            let cr_r = cr[r] * (classifier_label - 1.0f64).abs() * notnull;
            total += ce_r + alpha * cr_r;
        }
        count += seq.notnull();
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Length-normalized sequence log-probability.
pub fn get_logprob(seq: &RefSeq) -> f64 {
    let mut s = 0.0;
    for r in 0..seq.targets.len() {
        if seq.mask[r] {
            s += log_softmax_at(seq.row(r), seq.targets[r]);
        }
    }
    s / (seq.notnull() as f64 + 1e-10)
}

/// Pairwise loss; `hard` swaps the sigmoid gate for the step `margin <= b`.
pub fn pairwise_cringe(pairs: &[(RefSeq, RefSeq)], alpha: f64, k: usize, b: f64, tau: f64, hard: bool, seed: u64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (i, (w, l)) in pairs.iter().enumerate() {
        let ce = ce_loss(w);
        let cr = contrastive_loss(l, k, seed, 2 * i + 1);
        let ce_sum: f64 = (0..w.targets.len()).filter(|&r| w.mask[r]).map(|r| ce[r]).sum();
        let cr_sum: f64 = (0..l.targets.len()).filter(|&r| l.mask[r]).map(|r| cr[r]).sum();
        let margin = get_logprob(w) - get_logprob(l);
        let multiplier = if hard {
            if margin <= b {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 / (1.0 + (-((-margin + b) / tau)).exp())
        };
        total += multiplier * (ce_sum + alpha * cr_sum);
        count += w.notnull() + l.notnull();
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
