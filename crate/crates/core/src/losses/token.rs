//! Per-token losses over `[rows × vocab]` logits. Each returns a `[rows]`
//! vector that is zero on rows where `mask` is unset.

use crate::error::{Error, Result};
use crate::numerics::{topk_indices, Graph, Scalar, Var};

use super::CandidateSampler;

const UNLIKELIHOOD_CLAMP: f64 = 1.0 - 1e-6;

fn mask_const<T: Scalar>(g: &mut Graph<T>, mask: &[bool]) -> Result<Var> {
    let data = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    g.constant(vec![mask.len()], data)
}

fn check_rows<T: Scalar>(g: &Graph<T>, op: &'static str, logits: Var, targets: &[usize], mask: &[bool]) -> Result<(usize, usize)> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != targets.len() || s[0] != mask.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![targets.len(), mask.len()],
        });
    }
    Ok((s[0], s[1]))
}

/// `−log softmax(logits)[target]` per valid row.
pub fn ce_token_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    check_rows(g, "ce_loss", logits, targets, mask)?;
    let lsm = g.log_softmax(logits)?;
    let picked = g.gather_last(lsm, targets)?;
    let m = mask_const(g, mask)?;
    let masked = g.mul(picked, m)?;
    g.neg(masked)
}

/// The positive candidates contrasted against `negative`: the top `k + 1`
/// predictions with the negative removed, or the top `k` when the negative
/// is not among them.
pub fn cringe_candidates<T: Scalar>(row: &[T], negative: usize, k: usize) -> Vec<usize> {
    let mut top = topk_indices(row, k + 1);
    match top.iter().position(|&i| i == negative) {
        Some(p) => {
            top.remove(p);
        }
        None => {
            top.pop();
        }
    }
    top
}

/// Contrastive loss on negative tokens: a positive token `s*` is sampled from
/// the model's own top-k (excluding the negative), then the two-way
/// cross-entropy `−log(e^{s*} / (e^{s*} + e^{s_neg}))` pushes the negative
/// score below it. Gradients reach both `s*` and `s_neg`; the choice itself
/// is not differentiated. `item` keys the sampler draws for this sequence.
pub fn cringe_token_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    negative_targets: &[usize],
    mask: &[bool],
    k: usize,
    sampler: &mut CandidateSampler,
    item: usize,
) -> Result<Var> {
    let (rows, vocab) = check_rows(g, "cringe_loss", logits, negative_targets, mask)?;
    if k == 0 {
        return Err(Error::invalid("cringe_loss", "k must be >= 1"));
    }
    if k + 1 > vocab {
        return Err(Error::invalid("cringe_loss", format!("k + 1 = {} exceeds vocabulary size {vocab}", k + 1)));
    }
    let mut positives = Vec::with_capacity(rows);
    {
        let values = g.value(logits);
        for (r, &neg) in negative_targets.iter().enumerate() {
            let row = &values[r * vocab..(r + 1) * vocab];
            let cands = cringe_candidates(row, neg, k);
            let scores: Vec<f64> = cands.iter().map(|&c| row[c].as_f64()).collect();
            positives.push(sampler.choose(item, r, &cands, &scores)?);
        }
    }
    let s_pos = g.gather_last(logits, &positives)?;
    let s_neg = g.gather_last(logits, negative_targets)?;
    let diff = g.sub(s_neg, s_pos)?;
    let two_way = g.softplus(diff)?;
    let m = mask_const(g, mask)?;
    g.mul(two_way, m)
}

/// `−log(1 − p(negative))` per valid row, with `p` clamped below 1.
pub fn unlikelihood_token_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, negative_targets: &[usize], mask: &[bool]) -> Result<Var> {
    let (rows, _) = check_rows(g, "unlikelihood_loss", logits, negative_targets, mask)?;
    let probs = g.softmax(logits)?;
    let p = g.gather_last(probs, negative_targets)?;
    let one_minus = g.neg(p)?;
    let one_minus = g.add_scalar(one_minus, T::one())?;
    let clamp = T::cast_from(UNLIKELIHOOD_CLAMP);
    let pv = g.value(p).to_vec();
    let q = if pv.iter().any(|&x| x > clamp) {
        // Rows past the clamp use the constant 1 - clamp and carry no gradient.
        let keep: Vec<T> = pv.iter().map(|&x| if x > clamp { T::zero() } else { T::one() }).collect();
        let fill: Vec<T> = pv
            .iter()
            .map(|&x| if x > clamp { T::one() - clamp } else { T::zero() })
            .collect();
        let keep = g.constant(vec![rows], keep)?;
        let fill = g.constant(vec![rows], fill)?;
        let kept = g.mul(one_minus, keep)?;
        g.add(kept, fill)?
    } else {
        one_minus
    };
    let lq = g.log(q)?;
    let m = mask_const(g, mask)?;
    let masked = g.mul(lq, m)?;
    g.neg(masked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(g: &mut Graph<f64>, r: usize, v: usize, data: Vec<f64>) -> Var {
        g.leaf(vec![r, v], data, true).unwrap()
    }

    #[test]
    fn ce_of_uniform_logits_is_log_vocab() {
        let mut g = Graph::new();
        let x = rows(&mut g, 2, 4, vec![0.0; 8]);
        let l = ce_token_loss(&mut g, x, &[1, 3], &[true, true]).unwrap();
        for &v in g.value(l) {
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_with_dominant_correct_logit_vanishes() {
        let mut g = Graph::new();
        let x = rows(&mut g, 1, 3, vec![0.0, 60.0, 0.0]);
        let l = ce_token_loss(&mut g, x, &[1], &[true]).unwrap();
        assert!(g.value(l)[0] < 1e-20);
    }

    #[test]
    fn ce_fully_masked_sums_to_zero() {
        let mut g = Graph::new();
        let x = rows(&mut g, 2, 3, vec![0.3, -0.2, 1.0, 0.0, 0.5, 2.0]);
        let l = ce_token_loss(&mut g, x, &[0, 1], &[false, false]).unwrap();
        let s = g.sum(l).unwrap();
        assert_eq!(g.scalar_value(s).unwrap(), 0.0);
    }

    #[test]
    fn candidates_when_negative_in_top() {
        // scores over [a, b, c, d, e], negative a, k = 2
        let row = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(cringe_candidates(&row, 0, 2), vec![1, 2]);
        // the draw over {b, c} follows softmax(4, 3)
        let p_b = 4f64.exp() / (4f64.exp() + 3f64.exp());
        assert!((p_b - 0.731).abs() < 1e-3);
    }

    #[test]
    fn candidates_when_negative_outside_top() {
        let row = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(cringe_candidates(&row, 4, 2), vec![0, 1]);
    }

    #[test]
    fn cringe_equal_scores_gives_log_two() {
        // the only candidate ties with the negative token
        let mut g = Graph::new();
        let x = rows(&mut g, 1, 3, vec![2.0, 2.0, -5.0]);
        let mut s = CandidateSampler::new(0);
        let l = cringe_token_loss(&mut g, x, &[0], &[true], 1, &mut s, 0).unwrap();
        assert!((g.value(l)[0] - 2f64.ln()).abs() < 1e-12);
        assert_eq!(s.choices()[&(0, 0)], 1);
    }

    #[test]
    fn cringe_rejects_oversized_k() {
        let mut g = Graph::new();
        let x = rows(&mut g, 1, 3, vec![0.0; 3]);
        let mut s = CandidateSampler::new(0);
        assert!(cringe_token_loss(&mut g, x, &[0], &[true], 3, &mut s, 0).is_err());
    }

    #[test]
    fn unlikelihood_reference_points() {
        let mut g = Graph::new();
        // p(neg) = 0.5, ~0, ~1
        let x = rows(&mut g, 3, 2, vec![0.0, 0.0, -50.0, 50.0, 50.0, -50.0]);
        let l = unlikelihood_token_loss(&mut g, x, &[0, 0, 0], &[true; 3]).unwrap();
        let v = g.value(l).to_vec();
        assert!((v[0] - 2f64.ln()).abs() < 1e-12);
        assert!(v[1] < 1e-20);
        assert!(v[2].is_finite() && (v[2] - (1e-6f64).ln().abs()).abs() < 1e-6);
        let s = g.sum(l).unwrap();
        g.backward(s).unwrap();
    }
}
