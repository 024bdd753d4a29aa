use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preferences::RewardModel;
use crate::tinylm::Vocab;

/// Number of n-grams in `generation` that already occurred earlier in
/// `context ++ generation`. Overlapping occurrences are counted separately.
pub fn repeat_at_n(context: &[usize], generation: &[usize], n: usize) -> usize {
    if n == 0 || generation.len() < n {
        return 0;
    }
    let mut seq = Vec::with_capacity(context.len() + generation.len());
    seq.extend_from_slice(context);
    seq.extend_from_slice(generation);
    let mut seen: HashSet<&[usize]> = HashSet::new();
    let mut count = 0;
    for (start, w) in seq.windows(n).enumerate() {
        if start >= context.len() && seen.contains(w) {
            count += 1;
        }
        seen.insert(w);
    }
    count
}

/// Unigram bag-of-words F1 between a generation and a reference.
pub fn unigram_f1(generation: &[usize], reference: &[usize]) -> f64 {
    if generation.is_empty() || reference.is_empty() {
        log::warn!("unigram_f1 on empty input");
        return 0.0;
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for &t in generation {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / generation.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Drops pad, bos and eos.
pub fn strip_specials(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| t > Vocab::EOS_ID).collect()
}

/// A model output for one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Output {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

/// Fraction of prompts where `reward(model) > reward(baseline)`; exact ties
/// count one half.
pub fn win_rate(model_outputs: &[Output], baseline_outputs: &[Output], reward: &RewardModel) -> Result<f64> {
    if model_outputs.len() != baseline_outputs.len() {
        return Err(Error::invalid(
            "win_rate",
            format!("{} model outputs vs {} baseline outputs", model_outputs.len(), baseline_outputs.len()),
        ));
    }
    if model_outputs.is_empty() {
        return Err(Error::invalid("win_rate", "no outputs"));
    }
    let mut score = 0.0;
    for (i, (m, b)) in model_outputs.iter().zip(baseline_outputs).enumerate() {
        if m.prompt != b.prompt {
            return Err(Error::invalid("win_rate", format!("prompt mismatch at index {i}")));
        }
        let rm = reward.score(&m.prompt, &m.response)?;
        let rb = reward.score(&b.prompt, &b.response)?;
        if rm > rb {
            score += 1.0;
        } else if rm == rb {
            score += 0.5;
        }
    }
    Ok(score / model_outputs.len() as f64)
}

/// Headline numbers for one model on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean Repeat@n per response.
    pub repeat_at_n: f64,
    pub n: usize,
    /// Mean unigram F1 against the references.
    pub f1: f64,
    /// Against the configured baseline, judged by `judge`.
    pub win_rate: f64,
    pub judge: String,
    /// Mean judge reward of the outputs.
    pub mean_reward: f64,
    pub n_examples: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.win_rate) || self.n_examples == 0 {
            return Err(Error::invalid("metric_report", "win_rate outside [0,1] or no examples"));
        }
        Ok(())
    }
}

/// Computes the report for `outputs` against `references` and `baseline`.
pub fn evaluate_outputs(
    outputs: &[Output],
    references: &[Vec<usize>],
    baseline: &[Output],
    judge: &RewardModel,
    n: usize,
    seed: u64,
) -> Result<MetricReport> {
    if outputs.len() != references.len() || outputs.is_empty() {
        return Err(Error::invalid("evaluate", "outputs and references must be non-empty and aligned"));
    }
    let mut rep = 0.0;
    let mut f1 = 0.0;
    for (o, r) in outputs.iter().zip(references) {
        let content = strip_specials(&o.response);
        rep += repeat_at_n(&o.prompt, &content, n) as f64;
        f1 += unigram_f1(&content, &strip_specials(r));
    }
    let k = outputs.len() as f64;
    let mut reward = 0.0;
    for o in outputs {
        reward += judge.score(&o.prompt, &o.response)?;
    }
    let report = MetricReport {
        repeat_at_n: rep / k,
        n,
        f1: f1 / k,
        win_rate: win_rate(outputs, baseline, judge)?,
        judge: judge.describe(),
        mean_reward: reward / k,
        n_examples: outputs.len(),
        seed,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeat_examples() {
        // a b c a b c a b
        let g = [1, 2, 3, 1, 2, 3, 1, 2];
        assert_eq!(repeat_at_n(&[], &g, 3), 3);
        assert_eq!(repeat_at_n(&[], &[1, 2, 3, 4, 5], 3), 0);
        assert_eq!(repeat_at_n(&[7, 8, 9], &[7, 8, 9], 3), 1);
        assert_eq!(repeat_at_n(&[], &[1, 2], 3), 0);
        // overlapping occurrences count individually
        assert_eq!(repeat_at_n(&[], &[5, 5, 5, 5], 2), 2);
    }

    #[test]
    fn f1_examples() {
        assert!((unigram_f1(&[1, 2, 3], &[2, 3, 4]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(unigram_f1(&[1, 2, 2], &[1, 2, 2]), 1.0);
        assert_eq!(unigram_f1(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(unigram_f1(&[], &[3, 4]), 0.0);
    }

    fn outs(rs: &[&[usize]]) -> Vec<Output> {
        rs.iter()
            .map(|r| Output {
                prompt: vec![3],
                response: r.to_vec(),
            })
            .collect()
    }

    #[test]
    fn win_rate_examples() {
        let judge = RewardModel::RepetitionPenalty { n: 1 };
        let a = outs(&[&[4, 4, 4], &[5, 6]]);
        assert_eq!(win_rate(&a, &a, &judge).unwrap(), 0.5);
        let better = outs(&[&[4, 5, 6], &[5, 6]]);
        let worse = outs(&[&[4, 4, 4], &[5, 5]]);
        assert_eq!(win_rate(&better, &worse, &judge).unwrap(), 1.0);
        assert!(win_rate(&better, &worse[..1], &judge).is_err());
        let mut shifted = worse.clone();
        shifted[0].prompt = vec![9];
        assert!(win_rate(&better, &shifted, &judge).is_err());
    }
}
