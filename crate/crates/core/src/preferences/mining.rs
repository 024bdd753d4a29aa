use rayon::prelude::*;

use crate::error::Result;
use crate::evalkit::{repeat_at_n, strip_specials};
use crate::losses::{BinaryItem, Label, PreferencePair};
use crate::numerics::rng::{self, stream, Rng};
use crate::tinylm::{decode, DecodeStrategy, NextToken, PromptResponse};

use super::{PreferenceDataset, Provenance, RewardModel};

/// Result of repetition mining.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MiningOutcome {
    pub dataset: PreferenceDataset,
    pub discarded: usize,
    /// Decoding steps of the winners where every token was blocked.
    pub fallbacks: usize,
}

/// Per prompt, pairs the n-gram-blocked greedy generation (winner) with the
/// plain greedy generation (loser). A pair is kept only if the greedy output
/// repeats at least one n-gram of itself or the prompt.
pub fn mine_repetition_pairs<M: NextToken + Sync>(
    model: &M,
    prompts: &[Vec<usize>],
    n: usize,
    max_new_tokens: usize,
) -> Result<MiningOutcome> {
    if n == 0 {
        return Err(crate::Error::invalid("mine_repetition_pairs", "n must be >= 1"));
    }
    let results: Vec<Result<_>> = prompts
        .par_iter()
        .map(|p| {
            // neither strategy samples, so the stream is never consumed
            let mut r = rng::rng_for(0, &[]);
            let loser = decode(model, p, DecodeStrategy::Greedy, max_new_tokens, &mut r)?;
            if repeat_at_n(p, loser.content(), n) == 0 {
                return Ok(None);
            }
            let winner = decode(model, p, DecodeStrategy::NgramBlock(n), max_new_tokens, &mut r)?;
            Ok(Some((winner, loser)))
        })
        .collect();
    let mut out = MiningOutcome::default();
    for (p, r) in prompts.iter().zip(results) {
        match r? {
            Some((w, l)) if w.tokens != l.tokens => {
                out.fallbacks += w.fallbacks;
                out.dataset
                    .push(PreferencePair::new(p.clone(), w.tokens, l.tokens), Provenance::Original, None)?;
            }
            _ => out.discarded += 1,
        }
    }
    Ok(out)
}

/// Indices of the highest and lowest reward; ties go to the earliest index.
pub fn select_best_worst(rewards: &[f64]) -> (usize, usize) {
    let mut best = 0;
    let mut worst = 0;
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[best] {
            best = i;
        }
        if r < rewards[worst] {
            worst = i;
        }
    }
    (best, worst)
}

/// A scored best/worst pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredChoice {
    pub pair: PreferencePair,
    pub rewards: [f64; 2],
}

/// Samples `n` responses, scores them, and pairs the best with the worst.
/// Returns `None` (logged) when the best and worst responses are identical.
pub fn best_worst_of_n<M: NextToken + ?Sized>(
    model: &M,
    prompt: &[usize],
    reward: &RewardModel,
    n: usize,
    strategy: DecodeStrategy,
    max_new_tokens: usize,
    rng: &mut Rng,
) -> Result<Option<ScoredChoice>> {
    if n < 2 {
        return Err(crate::Error::invalid("best_worst_of_n", "n must be >= 2"));
    }
    let samples: Vec<Vec<usize>> = (0..n)
        .map(|_| decode(model, prompt, strategy, max_new_tokens, rng).map(|g| g.tokens))
        .collect::<Result<_>>()?;
    let rewards = reward.score_all(prompt, &samples)?;
    let (b, w) = select_best_worst(&rewards);
    if samples[b] == samples[w] {
        log::info!("best_worst_of_n: all best/worst samples identical, pair rejected");
        return Ok(None);
    }
    Ok(Some(ScoredChoice {
        pair: PreferencePair::new(prompt.to_vec(), samples[b].clone(), samples[w].clone()),
        rewards: [rewards[b], rewards[w]],
    }))
}

/// Sampling settings shared by the labeling passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub n: usize,
    pub strategy: DecodeStrategy,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub iteration: usize,
}

fn prompt_rng(spec: &SampleSpec, index: usize) -> Rng {
    rng::rng_for(spec.seed, &[stream::DECODE, spec.iteration as u64, index as u64])
}

/// Best/worst-of-n over every prompt, in prompt order, each prompt on its
/// own derived stream. Pairs carry provenance `mined_iteration_{iteration}`.
pub fn mine_best_worst<M: NextToken + Sync>(
    model: &M,
    prompts: &[Vec<usize>],
    reward: &RewardModel,
    spec: &SampleSpec,
) -> Result<PreferenceDataset> {
    let results: Vec<Result<Option<ScoredChoice>>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            best_worst_of_n(model, p, reward, spec.n, spec.strategy, spec.max_new_tokens, &mut prompt_rng(spec, i))
        })
        .collect();
    let mut d = PreferenceDataset::new();
    for (i, r) in results.into_iter().enumerate() {
        let r = r.map_err(|e| match e {
            crate::Error::Reward { detail, .. } => crate::Error::Reward {
                index: i,
                detail: format!("prompt {i}: {detail}"),
            },
            other => other,
        })?;
        if let Some(c) = r {
            d.push(c.pair, Provenance::Mined(spec.iteration), Some(c.rewards))?;
        }
    }
    Ok(d)
}

/// Labels by the median reward: strictly above is positive, strictly below
/// negative, equal is dropped.
pub fn median_labels(rewards: &[f64]) -> Vec<Option<Label>> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let mut sorted = rewards.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    };
    rewards
        .iter()
        .map(|&r| {
            if r > median {
                Some(Label::Positive)
            } else if r < median {
                Some(Label::Negative)
            } else {
                None
            }
        })
        .collect()
}

/// Generates `n` responses per prompt and labels them by a median split over
/// the whole generated set.
pub fn label_by_median<M: NextToken + Sync>(
    model: &M,
    prompts: &[Vec<usize>],
    reward: &RewardModel,
    spec: &SampleSpec,
) -> Result<Vec<BinaryItem>> {
    let generated: Vec<Result<Vec<(Vec<usize>, f64)>>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut r = prompt_rng(spec, i);
            (0..spec.n)
                .map(|_| {
                    let g = decode(model, p, spec.strategy, spec.max_new_tokens, &mut r)?;
                    let s = reward.score(p, &g.tokens)?;
                    Ok((g.tokens, s))
                })
                .collect()
        })
        .collect();
    let mut flat = Vec::new();
    for (p, g) in prompts.iter().zip(generated) {
        for (tokens, s) in g? {
            flat.push((p, tokens, s));
        }
    }
    let rewards: Vec<f64> = flat.iter().map(|x| x.2).collect();
    Ok(flat
        .into_iter()
        .zip(median_labels(&rewards))
        .filter(|((_, t, _), _)| !strip_specials(t).is_empty())
        .filter_map(|((p, t, _), l)| {
            l.map(|label| BinaryItem {
                pr: PromptResponse::new(p.clone(), t),
                label,
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_worst_tie_rule() {
        assert_eq!(select_best_worst(&[3.0, 1.0, 4.0, 1.0]), (2, 1));
        assert_eq!(select_best_worst(&[2.0, 5.0]), (1, 0));
        let affine: Vec<f64> = [3.0, 1.0, 4.0, 1.0].iter().map(|r| 2.0 * r + 7.0).collect();
        assert_eq!(select_best_worst(&affine), (2, 1));
    }

    #[test]
    fn median_split() {
        let l = median_labels(&[1.0, 2.0, 3.0]);
        assert_eq!(l, vec![Some(Label::Negative), None, Some(Label::Positive)]);
        let l = median_labels(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(l[0], Some(Label::Negative));
        assert_eq!(l[3], Some(Label::Positive));
    }
}
