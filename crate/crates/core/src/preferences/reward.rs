use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{repeat_at_n, strip_specials};
use crate::numerics::rng::{self, stream};

/// Scalar scorer of (prompt, response); higher is better. Special tokens in
/// the response are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardModel {
    /// `−Repeat@n` of the response given the prompt.
    RepetitionPenalty { n: usize },
    /// Fixed linear scorer over token counts minus `length_penalty` per token.
    HiddenLinear {
        seed: u64,
        coefs: Vec<f64>,
        length_penalty: f64,
    },
}

impl RewardModel {
    /// Draws one standard-normal coefficient per vocabulary entry from `seed`.
    pub fn hidden_linear(vocab_size: usize, seed: u64, length_penalty: f64) -> Self {
        let mut r = rng::rng_for(seed, &[stream::REWARD]);
        let coefs = (0..vocab_size).map(|_| StandardNormal.sample(&mut r)).collect();
        RewardModel::HiddenLinear {
            seed,
            coefs,
            length_penalty,
        }
    }

    pub fn score(&self, prompt: &[usize], response: &[usize]) -> Result<f64> {
        let content = strip_specials(response);
        match self {
            RewardModel::RepetitionPenalty { n } => {
                if *n == 0 {
                    return Err(Error::Reward {
                        index: 0,
                        detail: "n-gram size must be >= 1".into(),
                    });
                }
                Ok(-(repeat_at_n(prompt, &content, *n) as f64))
            }
            RewardModel::HiddenLinear {
                coefs, length_penalty, ..
            } => {
                let mut total = 0.0;
                for &t in &content {
                    total += coefs.get(t).ok_or_else(|| Error::Reward {
                        index: 0,
                        detail: format!("token {t} outside the scorer's vocabulary of {}", coefs.len()),
                    })?;
                }
                Ok(total - length_penalty * content.len() as f64)
            }
        }
    }

    /// Scores several responses to one prompt; errors name the response index.
    pub fn score_all(&self, prompt: &[usize], responses: &[Vec<usize>]) -> Result<Vec<f64>> {
        responses
            .iter()
            .enumerate()
            .map(|(i, r)| {
                self.score(prompt, r).map_err(|e| match e {
                    Error::Reward { detail, .. } => Error::Reward { index: i, detail },
                    other => other,
                })
            })
            .collect()
    }

    /// Short label used in report headers.
    pub fn describe(&self) -> String {
        match self {
            RewardModel::RepetitionPenalty { n } => format!("reward model: repetition_penalty(n={n})"),
            RewardModel::HiddenLinear {
                seed, length_penalty, ..
            } => format!("reward model: hidden_linear(seed={seed}, length_penalty={length_penalty})"),
        }
    }
}
