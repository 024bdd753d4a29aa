//! Word-level tokenizer, a small decoder-only transformer, sequence scoring
//! and decoding (greedy, temperature sampling, n-gram blocked greedy).

mod cache;
mod decode;
mod model;
mod vocab;

pub use cache::KvCache;
pub use decode::{decode, DecodeStrategy, Generation, GenerationRecord, NextToken, Session};
pub use model::{Bound, LmConfig, TinyLm};
pub use vocab::Vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};

/// Tokenized prompt `x` and response `y`, with a validity flag per response
/// position. Masked-out positions carry the pad index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptResponse {
    pub prompt_tokens: Vec<usize>,
    pub response_tokens: Vec<usize>,
    pub response_mask: Vec<bool>,
}

impl PromptResponse {
    /// Every non-pad response position is valid.
    pub fn new(prompt: Vec<usize>, response: Vec<usize>) -> Self {
        let response_mask = response.iter().map(|&t| t != Vocab::PAD_ID).collect();
        PromptResponse {
            prompt_tokens: prompt,
            response_tokens: response,
            response_mask,
        }
    }

    pub fn with_mask(prompt: Vec<usize>, response: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != response.len() {
            return Err(Error::invalid("prompt_response", "mask length differs from response length"));
        }
        if response.iter().zip(&mask).any(|(&t, &m)| !m && t != Vocab::PAD_ID) {
            return Err(Error::invalid("prompt_response", "masked-out positions must carry the pad index"));
        }
        Ok(PromptResponse {
            prompt_tokens: prompt,
            response_tokens: response,
            response_mask: mask,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.response_mask.iter().filter(|&&m| m).count()
    }

    /// Model input: `[bos] ++ prompt ++ response` without the final token,
    /// so that every response token is predicted by exactly one row.
    pub fn input(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(1 + self.prompt_tokens.len() + self.response_tokens.len());
        s.push(Vocab::BOS_ID);
        s.extend_from_slice(&self.prompt_tokens);
        if let Some((_, head)) = self.response_tokens.split_last() {
            s.extend_from_slice(head);
        }
        s
    }

    /// Per-row targets and loss mask aligned with [`PromptResponse::input`].
    /// Only rows predicting valid response tokens are set in the mask.
    pub fn targets(&self) -> (Vec<usize>, Vec<bool>) {
        let p = self.prompt_tokens.len();
        let rows = self.input().len();
        let mut targets = Vec::with_capacity(rows);
        let mut mask = Vec::with_capacity(rows);
        for t in 0..rows {
            if t < p {
                targets.push(self.prompt_tokens[t]);
                mask.push(false);
            } else {
                targets.push(self.response_tokens[t - p]);
                mask.push(self.response_mask[t - p]);
            }
        }
        (targets, mask)
    }
}

/// Log-probability of `targets` under row-wise softmax of `logits`, summed
/// over masked rows; divided by the valid count when `normalize` is set.
pub fn logprob_from_logits<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
    normalize: bool,
) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyResponse);
    }
    let lsm = g.log_softmax(logits)?;
    let picked = g.gather_last(lsm, targets)?;
    let total = g.masked_sum(picked, mask)?;
    if normalize {
        g.scale(total, T::cast_from(1.0 / count as f64))
    } else {
        Ok(total)
    }
}

/// Differentiable `log p(y | x)` for a prompt/response pair.
pub fn sequence_logprob<T: Scalar>(
    g: &mut Graph<T>,
    model: &Bound<'_, T>,
    pr: &PromptResponse,
    normalize: bool,
) -> Result<Var> {
    if pr.valid_count() == 0 {
        return Err(Error::EmptyResponse);
    }
    let logits = model.logits(g, &pr.input(), None)?;
    let (targets, mask) = pr.targets();
    logprob_from_logits(g, logits, &targets, &mask, normalize)
}
