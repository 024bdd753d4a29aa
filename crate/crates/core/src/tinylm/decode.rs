use std::collections::HashSet;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::Scalar;

use super::{KvCache, TinyLm, Vocab};

/// Anything that scores the next token given `[bos] ++ context`.
pub trait NextToken {
    fn vocab_size(&self) -> usize;
    fn max_context(&self) -> usize;
    fn next_logits(&self, context: &[usize]) -> Result<Vec<f64>>;

    /// Incremental scoring session; the default re-scores the whole context.
    fn session(&self) -> Box<dyn Session + '_> {
        Box::new(Rescore {
            model: self,
            context: Vec::new(),
        })
    }
}

/// Feeds tokens one at a time and returns the logits after each.
pub trait Session {
    fn push(&mut self, token: usize) -> Result<Vec<f64>>;
}

struct Rescore<'a, M: NextToken + ?Sized> {
    model: &'a M,
    context: Vec<usize>,
}

impl<M: NextToken + ?Sized> Session for Rescore<'_, M> {
    fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        self.context.push(token);
        self.model.next_logits(&self.context)
    }
}

impl<T: Scalar> Session for KvCache<'_, T> {
    fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        Ok(KvCache::push(self, token)?.into_iter().map(|x| x.as_f64()).collect())
    }
}

impl<T: Scalar> NextToken for TinyLm<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_context(&self) -> usize {
        self.config.max_seq_len
    }

    fn next_logits(&self, context: &[usize]) -> Result<Vec<f64>> {
        let logits = self.logits(context)?;
        let v = self.config.vocab_size;
        let last = &logits.data()[logits.len() - v..];
        Ok(last.iter().map(|x| x.as_f64()).collect())
    }

    fn session(&self) -> Box<dyn Session + '_> {
        Box::new(KvCache::new(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    /// Sample from `softmax(logits / T)`.
    Temperature(f64),
    /// Greedy, but never complete an n-gram already present in
    /// prompt ++ generation.
    NgramBlock(usize),
}

impl fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeStrategy::Greedy => write!(f, "greedy"),
            DecodeStrategy::Temperature(t) => write!(f, "temperature({t})"),
            DecodeStrategy::NgramBlock(n) => write!(f, "ngram_block({n})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    /// Generated tokens, ending with eos when the model stopped on its own.
    pub tokens: Vec<usize>,
    /// Steps at which every token was blocked and plain argmax was used.
    pub fallbacks: usize,
}

impl Generation {
    pub fn hit_eos(&self) -> bool {
        self.tokens.last() == Some(&Vocab::EOS_ID)
    }

    /// Generated tokens without the trailing eos.
    pub fn content(&self) -> &[usize] {
        if self.hit_eos() {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// One line of a generation dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: String,
    pub response: String,
    pub strategy: String,
    pub seed: u64,
}

fn argmax(logits: &[f64], allowed: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in logits.iter().enumerate() {
        if allowed(i) && best.is_none_or(|b| v > logits[b]) {
            best = Some(i);
        }
    }
    best
}

/// Tokens whose emission would complete an n-gram already in `history`.
fn blocked_tokens(history: &[usize], n: usize) -> HashSet<usize> {
    let mut out = HashSet::new();
    if n == 1 {
        out.extend(history.iter().copied());
        return out;
    }
    if history.len() < n - 1 {
        return out;
    }
    let prefix = &history[history.len() - (n - 1)..];
    for w in history.windows(n) {
        if &w[..n - 1] == prefix {
            out.insert(w[n - 1]);
        }
    }
    out
}

fn sample_temperature(logits: &[f64], temp: f64, u: f64, allowed: impl Fn(usize) -> bool) -> usize {
    let scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { v / temp } else { f64::NEG_INFINITY })
        .collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = weights.iter().sum();
    let target = u * z;
    let mut acc = 0.0;
    let mut last_allowed = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_allowed = i;
            acc += w;
            if target < acc {
                return i;
            }
        }
    }
    last_allowed
}

/// Generates up to `max_new_tokens` continuation tokens for `prompt`.
/// Pad and bos are never emitted; generation stops after eos or when the
/// model context is full.
pub fn decode<M: NextToken + ?Sized>(
    model: &M,
    prompt: &[usize],
    strategy: DecodeStrategy,
    max_new_tokens: usize,
    rng: &mut Rng,
) -> Result<Generation> {
    if max_new_tokens == 0 {
        return Err(Error::invalid("decode", "max_new_tokens must be >= 1"));
    }
    match strategy {
        DecodeStrategy::NgramBlock(0) => return Err(Error::invalid("decode", "n-gram size must be >= 1")),
        DecodeStrategy::Temperature(t) if !(t > 0.0 && t.is_finite()) => {
            return Err(Error::invalid("decode", format!("temperature {t} must be positive")))
        }
        _ => {}
    }
    let budget = max_new_tokens.min(model.max_context().saturating_sub(prompt.len()));
    let mut context = Vec::with_capacity(1 + prompt.len() + budget);
    context.push(Vocab::BOS_ID);
    context.extend_from_slice(prompt);
    let mut out = Generation {
        tokens: Vec::with_capacity(budget),
        fallbacks: 0,
    };
    let never = |i: usize| i == Vocab::PAD_ID || i == Vocab::BOS_ID;
    let mut session = model.session();
    let mut logits = Vec::new();
    for &t in &context {
        logits = session.push(t)?;
    }
    for step in 0..budget {
        if step > 0 {
            logits = session.push(*context.last().expect("non-empty"))?;
        }
        let next = match strategy {
            DecodeStrategy::Greedy => argmax(&logits, |i| !never(i)),
            DecodeStrategy::Temperature(t) => {
                let u: f64 = rng.random();
                Some(sample_temperature(&logits, t, u, |i| !never(i)))
            }
            DecodeStrategy::NgramBlock(n) => {
                let blocked = blocked_tokens(&context[1..], n);
                argmax(&logits, |i| !never(i) && !blocked.contains(&i)).or_else(|| {
                    out.fallbacks += 1;
                    argmax(&logits, |i| !never(i))
                })
            }
        }
        .ok_or_else(|| Error::invalid("decode", "no token can be emitted"))?;
        out.tokens.push(next);
        context.push(next);
        if next == Vocab::EOS_ID {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::rng_for;

    /// Logit table indexed by the last context token.
    struct Table(Vec<Vec<f64>>);

    impl NextToken for Table {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }
        fn max_context(&self) -> usize {
            1000
        }
        fn next_logits(&self, context: &[usize]) -> Result<Vec<f64>> {
            Ok(self.0[*context.last().unwrap()].clone())
        }
    }

    fn cyclic_table() -> Table {
        // tokens 3 and 4 alternate deterministically
        let mut rows = vec![vec![0.0; 6]; 6];
        for (i, row) in rows.iter_mut().enumerate() {
            let next = if i == 3 { 4 } else { 3 };
            row[next] = 5.0;
            row[5] = 1.0;
        }
        Table(rows)
    }

    #[test]
    fn greedy_on_two_cycle_has_period_two() {
        let mut rng = rng_for(0, &[]);
        let g = decode(&cyclic_table(), &[5], DecodeStrategy::Greedy, 8, &mut rng).unwrap();
        assert_eq!(g.tokens, vec![3, 4, 3, 4, 3, 4, 3, 4]);
    }

    #[test]
    fn ngram_block_prevents_repeated_trigrams() {
        let mut rng = rng_for(0, &[]);
        let g = decode(&cyclic_table(), &[5], DecodeStrategy::NgramBlock(3), 10, &mut rng).unwrap();
        assert_eq!(g.fallbacks, 0);
        let mut hist = vec![5];
        hist.extend(&g.tokens);
        let mut seen = HashSet::new();
        for w in hist.windows(3) {
            assert!(seen.insert(w.to_vec()), "repeated {w:?} in {hist:?}");
        }
    }

    #[test]
    fn fallback_counted_when_everything_blocked() {
        let mut rows = vec![vec![0.0; 4]; 4];
        for r in &mut rows {
            r[3] = 1.0;
        }
        let t = Table(rows);
        let mut rng = rng_for(0, &[]);
        // eos is only blockable when it already appears in the prompt
        let g = decode(&t, &[3, 2], DecodeStrategy::NgramBlock(1), 2, &mut rng).unwrap();
        assert_eq!(g.tokens, vec![3, 3]);
        assert_eq!(g.fallbacks, 2);
        let g = decode(&t, &[3], DecodeStrategy::NgramBlock(1), 2, &mut rng).unwrap();
        assert_eq!(g.tokens, vec![2]);
        assert_eq!(g.fallbacks, 0);
    }

    #[test]
    fn invalid_arguments() {
        let mut rng = rng_for(0, &[]);
        let t = cyclic_table();
        assert!(decode(&t, &[5], DecodeStrategy::Greedy, 0, &mut rng).is_err());
        assert!(decode(&t, &[5], DecodeStrategy::NgramBlock(0), 3, &mut rng).is_err());
        assert!(decode(&t, &[5], DecodeStrategy::Temperature(0.0), 3, &mut rng).is_err());
    }

    #[test]
    fn strategy_serializes_compactly() {
        let s = serde_json::to_string(&DecodeStrategy::Temperature(0.7)).unwrap();
        assert_eq!(s, r#"{"temperature":0.7}"#);
        let g: DecodeStrategy = serde_json::from_str(r#""greedy""#).unwrap();
        assert_eq!(g, DecodeStrategy::Greedy);
    }
}
