use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::rng::derive_seed;

/// Source of the categorical draws inside the contrastive loss.
///
/// Draws are keyed by `(item, row)` rather than taken from a sequential
/// stream, so any two evaluations that visit the same sequence positions see
/// the same uniforms regardless of what else they compute.
#[derive(Debug, Clone)]
pub struct CandidateSampler {
    seed: u64,
    replay: Option<BTreeMap<(usize, usize), usize>>,
    record: BTreeMap<(usize, usize), usize>,
}

/// Uniform in `[0, 1)` for a sequence position.
pub fn keyed_uniform(seed: u64, item: usize, row: usize) -> f64 {
    let bits = derive_seed(seed, &[item as u64, row as u64]) >> 11;
    bits as f64 / (1u64 << 53) as f64
}

/// Inverse-CDF draw from `softmax(scores)`.
pub fn categorical(scores: &[f64], u: f64) -> usize {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let target = u * z;
    let mut acc = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        acc += wi;
        if target < acc {
            return i;
        }
    }
    w.iter().rposition(|&wi| wi > 0.0).unwrap_or(0)
}

impl CandidateSampler {
    pub fn new(seed: u64) -> Self {
        CandidateSampler {
            seed,
            replay: None,
            record: BTreeMap::new(),
        }
    }

    /// A sampler that repeats the choices recorded by another one.
    pub fn replaying(recorded: &CandidateSampler) -> Self {
        CandidateSampler {
            seed: recorded.seed,
            replay: Some(recorded.record.clone()),
            record: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn choices(&self) -> &BTreeMap<(usize, usize), usize> {
        &self.record
    }

    /// Chooses one of `candidates` (vocabulary indices, in top-k order) with
    /// probabilities `softmax(scores)`.
    pub fn choose(&mut self, item: usize, row: usize, candidates: &[usize], scores: &[f64]) -> Result<usize> {
        let choice = match &self.replay {
            Some(map) => *map.get(&(item, row)).ok_or_else(|| {
                Error::invalid("cringe", format!("no recorded draw for item {item} row {row}"))
            })?,
            None => candidates[categorical(scores, keyed_uniform(self.seed, item, row))],
        };
        self.record.insert((item, row), choice);
        Ok(choice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categorical_inverse_cdf() {
        assert_eq!(categorical(&[0.0, 0.0], 0.49), 0);
        assert_eq!(categorical(&[0.0, 0.0], 0.51), 1);
        assert_eq!(categorical(&[0.0, -1e10, 0.0], 0.75), 2);
    }

    #[test]
    fn keyed_draws_are_position_stable() {
        let a = keyed_uniform(3, 1, 2);
        assert_eq!(a, keyed_uniform(3, 1, 2));
        assert_ne!(a, keyed_uniform(3, 2, 1));
        assert!((0.0..1.0).contains(&a));
    }

    #[test]
    fn replay_repeats_recorded_choices() {
        let mut s = CandidateSampler::new(9);
        let c = s.choose(0, 0, &[4, 7, 8], &[1.0, 1.0, 1.0]).unwrap();
        let mut r = CandidateSampler::replaying(&s);
        assert_eq!(r.choose(0, 0, &[4, 7, 8], &[9.0, -9.0, -9.0]).unwrap(), c);
        assert!(r.choose(0, 1, &[4], &[0.0]).is_err());
    }
}
