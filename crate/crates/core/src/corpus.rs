//! Synthetic corpus from a seeded first-order word grammar. Every word has a
//! few successors with Zipf-like weights. The grammar avoids completing a
//! 3-gram already present in the sentence; `repetition_bias` is the chance
//! of copying the continuation of an earlier occurrence instead.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::categorical;
use crate::numerics::rng::{self, stream, Rng};
use crate::tinylm::{PromptResponse, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Total vocabulary size including the three special tokens.
    pub vocab_size: usize,
    pub n_sentences: usize,
    pub prompt_len: [usize; 2],
    pub response_len: [usize; 2],
    /// Successors per word.
    pub branching: usize,
    /// Successor `r` (0-based) has weight `(r + 1)^(-zipf)`.
    pub zipf: f64,
    pub repetition_bias: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 50,
            n_sentences: 2000,
            prompt_len: [4, 6],
            response_len: [12, 18],
            branching: 6,
            zipf: 1.0,
            repetition_bias: 0.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("corpus: {m}")));
        if self.vocab_size < 8 {
            return bad("vocab_size must be >= 8");
        }
        if self.branching < 2 || self.branching > self.vocab_size - 3 {
            return bad("branching must be in [2, number of words]");
        }
        if self.prompt_len[0] < 1 || self.prompt_len[0] > self.prompt_len[1] {
            return bad("prompt_len must be [min >= 1, max >= min]");
        }
        if self.response_len[0] < 1 || self.response_len[0] > self.response_len[1] {
            return bad("response_len must be [min >= 1, max >= min]");
        }
        if !(0.0..=1.0).contains(&self.repetition_bias) {
            return bad("repetition_bias must be in [0, 1]");
        }
        if !(self.zipf >= 0.0) {
            return bad("zipf must be >= 0");
        }
        Ok(())
    }

    /// Longest `[bos] ++ prompt ++ response ++ [eos]` the grammar produces.
    pub fn max_sequence_len(&self) -> usize {
        1 + self.prompt_len[1] + self.response_len[1] + 1
    }
}

/// Word-transition grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    config: CorpusConfig,
    seed: u64,
    /// Successor ids (vocabulary indices) per word, most likely first.
    successors: Vec<Vec<usize>>,
    log_weights: Vec<f64>,
}

fn word_ids(vocab_size: usize) -> std::ops::Range<usize> {
    Vocab::EOS_ID + 1..vocab_size
}

impl Grammar {
    pub fn new(config: CorpusConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng_for(seed, &[stream::CORPUS, 0]);
        let n_words = config.vocab_size - 3;
        let successors = word_ids(config.vocab_size)
            .map(|_| {
                sample(&mut r, n_words, config.branching)
                    .into_iter()
                    .map(|i| i + Vocab::EOS_ID + 1)
                    .collect()
            })
            .collect();
        let log_weights = (0..config.branching).map(|i| -config.zipf * ((i + 1) as f64).ln()).collect();
        Ok(Grammar {
            config,
            seed,
            successors,
            log_weights,
        })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        let words: Vec<String> = word_ids(self.config.vocab_size).map(|i| format!("w{:02}", i - 3)).collect();
        Vocab::new(&words).expect("generated words are valid")
    }

    pub fn successors(&self, word: usize) -> &[usize] {
        &self.successors[word - Vocab::EOS_ID - 1]
    }

    fn next(&self, seq: &[usize], r: &mut Rng) -> usize {
        let cur = *seq.last().expect("non-empty");
        if self.config.repetition_bias > 0.0 && r.random::<f64>() < self.config.repetition_bias {
            if let Some(j) = seq[..seq.len() - 1].iter().rposition(|&t| t == cur) {
                return seq[j + 1];
            }
        }
        let succ = self.successors(cur);
        let repeats = |c: usize| {
            seq.len() >= 2 && {
                let (a, b) = (seq[seq.len() - 2], cur);
                seq.windows(3).any(|w| w == [a, b, c])
            }
        };
        let allowed: Vec<usize> = (0..succ.len()).filter(|&i| !repeats(succ[i])).collect();
        let pool: Vec<usize> = if allowed.is_empty() { (0..succ.len()).collect() } else { allowed };
        let scores: Vec<f64> = pool.iter().map(|&i| self.log_weights[i]).collect();
        let pick = categorical(&scores, r.random());
        succ[pool[pick]]
    }

    /// Sentence `index`: a prompt and a response ending in eos. Each index
    /// draws from its own stream.
    pub fn sentence(&self, index: u64) -> PromptResponse {
        let c = &self.config;
        let mut r = rng::rng_for(self.seed, &[stream::CORPUS, 1, index]);
        let p = r.random_range(c.prompt_len[0]..=c.prompt_len[1]);
        let l = r.random_range(c.response_len[0]..=c.response_len[1]);
        let mut seq = vec![r.random_range(word_ids(c.vocab_size))];
        while seq.len() < p + l {
            let t = self.next(&seq, &mut r);
            seq.push(t);
        }
        let mut response = seq.split_off(p);
        response.push(Vocab::EOS_ID);
        PromptResponse::new(seq, response)
    }

    pub fn sentences(&self, range: std::ops::Range<u64>) -> Vec<PromptResponse> {
        range.map(|i| self.sentence(i)).collect()
    }
}

/// Writes one sentence per line: prompt words, a tab, response words (eos
/// implied).
pub fn write_corpus(path: &Path, vocab: &Vocab, sentences: &[PromptResponse]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in sentences {
        let resp = &s.response_tokens[..s.response_tokens.len().saturating_sub(1)];
        writeln!(f, "{}\t{}", vocab.decode(&s.prompt_tokens), vocab.decode(resp))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path, vocab: &Vocab) -> Result<Vec<PromptResponse>> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (p, r) = line
            .split_once('\t')
            .ok_or_else(|| Error::invalid("corpus", format!("{}:{}: missing tab separator", path.display(), i + 1)))?;
        let mut response = vocab.encode(r)?;
        response.push(Vocab::EOS_ID);
        out.push(PromptResponse::new(vocab.encode(p)?, response));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}
