use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::losses::{binarize_pairs, BinaryBatch, PreferencePair};
use crate::numerics::rng::{self, stream};
use crate::tinylm::Vocab;

/// Where a pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Original,
    /// Generated and labeled during iteration `i`.
    Mined(usize),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Original => write!(f, "original"),
            Provenance::Mined(i) => write!(f, "mined_iteration_{i}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "original" {
            return Ok(Provenance::Original);
        }
        s.strip_prefix("mined_iteration_")
            .and_then(|i| i.parse().ok())
            .map(Provenance::Mined)
            .ok_or_else(|| Error::invalid("provenance", format!("unknown provenance `{s}`")))
    }
}

impl Serialize for Provenance {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `keep` of `0..len` drawn without replacement (all of them when
/// `keep >= len`), in increasing order. `side` separates independent draws.
pub fn subsample_indices(len: usize, keep: usize, seed: u64, side: u64) -> Vec<usize> {
    if keep >= len {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::rng_for(seed, &[stream::MIX, side]));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub pair: PreferencePair,
    pub provenance: Provenance,
    /// Rewards of (winner, loser) when a reward model labeled the pair.
    pub rewards: Option<[f64; 2]>,
}

/// Preference pairs with provenance. Winner and loser always differ.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    entries: Vec<DatasetEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlLine {
    prompt: String,
    winner: String,
    loser: String,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rewards: Option<[f64; 2]>,
}

impl PreferenceDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: Vec<PreferencePair>, provenance: Provenance) -> Result<Self> {
        let mut d = Self::new();
        for p in pairs {
            d.push(p, provenance, None)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, pair: PreferencePair, provenance: Provenance, rewards: Option<[f64; 2]>) -> Result<()> {
        if pair.winner == pair.loser {
            return Err(Error::invalid("preference_dataset", "winner and loser are identical"));
        }
        self.entries.push(DatasetEntry {
            pair,
            provenance,
            rewards,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn pairs(&self) -> Vec<PreferencePair> {
        self.entries.iter().map(|e| e.pair.clone()).collect()
    }

    pub fn provenance_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.provenance.to_string()).or_default() += 1;
        }
        out
    }

    /// Concatenation, provenance preserved.
    pub fn merge(original: &PreferenceDataset, mined: &PreferenceDataset) -> PreferenceDataset {
        let mut entries = original.entries.clone();
        entries.extend(mined.entries.iter().cloned());
        PreferenceDataset { entries }
    }

    /// Merge at 1:1 by pair count: the larger side is down-sampled by a
    /// seeded draw without replacement, keeping its original order.
    pub fn merge_balanced(original: &PreferenceDataset, mined: &PreferenceDataset, seed: u64) -> PreferenceDataset {
        let n = original.len().min(mined.len());
        if n == 0 {
            return Self::merge(original, mined);
        }
        let take = |d: &PreferenceDataset, side: u64| -> Vec<DatasetEntry> {
            subsample_indices(d.len(), n, seed, side)
                .into_iter()
                .map(|i| d.entries[i].clone())
                .collect()
        };
        let mut entries = take(original, 0);
        entries.extend(take(mined, 1));
        PreferenceDataset { entries }
    }

    pub fn binarize(&self) -> BinaryBatch {
        binarize_pairs(&self.pairs())
    }

    /// Writes one JSON object per line with tokens rendered through `vocab`.
    pub fn save_jsonl(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            let line = JsonlLine {
                prompt: vocab.decode(&e.pair.prompt),
                winner: vocab.decode(&e.pair.winner),
                loser: vocab.decode(&e.pair.loser),
                provenance: e.provenance,
                rewards: e.rewards,
            };
            serde_json::to_writer(&mut f, &line)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path, vocab: &Vocab) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        let mut d = Self::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: JsonlLine = serde_json::from_str(&line)
                .map_err(|e| Error::invalid("dataset", format!("{}:{}: {e}", path.display(), i + 1)))?;
            let pair = PreferencePair::new(vocab.encode(&l.prompt)?, vocab.encode(&l.winner)?, vocab.encode(&l.loser)?);
            d.push(pair, l.provenance, l.rewards)?;
        }
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(w: usize) -> PreferencePair {
        PreferencePair::new(vec![3], vec![w, 2], vec![4, 4, 2])
    }

    #[test]
    fn identical_pairs_rejected() {
        let mut d = PreferenceDataset::new();
        assert!(d.push(PreferencePair::new(vec![3], vec![4], vec![4]), Provenance::Original, None).is_err());
        assert!(d.is_empty());
    }

    #[test]
    fn merge_preserves_counts() {
        let a = PreferenceDataset::from_pairs(vec![pair(5), pair(6)], Provenance::Original).unwrap();
        let b = PreferenceDataset::from_pairs(vec![pair(7)], Provenance::Mined(2)).unwrap();
        assert_eq!(PreferenceDataset::merge(&a, &PreferenceDataset::new()), a);
        let m = PreferenceDataset::merge(&a, &b);
        assert_eq!(m.len(), 3);
        assert_eq!(m.provenance_counts()["original"], 2);
        assert_eq!(m.provenance_counts()["mined_iteration_2"], 1);
        let bal = PreferenceDataset::merge_balanced(&a, &b, 9);
        assert_eq!(bal.len(), 2);
        assert_eq!(bal.provenance_counts()["original"], 1);
    }

    #[test]
    fn binarize_counts() {
        let a = PreferenceDataset::from_pairs((5..15).map(pair).collect(), Provenance::Original).unwrap();
        let b = a.binarize();
        assert_eq!(b.items.len(), 20);
        assert_eq!(b.items.iter().filter(|i| i.label == crate::losses::Label::Positive).count(), 10);
        assert!(PreferenceDataset::new().binarize().items.is_empty());
    }

    #[test]
    fn jsonl_round_trip() {
        let vocab = Vocab::new(&["a", "b", "c", "d", "e", "f"]).unwrap();
        let mut d = PreferenceDataset::new();
        d.push(pair(5), Provenance::Original, None).unwrap();
        d.push(pair(6), Provenance::Mined(1), Some([1.5, -2.0])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.jsonl");
        d.save_jsonl(&p, &vocab).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains(r#""provenance":"mined_iteration_1""#));
        assert_eq!(PreferenceDataset::load_jsonl(&p, &vocab).unwrap(), d);
    }

    #[test]
    fn provenance_parse() {
        assert_eq!("mined_iteration_3".parse::<Provenance>().unwrap(), Provenance::Mined(3));
        assert!("mined".parse::<Provenance>().is_err());
    }
}
