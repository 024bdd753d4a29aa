//! Experiment configuration: one JSON document covering data generation,
//! model, training plans, losses, the iterative loop, and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::numerics::DType;
use crate::pco::{PcoSettings, TrainPlan};
use crate::tinylm::LmConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Sizes of the disjoint sentence ranges drawn from the grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSplits {
    /// Demonstrations for supervised fine-tuning.
    pub sft: usize,
    /// Prompts whose generations form the original preference pairs.
    pub pair_prompts: usize,
    /// Prompts labeled during later iterations.
    pub unlabeled_prompts: usize,
    /// Held-out prompts with reference responses.
    pub eval: usize,
}

impl Default for DataSplits {
    fn default() -> Self {
        DataSplits {
            sft: 2000,
            pair_prompts: 128,
            unlabeled_prompts: 128,
            eval: 100,
        }
    }
}

/// Scorer used to label generations and to judge win rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    RepetitionPenalty { n: usize },
    /// Coefficients are drawn from the global seed.
    HiddenLinear { length_penalty: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// n-gram size of the repetition metric and of pair mining.
    pub ngram: usize,
    pub max_new_tokens: usize,
    pub reward: RewardSpec,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ngram: 3,
            max_new_tokens: 24,
            reward: RewardSpec::RepetitionPenalty { n: 3 },
        }
    }
}

/// Artifact locations. Relative paths resolve against `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub sft_checkpoint: PathBuf,
    pub pairs: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: "runs".into(),
            corpus: "corpus.txt".into(),
            vocab: "vocab.txt".into(),
            sft_checkpoint: "sft.ckpt".into(),
            pairs: "pairs.jsonl".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub precision: DType,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub data: DataSplits,
    pub lm: LmConfig,
    pub sft: TrainPlan,
    pub pref: TrainPlan,
    pub loss: LossConfig,
    pub iterations: usize,
    pub pco: PcoSettings,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::toy()
    }
}

impl ExperimentConfig {
    /// The reference toy configuration.
    pub fn toy() -> Self {
        let corpus = CorpusConfig::default();
        let lm = LmConfig {
            vocab_size: corpus.vocab_size,
            n_layers: 2,
            n_heads: 4,
            d_model: 48,
            d_ff: 96,
            max_seq_len: 32,
            ..LmConfig::default()
        };
        let mut sft = TrainPlan {
            steps: 600,
            batch_size: 16,
            warmup_steps: 20,
            ..TrainPlan::default()
        };
        sft.optimizer.lr = 3e-3;
        let mut pref = TrainPlan {
            steps: 200,
            batch_size: 16,
            warmup_steps: 10,
            ..TrainPlan::default()
        };
        pref.optimizer.lr = 1e-3;
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            precision: DType::F32,
            paths: Paths::default(),
            corpus,
            data: DataSplits::default(),
            lm,
            sft,
            pref,
            loss: LossConfig::default(),
            iterations: 2,
            pco: PcoSettings {
                max_new_tokens: 24,
                ..PcoSettings::default()
            },
            eval: EvalSettings::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every field-level problem, or Ok.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{field}: {e}"));
            }
        };
        if self.schema_version != SCHEMA_VERSION {
            check(
                "schema_version",
                Err(Error::Config(format!("expected {SCHEMA_VERSION}, got {}", self.schema_version))),
            );
        }
        check("corpus", self.corpus.validate());
        check("lm", self.lm.validate());
        check("sft", self.sft.validate());
        check("pref", self.pref.validate());
        check("loss", self.loss.validate());
        if self.lm.vocab_size != self.corpus.vocab_size {
            check(
                "lm.vocab_size",
                Err(Error::Config(format!("must equal corpus.vocab_size {}", self.corpus.vocab_size))),
            );
        }
        if self.lm.max_seq_len < self.corpus.max_sequence_len() - 1 {
            check(
                "lm.max_seq_len",
                Err(Error::Config(format!("must be >= {}", self.corpus.max_sequence_len() - 1))),
            );
        }
        if self.iterations < 1 {
            check("iterations", Err(Error::Config("must be >= 1".into())));
        }
        if self.pco.samples_per_prompt < 2 || self.pco.max_new_tokens < 1 {
            check("pco", Err(Error::Config("samples_per_prompt >= 2 and max_new_tokens >= 1".into())));
        }
        if self.eval.ngram < 1 || self.eval.max_new_tokens < 1 {
            check("eval", Err(Error::Config("ngram and max_new_tokens must be >= 1".into())));
        }
        if self.data.sft == 0 || self.data.pair_prompts == 0 || self.data.eval == 0 {
            check("data", Err(Error::Config("sft, pair_prompts and eval must be >= 1".into())));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(&serde_json::to_value(self).expect("config serializes")).expect("json");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
