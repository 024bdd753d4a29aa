use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Ce,
    BinaryCringe,
    PairwiseCringe,
    HardMarginCringe,
    Dpo,
    Unlikelihood,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::Ce,
        LossVariant::BinaryCringe,
        LossVariant::PairwiseCringe,
        LossVariant::HardMarginCringe,
        LossVariant::Dpo,
        LossVariant::Unlikelihood,
    ];

    /// Command-line spelling, e.g. `pairwise-cringe`.
    pub fn cli_name(self) -> &'static str {
        match self {
            LossVariant::Ce => "ce",
            LossVariant::BinaryCringe => "binary-cringe",
            LossVariant::PairwiseCringe => "pairwise-cringe",
            LossVariant::HardMarginCringe => "hard-margin-cringe",
            LossVariant::Dpo => "dpo",
            LossVariant::Unlikelihood => "unlikelihood",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        LossVariant::ALL
            .into_iter()
            .find(|v| v.cli_name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}

/// Hyperparameters of every preference loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the contrastive term on negative tokens.
    pub alpha: f64,
    /// Number of positive candidates drawn from the model's top predictions.
    pub k: usize,
    /// Margin offset of the gate.
    pub b: f64,
    /// Gate temperature.
    pub tau: f64,
    pub variant: LossVariant,
    pub dpo_beta: f64,
    /// Use length-normalized sequence log-probabilities in the margin.
    pub normalize_margin: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.01,
            k: 5,
            b: -10.0,
            tau: 10.0,
            variant: LossVariant::PairwiseCringe,
            dpo_beta: 0.1,
            normalize_margin: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("loss: {m}")));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail("alpha must be finite and >= 0");
        }
        if self.k < 1 {
            return fail("k must be >= 1");
        }
        if !(self.tau > 0.0) {
            return fail("tau must be > 0");
        }
        if !(self.dpo_beta > 0.0) {
            return fail("dpo_beta must be > 0");
        }
        if self.b.is_nan() {
            return fail("b must be a number");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_keys_and_validation() {
        let c = LossConfig::default();
        let v: serde_json::Value = serde_json::to_value(c).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["alpha", "b", "dpo_beta", "k", "normalize_margin", "tau", "variant"]);
        assert_eq!(v["variant"], "pairwise_cringe");
        assert!(LossConfig { tau: 0.0, ..c }.validate().is_err());
        assert!(LossConfig { k: 0, ..c }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, ..c }.validate().is_err());
        assert!(serde_json::from_str::<LossConfig>(r#"{"alpha":1,"bogus":2}"#).is_err());
    }

    #[test]
    fn cli_names_parse() {
        for v in LossVariant::ALL {
            assert_eq!(v.cli_name().parse::<LossVariant>().unwrap(), v);
        }
        assert!("nope".parse::<LossVariant>().is_err());
    }
}
