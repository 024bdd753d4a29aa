use serde::{Deserialize, Serialize};

use crate::tinylm::PromptResponse;

/// Preference of `winner` over `loser` for a shared prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<usize>,
    pub winner: Vec<usize>,
    pub loser: Vec<usize>,
}

impl PreferencePair {
    pub fn new(prompt: Vec<usize>, winner: Vec<usize>, loser: Vec<usize>) -> Self {
        PreferencePair { prompt, winner, loser }
    }

    pub fn winner_pr(&self) -> PromptResponse {
        PromptResponse::new(self.prompt.clone(), self.winner.clone())
    }

    pub fn loser_pr(&self) -> PromptResponse {
        PromptResponse::new(self.prompt.clone(), self.loser.clone())
    }

    pub fn swapped(&self) -> Self {
        PreferencePair {
            prompt: self.prompt.clone(),
            winner: self.loser.clone(),
            loser: self.winner.clone(),
        }
    }
}

/// Classifier label of a response under binary feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryItem {
    pub pr: PromptResponse,
    pub label: Label,
}

/// A set of independently labeled responses.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryBatch {
    pub items: Vec<BinaryItem>,
}

/// A set of preference pairs; winner and loser share each prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairBatch {
    pub pairs: Vec<PreferencePair>,
}
