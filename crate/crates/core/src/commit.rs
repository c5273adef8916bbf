//! Start-of-word confidence gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::TokenDistribution;

pub const DEFAULT_TAU_DELTA: f64 = 0.7;
pub const DEFAULT_MAX_WORDS_PER_ROUND: usize = 3;

/// Which first-token distribution gates a word.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginSource {
    /// The distribution that started the word just generated.
    #[default]
    CurrentWord,
    /// A fresh distribution at the start of the following word.
    NextWord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub tau_delta: f64,
    pub max_words_per_round: usize,
    pub diversity_enabled: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            tau_delta: DEFAULT_TAU_DELTA,
            max_words_per_round: DEFAULT_MAX_WORDS_PER_ROUND,
            diversity_enabled: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    CommitAndContinue,
    CommitAndHalt,
    Diversify,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginDecision {
    pub margin: f64,
    pub threshold: f64,
    pub verdict: Verdict,
    pub words_committed_so_far: usize,
}

/// Top-1 minus top-2 probability.
pub fn margin(dist: &TokenDistribution) -> Result<f64> {
    match dist.entries.as_slice() {
        [first, second, ..] => Ok((first.logprob.exp() - second.logprob.exp()).clamp(0.0, 1.0)),
        [_] if dist.support == 1 => Ok(1.0),
        entries => Err(Error::InsufficientCandidates(entries.len())),
    }
}

/// Gate verdict for a word whose start had `margin_value`, with `committed`
/// words already in the round.
pub fn decide(margin_value: f64, committed: usize, config: &GateConfig) -> MarginDecision {
    let verdict = if margin_value >= config.tau_delta && committed < config.max_words_per_round {
        Verdict::CommitAndContinue
    } else if margin_value >= config.tau_delta {
        Verdict::CommitAndHalt
    } else if config.diversity_enabled {
        Verdict::Diversify
    } else {
        Verdict::CommitAndHalt
    };
    MarginDecision {
        margin: margin_value,
        threshold: config.tau_delta,
        verdict,
        words_committed_so_far: committed,
    }
}
