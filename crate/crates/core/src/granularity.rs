//! Granularity algebra for advantages, log-probabilities and values.
//!
//! A chunk holds `C` atomic actions and each action holds `M` tokens, so the
//! three levels nest as chunk ⊃ action ⊃ token. Advantages may be defined at
//! the chunk or action level and are broadcast down to whatever level the
//! log-probabilities are computed at. Broadcasting never goes upward, which is
//! why an action-level advantage cannot be paired with a chunk-level
//! log-probability.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    #[serde(alias = "chunk_level")]
    Chunk,
    #[serde(alias = "action_level")]
    Action,
    #[serde(alias = "token_level")]
    Token,
}

impl Level {
    /// Larger is finer.
    fn depth(self) -> u8 {
        match self {
            Level::Chunk => 0,
            Level::Action => 1,
            Level::Token => 2,
        }
    }

    pub fn is_finer_or_equal(self, other: Level) -> bool {
        self.depth() >= other.depth()
    }

    /// Number of units at this level inside one chunk.
    pub fn units_per_chunk(self, chunk_len: usize, tokens_per_action: usize) -> usize {
        match self {
            Level::Chunk => 1,
            Level::Action => chunk_len,
            Level::Token => chunk_len * tokens_per_action,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Level::Chunk => "chunk_level",
            Level::Action => "action_level",
            Level::Token => "token_level",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GranularityError {
    #[error("unsupported combination: {advantage} advantage with {logprob} log-probability")]
    UnsupportedCombination { advantage: Level, logprob: Level },
    #[error("{what} cannot be defined at {level}")]
    InvalidLevel { what: &'static str, level: Level },
    #[error("cannot broadcast from {from} to coarser {to}")]
    GranularityOrderViolation { from: Level, to: Level },
    #[error("expected {expected} input values, got {got}")]
    SizeMismatch { expected: usize, got: usize },
}

/// The (advantage, log-probability, value) level triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GranularitySpec {
    pub advantage_level: Level,
    pub logprob_level: Level,
    pub value_level: Level,
}

impl GranularitySpec {
    /// Builds a spec whose value level follows the advantage level.
    pub fn new(advantage_level: Level, logprob_level: Level) -> Self {
        Self {
            advantage_level,
            logprob_level,
            value_level: advantage_level,
        }
    }

    pub fn with_value_level(mut self, value_level: Level) -> Self {
        self.value_level = value_level;
        self
    }

    pub fn validate(&self) -> Result<(), GranularityError> {
        validate_granularity(self)
    }
}

/// Accepts exactly the supported cells of the advantage × log-probability table.
pub fn validate_granularity(spec: &GranularitySpec) -> Result<(), GranularityError> {
    if spec.advantage_level == Level::Token {
        return Err(GranularityError::InvalidLevel {
            what: "advantage",
            level: Level::Token,
        });
    }
    if spec.value_level == Level::Token {
        return Err(GranularityError::InvalidLevel {
            what: "value",
            level: Level::Token,
        });
    }
    if !spec.logprob_level.is_finer_or_equal(spec.advantage_level) {
        return Err(GranularityError::UnsupportedCombination {
            advantage: spec.advantage_level,
            logprob: spec.logprob_level,
        });
    }
    Ok(())
}

/// Expansion factor from one unit of `from` to units of `to`.
pub fn expansion(
    from: Level,
    to: Level,
    chunk_len: usize,
    tokens_per_action: usize,
) -> Result<usize, GranularityError> {
    if !to.is_finer_or_equal(from) {
        return Err(GranularityError::GranularityOrderViolation { from, to });
    }
    Ok(to.units_per_chunk(chunk_len, tokens_per_action)
        / from.units_per_chunk(chunk_len, tokens_per_action))
}

/// Repeats each source value over the finer units it encloses.
pub fn broadcast_advantage(
    adv: &[f64],
    from: Level,
    to: Level,
    chunk_len: usize,
    tokens_per_action: usize,
) -> Result<Vec<f64>, GranularityError> {
    let factor = expansion(from, to, chunk_len, tokens_per_action)?;
    let per_chunk = from.units_per_chunk(chunk_len, tokens_per_action);
    if !adv.len().is_multiple_of(per_chunk) {
        return Err(GranularityError::SizeMismatch {
            expected: per_chunk * (adv.len() / per_chunk + 1),
            got: adv.len(),
        });
    }
    Ok(adv
        .iter()
        .flat_map(|&a| std::iter::repeat_n(a, factor))
        .collect())
}

/// Sums token log-probabilities (action-major `C x M`) up to the requested level.
///
/// Summation runs in ascending action index, then token index: the chunk
/// total is the in-order sum of the action totals, so the two agree bit for
/// bit.
pub fn aggregate_logprob(token_logprobs: &[f64], tokens_per_action: usize, to: Level) -> Vec<f64> {
    match to {
        Level::Token => token_logprobs.to_vec(),
        Level::Action => token_logprobs
            .chunks(tokens_per_action)
            .map(sum_in_order)
            .collect(),
        Level::Chunk => vec![sum_in_order(
            &token_logprobs
                .chunks(tokens_per_action)
                .map(sum_in_order)
                .collect::<Vec<_>>(),
        )],
    }
}

pub(crate) fn sum_in_order(xs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in xs {
        acc += x;
    }
    acc
}
