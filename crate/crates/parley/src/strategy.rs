//! Threshold routing among the three generation strategies.
//!
//! The branch predicates use the literal boundary inequalities
//! (`goal_c <= c_low`, `goal_p < p_high`, strict middle interval), and are
//! exhaustive and pairwise disjoint over the whole score square.

use crate::dialogue::TurnStrategy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A routing decision: exactly the three injectable strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "NSC")]
    Nsc,
    #[serde(rename = "SSI")]
    Ssi,
    #[serde(rename = "NSI")]
    Nsi,
}

impl From<Strategy> for TurnStrategy {
    fn from(value: Strategy) -> Self {
        match value {
            Strategy::Nsc => TurnStrategy::Nsc,
            Strategy::Ssi => TurnStrategy::Ssi,
            Strategy::Nsi => TurnStrategy::Nsi,
        }
    }
}

/// Routing boundaries on the (goal_c, goal_p) square.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyThresholds {
    pub c_low: f64,
    pub p_high: f64,
    pub c_high: f64,
}

impl Default for StrategyThresholds {
    fn default() -> Self {
        Self { c_low: 7.5, p_high: 8.5, c_high: 8.5 }
    }
}

impl StrategyThresholds {
    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.c_low > self.c_high {
            return Err(StrategyError::InvalidThresholds);
        }
        Ok(())
    }
}

/// Dialogue-loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub max_turns: usize,
    pub init_turns: usize,
    /// Rating starts once this many actions exist (the rating after action
    /// index `rate_from_turn - 1` decides the strategy for the next action).
    pub rate_from_turn: usize,
    pub thresholds: StrategyThresholds,
    pub sample_count: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_turns: 20,
            init_turns: 6,
            rate_from_turn: 6,
            thresholds: StrategyThresholds::default(),
            sample_count: 5,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.init_turns > self.max_turns || self.rate_from_turn > self.max_turns {
            return Err(StrategyError::InvalidConfig);
        }
        if self.sample_count == 0 || self.max_turns == 0 {
            return Err(StrategyError::InvalidConfig);
        }
        self.thresholds.validate()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StrategyError {
    #[error("c_low must not exceed c_high")]
    InvalidThresholds,
    #[error("engine config violates init_turns <= max_turns and rate_from_turn <= max_turns")]
    InvalidConfig,
    #[error("NSI prompting belongs to the negotiation workflow")]
    WrongModule,
}

/// Routes the next action from the scalar step-rating scores.
pub fn select_strategy(goal_c: f64, goal_p: f64, t: &StrategyThresholds) -> Strategy {
    if goal_c <= t.c_low && goal_p < t.p_high {
        Strategy::Nsi
    } else if (goal_c <= t.c_low && goal_p >= t.p_high)
        || (t.c_low < goal_c && goal_c < t.c_high && goal_p < t.p_high)
    {
        Strategy::Ssi
    } else {
        Strategy::Nsc
    }
}

/// NSC leaves the base prompt unchanged; SSI appends the conflict-awareness
/// instruction. The instruction is re-appended fresh each SSI turn; nothing
/// persists across turns.
pub fn compose_prompt(
    strategy: Strategy,
    base_prompt: &str,
    ssi_footnote: &str,
) -> Result<String, StrategyError> {
    match strategy {
        Strategy::Nsc => Ok(base_prompt.to_string()),
        Strategy::Ssi => Ok(format!("{base_prompt}\n\n{ssi_footnote}")),
        Strategy::Nsi => Err(StrategyError::WrongModule),
    }
}
