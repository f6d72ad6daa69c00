//! Stop conditions: the orchestration configuration and the fixed-precedence
//! evaluation that decides when iteration ends.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::verification::{mean_confidence, VerificationRecord};

pub const DEFAULT_MAX_ITERATIONS: u32 = 3;
pub const DEFAULT_TOKEN_BUDGET: u64 = 1_000_000;
pub const DEFAULT_READY_THRESHOLD: f64 = 0.8;
pub const DEFAULT_HIGH_CONFIDENCE: f64 = 0.75;
pub const DEFAULT_HIGH_CONFIDENCE_MIN_COMPLETE: f64 = 0.5;
pub const DEFAULT_DIMINISHING_RETURNS: f64 = 0.05;

/// Orchestration parameters. The config document uses these exact keys, with
/// `agent_timeout` in seconds; missing keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrchestrationConfig {
    #[serde(default = "defaults::max_iterations")]
    pub max_iterations: u32,
    #[serde(default = "defaults::token_budget")]
    pub token_budget: u64,
    #[serde(default = "defaults::ready_threshold")]
    pub ready_threshold: f64,
    #[serde(default = "defaults::high_confidence")]
    pub high_confidence: f64,
    #[serde(default = "defaults::high_confidence_min_complete")]
    pub high_confidence_min_complete: f64,
    #[serde(default = "defaults::diminishing_returns")]
    pub diminishing_returns: f64,
    #[serde(default = "defaults::max_concurrent")]
    pub max_concurrent: usize,
    #[serde(
        default = "defaults::agent_timeout_secs",
        rename = "agent_timeout",
        with = "secs"
    )]
    pub agent_timeout: Duration,
}

mod defaults {
    use super::*;

    pub fn max_iterations() -> u32 {
        DEFAULT_MAX_ITERATIONS
    }
    pub fn token_budget() -> u64 {
        DEFAULT_TOKEN_BUDGET
    }
    pub fn ready_threshold() -> f64 {
        DEFAULT_READY_THRESHOLD
    }
    pub fn high_confidence() -> f64 {
        DEFAULT_HIGH_CONFIDENCE
    }
    pub fn high_confidence_min_complete() -> f64 {
        DEFAULT_HIGH_CONFIDENCE_MIN_COMPLETE
    }
    pub fn diminishing_returns() -> f64 {
        DEFAULT_DIMINISHING_RETURNS
    }
    pub fn max_concurrent() -> usize {
        crate::executor::DEFAULT_MAX_CONCURRENT
    }
    pub fn agent_timeout_secs() -> Duration {
        crate::executor::DEFAULT_AGENT_TIMEOUT
    }
}

mod secs {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Duration, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u64(value.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Duration, D::Error> {
        let secs = u64::deserialize(deserializer)?;
        Ok(Duration::from_secs(secs))
    }
}

impl Default for OrchestrationConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            token_budget: DEFAULT_TOKEN_BUDGET,
            ready_threshold: DEFAULT_READY_THRESHOLD,
            high_confidence: DEFAULT_HIGH_CONFIDENCE,
            high_confidence_min_complete: DEFAULT_HIGH_CONFIDENCE_MIN_COMPLETE,
            diminishing_returns: DEFAULT_DIMINISHING_RETURNS,
            max_concurrent: crate::executor::DEFAULT_MAX_CONCURRENT,
            agent_timeout: crate::executor::DEFAULT_AGENT_TIMEOUT,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl OrchestrationConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_iterations == 0 {
            return Err(ConfigError::Invalid(
                "max_iterations must be positive".into(),
            ));
        }
        if self.token_budget == 0 {
            return Err(ConfigError::Invalid("token_budget must be positive".into()));
        }
        if self.max_concurrent == 0 {
            return Err(ConfigError::Invalid(
                "max_concurrent must be positive".into(),
            ));
        }
        if self.agent_timeout.is_zero() {
            return Err(ConfigError::Invalid(
                "agent_timeout must be positive".into(),
            ));
        }
        for (name, value) in [
            ("ready_threshold", self.ready_threshold),
            ("high_confidence", self.high_confidence),
            (
                "high_confidence_min_complete",
                self.high_confidence_min_complete,
            ),
            ("diminishing_returns", self.diminishing_returns),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ConfigError::Invalid(format!(
                    "{name} must lie in [0, 1], got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// Which stop condition fired, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopOutcome {
    Continue,
    ReadyForSynthesis,
    HighConfidence,
    DiminishingReturns,
    TokenBudget,
    MaxIterations,
}

impl StopOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            StopOutcome::Continue => "continue",
            StopOutcome::ReadyForSynthesis => "ready_for_synthesis",
            StopOutcome::HighConfidence => "high_confidence",
            StopOutcome::DiminishingReturns => "diminishing_returns",
            StopOutcome::TokenBudget => "token_budget",
            StopOutcome::MaxIterations => "max_iterations",
        }
    }
}

impl fmt::Display for StopOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A fired (or not fired) stop condition with the triggering measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopDecision {
    pub outcome: StopOutcome,
    pub detail: String,
}

impl StopDecision {
    pub fn proceed(&self) -> bool {
        self.outcome == StopOutcome::Continue
    }
}

/// The state slice stop evaluation reads.
#[derive(Debug, Clone, Copy)]
pub struct StopInputs<'a> {
    pub iteration: u32,
    pub total_tokens: u64,
    pub completeness_history: &'a [f64],
    pub records: &'a BTreeMap<String, VerificationRecord>,
}

/// Evaluates the stop conditions in fixed precedence order and returns the
/// first that fires: token budget, max iterations, ready-for-synthesis,
/// high confidence, diminishing returns. Hard resource limits come first so
/// budget enforcement cannot be bypassed by a quality condition. All quality
/// thresholds are inclusive; diminishing returns is strict, and needs at
/// least two history entries so the first iteration may always replan.
pub fn evaluate_stop(inputs: StopInputs<'_>, config: &OrchestrationConfig) -> StopDecision {
    if inputs.total_tokens >= config.token_budget {
        return StopDecision {
            outcome: StopOutcome::TokenBudget,
            detail: format!(
                "total tokens {} >= token_budget {}",
                inputs.total_tokens, config.token_budget
            ),
        };
    }
    if inputs.iteration >= config.max_iterations {
        return StopDecision {
            outcome: StopOutcome::MaxIterations,
            detail: format!(
                "iteration {} >= max_iterations {}",
                inputs.iteration, config.max_iterations
            ),
        };
    }

    let ratio = inputs.completeness_history.last().copied().unwrap_or(0.0);
    if ratio >= config.ready_threshold {
        return StopDecision {
            outcome: StopOutcome::ReadyForSynthesis,
            detail: format!(
                "completeness {:.3} >= ready_threshold {:.3}",
                ratio, config.ready_threshold
            ),
        };
    }

    let confidence = mean_confidence(inputs.records);
    if confidence >= config.high_confidence && ratio >= config.high_confidence_min_complete {
        return StopDecision {
            outcome: StopOutcome::HighConfidence,
            detail: format!(
                "mean confidence {:.3} >= {:.3} and completeness {:.3} >= {:.3}",
                confidence, config.high_confidence, ratio, config.high_confidence_min_complete
            ),
        };
    }

    if inputs.completeness_history.len() >= 2 {
        let previous = inputs.completeness_history[inputs.completeness_history.len() - 2];
        let improvement = ratio - previous;
        if improvement < config.diminishing_returns {
            return StopDecision {
                outcome: StopOutcome::DiminishingReturns,
                detail: format!(
                    "improvement {:.3} < diminishing_returns {:.3}",
                    improvement, config.diminishing_returns
                ),
            };
        }
    }

    StopDecision {
        outcome: StopOutcome::Continue,
        detail: String::new(),
    }
}

/// Convenience wrapper used by the orchestrator, reading the slice straight
/// from run state.
pub fn evaluate_stop_for_state(
    state: &crate::orchestrator::OrchestrationState,
    config: &OrchestrationConfig,
) -> StopDecision {
    evaluate_stop(
        StopInputs {
            iteration: state.iteration,
            total_tokens: state.ledger.total(),
            completeness_history: &state.completeness_history,
            records: &state.records,
        },
        config,
    )
}
