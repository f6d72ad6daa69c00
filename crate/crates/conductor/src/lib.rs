//! An orchestration engine that resolves complex queries by decomposing them
//! into a DAG of sub-questions, executing them through pluggable specialized
//! agent backends with dependency-aware parallelism, verifying collective
//! completeness, adaptively replanning to fill gaps, and synthesizing a cited
//! final answer.
//!
//! Every model-facing role (planner, agents, verifier, replanner,
//! synthesizer) sits behind an interface in [`backends`]; scripted scenario
//! backends plus a virtual-time execution driver make whole runs
//! deterministic and replayable offline.

pub mod backends;
pub mod events;
pub mod executor;
pub mod orchestrator;
pub mod plan;
pub mod replanning;
pub mod stopping;
pub mod synthesis;
pub mod verification;

pub use backends::{BackendRegistry, Phase, TokenLedger};
pub use events::{EventSink, NullSink, RunEvent, RunEventKind, VecSink};
pub use executor::{AgentResult, BatchMode, ExecutorConfig, SourceAttribution};
pub use orchestrator::{run, OrchestrationState, RunMode, RunOptions, RunReport, TimingMode};
pub use plan::{AgentType, ExecutionPlan, SubQuestion};
pub use stopping::{OrchestrationConfig, StopDecision, StopOutcome};
pub use synthesis::FinalAnswer;
pub use verification::{Recommendation, VerificationRecord, VerificationStatus};
