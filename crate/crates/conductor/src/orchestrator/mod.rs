//! The top-level state machine: Plan -> Execute -> Verify -> (stop? ->
//! Synthesize : Replan -> Execute ...), owning run state, the token ledger,
//! and the event stream.

pub mod report;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendRegistry, Phase, RegistryError, TokenLedger};
use crate::events::{
    Clock, EventBus, EventSink, RunEvent, RunEventKind, RunStatus, SimClock, SystemClock,
};
use crate::executor::{
    execute_plan, AgentResult, BatchMode, ExecutionContext, ExecutionDriver, ExecutorConfig,
    ExecutorError, SimDriver, ThreadDriver,
};
use crate::plan::{validate_plan, AgentType, ExecutionPlan, SubQuestion, ValidationReport};
use crate::replanning::{decide_replan, merge_results, ReplanDecision};
use crate::stopping::{evaluate_stop_for_state, OrchestrationConfig, StopDecision, StopOutcome};
use crate::synthesis::{synthesize, FinalAnswer, SynthesisError};
use crate::verification::{completeness_ratio, verify_results, VerificationRecord};

/// Coordination mode: the full verified loop, or one of the degenerate
/// baseline configurations run inside the same engine so token accounting
/// and event schemas stay comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Full,
    StaticPipeline,
    SingleAgent,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Full => "full",
            RunMode::StaticPipeline => "static_pipeline",
            RunMode::SingleAgent => "single_agent",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether executions complete in virtual time (scripted backends) or on
/// real threads with wall-clock timeouts (live backends).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimingMode {
    #[default]
    Simulated,
    WallClock,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub mode: RunMode,
    pub timing: TimingMode,
    pub batch_mode: BatchMode,
}

/// Everything the loop accumulates. The plan grows as replanning adds
/// sub-questions; `completeness_history` gains one entry per verify phase;
/// `stop` is set exactly once, to a non-Continue outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestrationState {
    pub iteration: u32,
    pub plan: ExecutionPlan,
    pub results: BTreeMap<String, AgentResult>,
    pub records: BTreeMap<String, VerificationRecord>,
    pub completeness_history: Vec<f64>,
    pub ledger: TokenLedger,
    pub stop: Option<StopDecision>,
}

impl OrchestrationState {
    pub fn new(plan: ExecutionPlan) -> Self {
        Self {
            iteration: 0,
            plan,
            results: BTreeMap::new(),
            records: BTreeMap::new(),
            completeness_history: Vec::new(),
            ledger: TokenLedger::new(),
            stop: None,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serialization cannot fail")
    }
}

/// Final deliverable of one run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub final_answer: FinalAnswer,
    pub state: OrchestrationState,
    pub events: Vec<RunEvent>,
    pub mode: RunMode,
    /// Completeness ratio of the final records; for baseline modes (which
    /// have no verify phase) this is a post-run assessment by the verifier
    /// backend, never charged to the run ledger.
    pub final_completeness: f64,
    pub verify_cycles: u32,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("planner failed: {0}")]
    Planner(String),
    #[error("planner produced an invalid plan: {0}")]
    InvalidPlan(ValidationReport),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("execution failed: {0}")]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

/// The fixed agent sequence used by static-pipeline mode.
pub const STATIC_PIPELINE_SEQUENCE: [AgentType; 4] = [
    AgentType::Rag,
    AgentType::WebSearch,
    AgentType::Financial,
    AgentType::Analysis,
];

fn static_pipeline_plan(query: &str) -> ExecutionPlan {
    let mut sub_questions: Vec<SubQuestion> = Vec::new();
    let mut previous: Option<String> = None;
    for (index, agent_type) in STATIC_PIPELINE_SEQUENCE.iter().enumerate() {
        let id = format!("pipeline_{}", agent_type.as_str());
        let mut sq = SubQuestion::new(&id, query, *agent_type)
            .with_priority(10 - index as u8)
            .with_context_from_deps(previous.is_some());
        if let Some(prev) = &previous {
            sq = sq.with_dependency(prev.clone());
        }
        previous = Some(id);
        sub_questions.push(sq);
    }
    ExecutionPlan::new(sub_questions, "fixed pipeline sequence")
}

fn single_agent_plan(query: &str) -> ExecutionPlan {
    ExecutionPlan::new(
        vec![SubQuestion::new("single_agent", query, AgentType::Reasoning).with_priority(10)],
        "single reasoning agent over the whole query",
    )
}

struct RunContext<'a> {
    query: &'a str,
    config: &'a OrchestrationConfig,
    registry: &'a BackendRegistry,
    executor_config: ExecutorConfig,
    driver: Box<dyn ExecutionDriver>,
}

/// Runs one orchestration to completion. Phases follow the loop order; every
/// iteration ends with a stop evaluation; synthesis always runs after the
/// stop fires, even on budget or iteration stops.
pub fn run(
    query: &str,
    config: &OrchestrationConfig,
    registry: &BackendRegistry,
    sink: &dyn EventSink,
    options: &RunOptions,
) -> Result<RunReport, RunError> {
    let (clock, driver): (Arc<dyn Clock>, Box<dyn ExecutionDriver>) = match options.timing {
        TimingMode::Simulated => {
            let sim = Arc::new(SimClock::new());
            (sim.clone(), Box::new(SimDriver::new(sim)))
        }
        TimingMode::WallClock => (Arc::new(SystemClock::new()), Box::new(ThreadDriver::new())),
    };
    let mut bus = EventBus::new(sink, clock);
    let executor_config = ExecutorConfig {
        max_concurrent: config.max_concurrent,
        agent_timeout: config.agent_timeout,
        batch_mode: options.batch_mode,
        ..ExecutorConfig::default()
    };
    let mut ctx = RunContext {
        query,
        config,
        registry,
        executor_config,
        driver,
    };

    bus.emit(RunEventKind::RunStarted {
        query: query.to_string(),
        mode: options.mode.as_str().to_string(),
    });

    match run_inner(&mut ctx, options, &mut bus) {
        Ok(mut report) => {
            bus.emit(RunEventKind::RunFinished {
                status: RunStatus::Completed,
                stop: report.state.stop.as_ref().map(|s| s.outcome),
                total_tokens: report.state.ledger.total(),
                verify_cycles: report.verify_cycles,
                error: None,
            });
            report.events = bus.into_log();
            Ok(report)
        }
        Err(err) => {
            bus.emit(RunEventKind::RunFinished {
                status: RunStatus::Failed,
                stop: None,
                total_tokens: 0,
                verify_cycles: 0,
                error: Some(err.to_string()),
            });
            Err(err)
        }
    }
}

fn run_inner(
    ctx: &mut RunContext<'_>,
    options: &RunOptions,
    bus: &mut EventBus<'_>,
) -> Result<RunReport, RunError> {
    // Plan phase. Baseline modes build their fixed plan in-engine.
    bus.emit(RunEventKind::PhaseStarted {
        phase: Phase::Plan,
        iteration: 0,
    });
    let (plan, plan_tokens) = match options.mode {
        RunMode::Full => {
            let output = ctx
                .registry
                .planner()
                .plan(ctx.query)
                .map_err(|e| RunError::Planner(e.message.clone()))?;
            (output.plan, output.tokens_used)
        }
        RunMode::StaticPipeline => (static_pipeline_plan(ctx.query), 0),
        RunMode::SingleAgent => (single_agent_plan(ctx.query), 0),
    };
    let report = validate_plan(&plan);
    if !report.is_ok() {
        return Err(RunError::InvalidPlan(report));
    }
    ctx.registry.validate_for(&plan)?;

    let mut state = OrchestrationState::new(plan);
    state.ledger.charge(Phase::Plan, plan_tokens);
    bus.emit(RunEventKind::PhaseFinished {
        phase: Phase::Plan,
        iteration: 0,
        tokens: plan_tokens,
    });

    match options.mode {
        RunMode::Full => run_verified_loop(ctx, &mut state, bus)?,
        RunMode::StaticPipeline | RunMode::SingleAgent => {
            let pending = state.plan.ids();
            let attempts = pending.iter().map(|id| (id.clone(), 1)).collect();
            execute_phase(ctx, &mut state, &pending, &attempts, bus)?;
        }
    }

    let answer = synthesize_phase(ctx, &mut state, bus)?;
    let verify_cycles = state.completeness_history.len() as u32;
    let final_completeness = match options.mode {
        RunMode::Full => completeness_ratio(&state.records),
        // External assessment for baselines: same verifier, no phase event,
        // no ledger charge.
        _ => {
            let assessed = verify_results(
                &state.plan,
                &state.results,
                &BTreeMap::new(),
                ctx.registry.verifier(),
            );
            completeness_ratio(&assessed.records)
        }
    };

    Ok(RunReport {
        final_answer: answer,
        state,
        events: Vec::new(),
        mode: options.mode,
        final_completeness,
        verify_cycles,
    })
}

fn run_verified_loop(
    ctx: &mut RunContext<'_>,
    state: &mut OrchestrationState,
    bus: &mut EventBus<'_>,
) -> Result<(), RunError> {
    let mut pending: BTreeSet<String> = state.plan.ids();
    let mut attempts: BTreeMap<String, u32> = pending.iter().map(|id| (id.clone(), 1)).collect();

    loop {
        // Phase-level budget enforcement: once the ledger reaches the
        // budget no Execute/Verify/Replan phase may start; only the
        // mandatory synthesis still runs.
        if budget_stop(ctx, state, bus) {
            break;
        }
        execute_phase(ctx, state, &pending, &attempts, bus)?;

        if budget_stop(ctx, state, bus) {
            break;
        }
        verify_phase(ctx, state, bus);

        let decision = evaluate_stop_for_state(state, ctx.config);
        if !decision.proceed() {
            trigger_stop(state, decision, bus);
            break;
        }

        let decision = replan_phase(ctx, state, bus);
        let mut next_pending = BTreeSet::new();
        let mut next_attempts = BTreeMap::new();
        for id in &decision.retry_sub_questions {
            let attempt = state.results.get(id).map(|r| r.attempt + 1).unwrap_or(1);
            next_pending.insert(id.clone());
            next_attempts.insert(id.clone(), attempt);
        }
        for sq in decision.new_sub_questions {
            next_pending.insert(sq.id.clone());
            next_attempts.insert(sq.id.clone(), 1);
            state.plan.sub_questions.push(sq);
        }
        debug_assert!(validate_plan(&state.plan).is_ok());
        pending = next_pending;
        attempts = next_attempts;
        state.iteration += 1;
    }
    Ok(())
}

fn budget_stop(
    ctx: &RunContext<'_>,
    state: &mut OrchestrationState,
    bus: &mut EventBus<'_>,
) -> bool {
    if state.stop.is_some() {
        return true;
    }
    if state.ledger.total() >= ctx.config.token_budget {
        let decision = StopDecision {
            outcome: StopOutcome::TokenBudget,
            detail: format!(
                "total tokens {} >= token_budget {}",
                state.ledger.total(),
                ctx.config.token_budget
            ),
        };
        trigger_stop(state, decision, bus);
        return true;
    }
    false
}

fn trigger_stop(state: &mut OrchestrationState, decision: StopDecision, bus: &mut EventBus<'_>) {
    bus.emit(RunEventKind::StopTriggered {
        outcome: decision.outcome,
        detail: decision.detail.clone(),
    });
    state.stop = Some(decision);
}

fn execute_phase(
    ctx: &mut RunContext<'_>,
    state: &mut OrchestrationState,
    pending: &BTreeSet<String>,
    attempts: &BTreeMap<String, u32>,
    bus: &mut EventBus<'_>,
) -> Result<(), RunError> {
    bus.emit(RunEventKind::PhaseStarted {
        phase: Phase::Execute,
        iteration: state.iteration,
    });
    let new_results = execute_plan(
        ExecutionContext {
            plan: &state.plan,
            pending,
            prior_results: &state.results,
            attempts,
        },
        ctx.registry,
        &ctx.executor_config,
        ctx.driver.as_mut(),
        bus,
    )?;

    let mut phase_tokens = 0u64;
    for (id, result) in new_results {
        phase_tokens += result.tokens_used;
        match state.results.remove(&id) {
            Some(previous) => {
                state.results.insert(id, merge_results(&previous, &result));
            }
            None => {
                state.results.insert(id, result);
            }
        }
    }
    state.ledger.charge(Phase::Execute, phase_tokens);
    bus.emit(RunEventKind::PhaseFinished {
        phase: Phase::Execute,
        iteration: state.iteration,
        tokens: phase_tokens,
    });
    Ok(())
}

fn verify_phase(ctx: &RunContext<'_>, state: &mut OrchestrationState, bus: &mut EventBus<'_>) {
    bus.emit(RunEventKind::PhaseStarted {
        phase: Phase::Verify,
        iteration: state.iteration,
    });
    let outcome = verify_results(
        &state.plan,
        &state.results,
        &state.records,
        ctx.registry.verifier(),
    );
    for id in &outcome.fresh {
        let record = &outcome.records[id];
        bus.emit(RunEventKind::VerificationRecorded {
            id: id.clone(),
            status: record.status,
            completeness_score: record.completeness_score,
            confidence: record.confidence,
            recommendation: record.recommendation,
        });
    }
    state.records = outcome.records;
    state.ledger.charge(Phase::Verify, outcome.tokens_used);
    state
        .completeness_history
        .push(completeness_ratio(&state.records));
    bus.emit(RunEventKind::PhaseFinished {
        phase: Phase::Verify,
        iteration: state.iteration,
        tokens: outcome.tokens_used,
    });
}

fn replan_phase(
    ctx: &RunContext<'_>,
    state: &mut OrchestrationState,
    bus: &mut EventBus<'_>,
) -> ReplanDecision {
    bus.emit(RunEventKind::PhaseStarted {
        phase: Phase::Replan,
        iteration: state.iteration,
    });
    let outcome = decide_replan(
        ctx.query,
        &state.plan,
        &state.results,
        &state.records,
        state.iteration,
        ctx.config,
        ctx.registry.replanner(),
    );
    state.ledger.charge(Phase::Replan, outcome.tokens_used);
    bus.emit(RunEventKind::ReplanDecided {
        retry: outcome.decision.retry_sub_questions.clone(),
        new: outcome
            .decision
            .new_sub_questions
            .iter()
            .map(|sq| sq.id.clone())
            .collect(),
        done: outcome.decision.done,
    });
    bus.emit(RunEventKind::PhaseFinished {
        phase: Phase::Replan,
        iteration: state.iteration,
        tokens: outcome.tokens_used,
    });
    outcome.decision
}

fn synthesize_phase(
    ctx: &RunContext<'_>,
    state: &mut OrchestrationState,
    bus: &mut EventBus<'_>,
) -> Result<FinalAnswer, RunError> {
    bus.emit(RunEventKind::PhaseStarted {
        phase: Phase::Synthesize,
        iteration: state.iteration,
    });

    let (answer, tokens, hierarchical, groups) = if state.results.is_empty() {
        // Nothing executed before the run stopped; synthesize a degenerate
        // answer rather than calling the backend with no inputs.
        let gaps = state
            .plan
            .sub_questions
            .iter()
            .map(|sq| format!("{}: never executed", sq.id))
            .collect();
        (
            FinalAnswer {
                answer: "No results were produced before the run stopped.".to_string(),
                key_findings: Vec::new(),
                confidence: 0.0,
                sources: Vec::new(),
                gaps,
            },
            0,
            false,
            0,
        )
    } else {
        let outcome = synthesize(
            ctx.query,
            &state.plan,
            &state.results,
            &state.records,
            ctx.registry.synthesizer(),
        )?;
        (
            outcome.answer,
            outcome.tokens_used,
            outcome.hierarchical,
            outcome.groups,
        )
    };

    state.ledger.charge(Phase::Synthesize, tokens);
    bus.emit(RunEventKind::SynthesisProduced {
        hierarchical,
        groups,
        sources: answer.sources.len(),
        key_findings: answer.key_findings.len(),
        confidence: answer.confidence,
    });
    bus.emit(RunEventKind::PhaseFinished {
        phase: Phase::Synthesize,
        iteration: state.iteration,
        tokens,
    });
    Ok(answer)
}
