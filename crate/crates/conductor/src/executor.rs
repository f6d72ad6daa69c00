//! Dependency-aware parallel execution: ready-set computation, priority
//! batching, dependency-context enrichment, per-execution timeouts, and the
//! tool-call limiter.
//!
//! The coordinator is the sole mutator of scheduling state. Agent executions
//! run through an [`ExecutionDriver`]: [`SimDriver`] completes them in
//! virtual time (deterministic, no real waiting), [`ThreadDriver`] runs them
//! on real threads with wall-clock timeouts.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{route_with_fallback, AgentRequest, BackendRegistry, RoutedResponse};
use crate::events::{Clock, EventBus, ExecutionDisposition, RunEventKind, SimClock};
use crate::plan::{validate_plan, ExecutionPlan, SubQuestion};

/// Trace entries with this tool name are engine markers (failure, timeout,
/// degradation), not tool calls.
pub const ENGINE_TRACE_TOOL: &str = "agent";

/// How ready sub-questions are admitted into execution slots.
///
/// `SlotRefill` admits the next ready sub-question as soon as a slot frees
/// up; `StrictBarrier` admits a top-k batch and waits for all of it before
/// admitting more (the literal batch semantics, kept for conformance runs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    #[default]
    SlotRefill,
    StrictBarrier,
}

pub const DEFAULT_MAX_CONCURRENT: usize = 3;
pub const DEFAULT_AGENT_TIMEOUT: Duration = Duration::from_secs(600);
pub const DEFAULT_MAX_CONSECUTIVE_SAME_TOOL: u32 = 10;
pub const DEFAULT_MAX_TOTAL_TOOL_CALLS: u32 = 50;

/// Execution limits for one plan run. All values strictly positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutorConfig {
    pub max_concurrent: usize,
    pub agent_timeout: Duration,
    pub max_consecutive_same_tool: u32,
    pub max_total_tool_calls: u32,
    pub batch_mode: BatchMode,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            max_concurrent: DEFAULT_MAX_CONCURRENT,
            agent_timeout: DEFAULT_AGENT_TIMEOUT,
            max_consecutive_same_tool: DEFAULT_MAX_CONSECUTIVE_SAME_TOOL,
            max_total_tool_calls: DEFAULT_MAX_TOTAL_TOOL_CALLS,
            batch_mode: BatchMode::SlotRefill,
        }
    }
}

impl ExecutorConfig {
    pub fn tool_limits(&self) -> ToolLimits {
        ToolLimits {
            max_consecutive_same_tool: self.max_consecutive_same_tool,
            max_total_tool_calls: self.max_total_tool_calls,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToolLimits {
    pub max_consecutive_same_tool: u32,
    pub max_total_tool_calls: u32,
}

impl Default for ToolLimits {
    fn default() -> Self {
        Self {
            max_consecutive_same_tool: DEFAULT_MAX_CONSECUTIVE_SAME_TOOL,
            max_total_tool_calls: DEFAULT_MAX_TOTAL_TOOL_CALLS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LimiterDeny {
    #[error("{count} consecutive calls to `{tool}` exceed the limit of {limit}")]
    Consecutive {
        tool: String,
        count: u32,
        limit: u32,
    },
    #[error("{count} total tool calls exceed the limit of {limit}")]
    Total { count: u32, limit: u32 },
}

/// Per-execution guard against tool-call loops. Once a deny is issued the
/// limiter stays denied for the rest of the execution.
#[derive(Debug, Clone)]
pub struct ToolCallLimiter {
    limits: ToolLimits,
    last_tool: Option<String>,
    consecutive_count: u32,
    total_count: u32,
    denied: Option<LimiterDeny>,
}

impl ToolCallLimiter {
    pub fn new(limits: ToolLimits) -> Self {
        Self {
            limits,
            last_tool: None,
            consecutive_count: 0,
            total_count: 0,
            denied: None,
        }
    }

    /// Records one attempted call. The counters advance, then the call is
    /// denied if either count now exceeds its limit.
    pub fn record_tool_call(&mut self, tool: &str) -> Result<(), LimiterDeny> {
        if let Some(deny) = &self.denied {
            return Err(deny.clone());
        }
        self.total_count += 1;
        if self.last_tool.as_deref() == Some(tool) {
            self.consecutive_count += 1;
        } else {
            self.consecutive_count = 1;
            self.last_tool = Some(tool.to_string());
        }
        if self.consecutive_count > self.limits.max_consecutive_same_tool {
            let deny = LimiterDeny::Consecutive {
                tool: tool.to_string(),
                count: self.consecutive_count,
                limit: self.limits.max_consecutive_same_tool,
            };
            self.denied = Some(deny.clone());
            return Err(deny);
        }
        if self.total_count > self.limits.max_total_tool_calls {
            let deny = LimiterDeny::Total {
                count: self.total_count,
                limit: self.limits.max_total_tool_calls,
            };
            self.denied = Some(deny.clone());
            return Err(deny);
        }
        Ok(())
    }

    pub fn total_count(&self) -> u32 {
        self.total_count
    }

    pub fn consecutive_count(&self) -> u32 {
        self.consecutive_count
    }

    pub fn is_denied(&self) -> bool {
        self.denied.is_some()
    }
}

/// Attribution of one source used by an agent answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceAttribution {
    pub label: String,
    pub locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<String>,
}

impl SourceAttribution {
    pub fn new(label: impl Into<String>, locator: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            locator: locator.into(),
            metadata: None,
        }
    }

    pub fn with_metadata(mut self, metadata: impl Into<String>) -> Self {
        self.metadata = Some(metadata.into());
        self
    }

    /// Two attributions are the same source when label and locator match.
    pub fn key(&self) -> (&str, &str) {
        (&self.label, &self.locator)
    }

    /// Canonical citation rendering: `[label - locator, metadata]`.
    pub fn citation(&self) -> String {
        match &self.metadata {
            Some(meta) => format!("[{} - {}, {}]", self.label, self.locator, meta),
            None => format!("[{} - {}]", self.label, self.locator),
        }
    }
}

/// One (tool, outcome) pair in an execution's tool trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolTraceEntry {
    pub tool: String,
    pub outcome: String,
}

impl ToolTraceEntry {
    pub fn new(tool: impl Into<String>, outcome: impl Into<String>) -> Self {
        Self {
            tool: tool.into(),
            outcome: outcome.into(),
        }
    }

    pub fn engine_marker(outcome: impl Into<String>) -> Self {
        Self::new(ENGINE_TRACE_TOOL, outcome)
    }
}

/// One agent's answer to one sub-question, with attempt lineage for merged
/// retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResult {
    pub sub_question_id: String,
    pub content: String,
    pub sources: Vec<SourceAttribution>,
    pub tokens_used: u64,
    pub tool_trace: Vec<ToolTraceEntry>,
    pub duration: Duration,
    pub attempt: u32,
    pub merged_from_attempts: Vec<u32>,
}

impl AgentResult {
    /// A failure-marked result: empty content plus a failure tag in the
    /// trace. Dependents still schedule; verification classifies it
    /// incomplete.
    pub fn failed(
        sub_question_id: impl Into<String>,
        attempt: u32,
        reason: impl fmt::Display,
        duration: Duration,
        tokens_used: u64,
        mut tool_trace: Vec<ToolTraceEntry>,
    ) -> Self {
        tool_trace.push(ToolTraceEntry::engine_marker(format!("error: {reason}")));
        Self {
            sub_question_id: sub_question_id.into(),
            content: String::new(),
            sources: Vec::new(),
            tokens_used,
            tool_trace,
            duration,
            attempt,
            merged_from_attempts: Vec::new(),
        }
    }

    pub fn timed_out(
        sub_question_id: impl Into<String>,
        attempt: u32,
        timeout: Duration,
        mut tool_trace: Vec<ToolTraceEntry>,
    ) -> Self {
        tool_trace.push(ToolTraceEntry::engine_marker("timeout"));
        Self {
            sub_question_id: sub_question_id.into(),
            content: String::new(),
            sources: Vec::new(),
            tokens_used: 0,
            tool_trace,
            duration: timeout,
            attempt,
            merged_from_attempts: Vec::new(),
        }
    }

    pub fn is_failure(&self) -> bool {
        self.content.is_empty()
            && self.tool_trace.iter().any(|e| {
                e.tool == ENGINE_TRACE_TOOL
                    && (e.outcome == "timeout" || e.outcome.starts_with("error"))
            })
    }

    pub fn is_timeout(&self) -> bool {
        self.is_failure()
            && self
                .tool_trace
                .iter()
                .any(|e| e.tool == ENGINE_TRACE_TOOL && e.outcome == "timeout")
    }

    pub fn is_degraded(&self) -> bool {
        self.tool_trace
            .iter()
            .any(|e| e.tool == ENGINE_TRACE_TOOL && e.outcome == "degraded")
    }

    pub fn disposition(&self) -> ExecutionDisposition {
        if self.is_timeout() {
            ExecutionDisposition::Timeout
        } else if self.is_failure() {
            ExecutionDisposition::Failed
        } else if self.is_degraded() {
            ExecutionDisposition::Degraded
        } else {
            ExecutionDisposition::Ok
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("plan failed validation: {0}")]
    InvalidPlan(crate::plan::ValidationReport),
    #[error("pending id `{0}` is not part of the plan")]
    UnknownPendingId(String),
    #[error("sub-question `{sub_question}` needs a result for dependency `{dependency}` but none exists")]
    MissingDependencyResult {
        sub_question: String,
        dependency: String,
    },
}

/// Sub-questions whose dependencies are all in `completed` and which are not
/// themselves completed. Returned in plan order.
pub fn ready_set<'p>(
    plan: &'p ExecutionPlan,
    completed: &BTreeSet<String>,
) -> Vec<&'p SubQuestion> {
    plan.sub_questions
        .iter()
        .filter(|sq| !completed.contains(&sq.id))
        .filter(|sq| sq.dependencies.iter().all(|d| completed.contains(d)))
        .collect()
}

/// The k highest-priority ready sub-questions, descending priority with ties
/// broken by ascending id.
pub fn select_batch<'p>(ready: &[&'p SubQuestion], k: usize) -> Vec<&'p SubQuestion> {
    let mut sorted: Vec<&SubQuestion> = ready.to_vec();
    sorted.sort_by(|a, b| (Reverse(a.priority), &a.id).cmp(&(Reverse(b.priority), &b.id)));
    sorted.truncate(k);
    sorted
}

/// Builds the prompt for a sub-question with `context_from_deps` enabled:
/// one delimited block per dependency (id-ascending), then the original
/// question verbatim.
pub fn enrich_with_context(
    sub_question: &SubQuestion,
    dep_results: &BTreeMap<String, &AgentResult>,
) -> Result<String, ExecutorError> {
    let mut prompt = String::new();
    for dep in &sub_question.dependencies {
        let result =
            dep_results
                .get(dep)
                .ok_or_else(|| ExecutorError::MissingDependencyResult {
                    sub_question: sub_question.id.clone(),
                    dependency: dep.clone(),
                })?;
        prompt.push_str(&format!("--- context from {dep} ---\n"));
        prompt.push_str(&result.content);
        prompt.push_str(&format!("\n--- end context from {dep} ---\n\n"));
    }
    prompt.push_str(&sub_question.question);
    Ok(prompt)
}

/// Runs agent executions for the coordinator. `dispatch` may not block;
/// `next_completion` blocks (or advances virtual time) until an in-flight
/// execution finishes.
pub trait ExecutionDriver {
    fn dispatch(
        &mut self,
        request: AgentRequest,
        registry: &BackendRegistry,
        config: &ExecutorConfig,
    );
    fn next_completion(&mut self) -> Option<AgentResult>;
    fn in_flight(&self) -> usize;
}

fn assemble_result(
    request: &AgentRequest,
    routed: RoutedResponse,
    duration: Duration,
    timed_out: bool,
) -> AgentResult {
    if timed_out {
        return AgentResult::timed_out(
            &request.sub_question_id,
            request.attempt,
            duration,
            routed.tool_trace,
        );
    }
    if let Some(reason) = routed.failure {
        return AgentResult {
            sub_question_id: request.sub_question_id.clone(),
            content: String::new(),
            sources: Vec::new(),
            tokens_used: routed.tokens_used,
            tool_trace: routed.tool_trace,
            duration,
            attempt: request.attempt,
            merged_from_attempts: Vec::new(),
        }
        .tap_failure(reason);
    }
    AgentResult {
        sub_question_id: request.sub_question_id.clone(),
        content: routed.content,
        sources: routed.sources,
        tokens_used: routed.tokens_used,
        tool_trace: routed.tool_trace,
        duration,
        attempt: request.attempt,
        merged_from_attempts: Vec::new(),
    }
}

impl AgentResult {
    // Routed failures already carry their error marker in the trace; this
    // only guarantees is_failure() recognizes them.
    fn tap_failure(mut self, reason: String) -> Self {
        let marked = self.tool_trace.iter().any(|e| {
            e.tool == ENGINE_TRACE_TOOL
                && (e.outcome.starts_with("error") || e.outcome == "timeout")
        });
        if !marked {
            self.tool_trace
                .push(ToolTraceEntry::engine_marker(format!("error: {reason}")));
        }
        self
    }
}

struct SimCompletion {
    finish_ms: u64,
    dispatch_seq: u64,
    result: AgentResult,
}

impl PartialEq for SimCompletion {
    fn eq(&self, other: &Self) -> bool {
        self.finish_ms == other.finish_ms && self.dispatch_seq == other.dispatch_seq
    }
}
impl Eq for SimCompletion {}
impl PartialOrd for SimCompletion {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for SimCompletion {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.finish_ms, self.dispatch_seq).cmp(&(other.finish_ms, other.dispatch_seq))
    }
}

/// Virtual-time driver: backend calls run inline at dispatch, completions
/// are ordered by scripted latency on a shared [`SimClock`]. Fully
/// deterministic for scripted backends.
pub struct SimDriver {
    clock: Arc<SimClock>,
    queue: BinaryHeap<Reverse<SimCompletion>>,
    dispatch_seq: u64,
}

impl SimDriver {
    pub fn new(clock: Arc<SimClock>) -> Self {
        Self {
            clock,
            queue: BinaryHeap::new(),
            dispatch_seq: 0,
        }
    }
}

impl ExecutionDriver for SimDriver {
    fn dispatch(
        &mut self,
        request: AgentRequest,
        registry: &BackendRegistry,
        config: &ExecutorConfig,
    ) {
        let start_ms = self.clock.now_ms();
        let routed = route_with_fallback(&request, registry, config.tool_limits());
        let latency = routed.latency;
        let timed_out = latency > config.agent_timeout;
        let effective = if timed_out {
            config.agent_timeout
        } else {
            latency
        };
        let result = assemble_result(&request, routed, effective, timed_out);
        self.queue.push(Reverse(SimCompletion {
            finish_ms: start_ms + effective.as_millis() as u64,
            dispatch_seq: self.dispatch_seq,
            result,
        }));
        self.dispatch_seq += 1;
    }

    fn next_completion(&mut self) -> Option<AgentResult> {
        let Reverse(completion) = self.queue.pop()?;
        self.clock.advance_to(completion.finish_ms);
        Some(completion.result)
    }

    fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

/// Wall-clock driver: each execution runs on its own thread; the timeout is
/// enforced around the whole backend call. Timed-out backend threads are
/// abandoned (no preemption) and their late results discarded.
pub struct ThreadDriver {
    tx: mpsc::Sender<AgentResult>,
    rx: mpsc::Receiver<AgentResult>,
    in_flight: usize,
}

impl ThreadDriver {
    pub fn new() -> Self {
        let (tx, rx) = mpsc::channel();
        Self {
            tx,
            rx,
            in_flight: 0,
        }
    }
}

impl Default for ThreadDriver {
    fn default() -> Self {
        Self::new()
    }
}

impl ExecutionDriver for ThreadDriver {
    fn dispatch(
        &mut self,
        request: AgentRequest,
        registry: &BackendRegistry,
        config: &ExecutorConfig,
    ) {
        let tx = self.tx.clone();
        let registry = registry.clone();
        let timeout = config.agent_timeout;
        let limits = config.tool_limits();
        self.in_flight += 1;
        thread::spawn(move || {
            let started = Instant::now();
            let (inner_tx, inner_rx) = mpsc::channel();
            let inner_request = request.clone();
            thread::spawn(move || {
                let routed = route_with_fallback(&inner_request, &registry, limits);
                let _ = inner_tx.send(routed);
            });
            let result = match inner_rx.recv_timeout(timeout) {
                Ok(routed) => assemble_result(&request, routed, started.elapsed(), false),
                Err(_) => AgentResult::timed_out(
                    &request.sub_question_id,
                    request.attempt,
                    timeout,
                    Vec::new(),
                ),
            };
            let _ = tx.send(result);
        });
    }

    fn next_completion(&mut self) -> Option<AgentResult> {
        if self.in_flight == 0 {
            return None;
        }
        let result = self.rx.recv().ok();
        if result.is_some() {
            self.in_flight -= 1;
        }
        result
    }

    fn in_flight(&self) -> usize {
        self.in_flight
    }
}

/// What [`execute_plan`] needs beyond the registry and config.
pub struct ExecutionContext<'a> {
    pub plan: &'a ExecutionPlan,
    /// Ids to execute this pass. Everything else in the plan must already
    /// have a result in `prior_results`.
    pub pending: &'a BTreeSet<String>,
    pub prior_results: &'a BTreeMap<String, AgentResult>,
    /// Attempt number per pending id; missing ids default to attempt 1.
    pub attempts: &'a BTreeMap<String, u32>,
}

/// Executes every pending sub-question, respecting dependencies and the
/// concurrency bound, and emits start/finish events in coordinator
/// serialization order. Failures and timeouts become failure-marked results
/// rather than aborting the pass.
pub fn execute_plan(
    ctx: ExecutionContext<'_>,
    registry: &BackendRegistry,
    config: &ExecutorConfig,
    driver: &mut dyn ExecutionDriver,
    bus: &mut EventBus<'_>,
) -> Result<BTreeMap<String, AgentResult>, ExecutorError> {
    let report = validate_plan(ctx.plan);
    if !report.is_ok() {
        return Err(ExecutorError::InvalidPlan(report));
    }
    let plan_ids = ctx.plan.ids();
    for id in ctx.pending {
        if !plan_ids.contains(id) {
            return Err(ExecutorError::UnknownPendingId(id.clone()));
        }
    }

    // Non-pending sub-questions count as completed for scheduling; their
    // results must exist for context enrichment.
    let mut completed: BTreeSet<String> = plan_ids.difference(ctx.pending).cloned().collect();
    for id in &completed {
        if !ctx.prior_results.contains_key(id) {
            return Err(ExecutorError::MissingDependencyResult {
                sub_question: id.clone(),
                dependency: id.clone(),
            });
        }
    }

    let mut started: BTreeSet<String> = BTreeSet::new();
    let mut produced: BTreeMap<String, AgentResult> = BTreeMap::new();

    loop {
        admit(
            &ctx,
            registry,
            config,
            driver,
            bus,
            &completed,
            &mut started,
            &produced,
        )?;

        if driver.in_flight() == 0 {
            break;
        }
        let result = driver
            .next_completion()
            .expect("driver reported in-flight executions but produced no completion");
        bus.emit(RunEventKind::SubQuestionFinished {
            id: result.sub_question_id.clone(),
            attempt: result.attempt,
            disposition: result.disposition(),
            duration_ms: result.duration.as_millis() as u64,
            tokens: result.tokens_used,
        });
        completed.insert(result.sub_question_id.clone());
        produced.insert(result.sub_question_id.clone(), result);
    }

    debug_assert_eq!(produced.len(), ctx.pending.len());
    Ok(produced)
}

#[allow(clippy::too_many_arguments)]
fn admit(
    ctx: &ExecutionContext<'_>,
    registry: &BackendRegistry,
    config: &ExecutorConfig,
    driver: &mut dyn ExecutionDriver,
    bus: &mut EventBus<'_>,
    completed: &BTreeSet<String>,
    started: &mut BTreeSet<String>,
    produced: &BTreeMap<String, AgentResult>,
) -> Result<(), ExecutorError> {
    match config.batch_mode {
        BatchMode::SlotRefill => {
            while driver.in_flight() < config.max_concurrent {
                let ready = unstarted_ready(ctx, completed, started);
                let Some(next) = select_batch(&ready, 1).first().copied() else {
                    break;
                };
                start_execution(next, ctx, registry, config, driver, bus, started, produced)?;
            }
        }
        BatchMode::StrictBarrier => {
            if driver.in_flight() == 0 {
                let ready = unstarted_ready(ctx, completed, started);
                for sq in select_batch(&ready, config.max_concurrent) {
                    start_execution(sq, ctx, registry, config, driver, bus, started, produced)?;
                }
            }
        }
    }
    Ok(())
}

fn unstarted_ready<'p>(
    ctx: &ExecutionContext<'p>,
    completed: &BTreeSet<String>,
    started: &BTreeSet<String>,
) -> Vec<&'p SubQuestion> {
    ready_set(ctx.plan, completed)
        .into_iter()
        .filter(|sq| ctx.pending.contains(&sq.id) && !started.contains(&sq.id))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn start_execution(
    sq: &SubQuestion,
    ctx: &ExecutionContext<'_>,
    registry: &BackendRegistry,
    config: &ExecutorConfig,
    driver: &mut dyn ExecutionDriver,
    bus: &mut EventBus<'_>,
    started: &mut BTreeSet<String>,
    produced: &BTreeMap<String, AgentResult>,
) -> Result<(), ExecutorError> {
    let prompt = if sq.context_from_deps && !sq.dependencies.is_empty() {
        let mut dep_results: BTreeMap<String, &AgentResult> = BTreeMap::new();
        for dep in &sq.dependencies {
            let result = produced
                .get(dep)
                .or_else(|| ctx.prior_results.get(dep))
                .ok_or_else(|| ExecutorError::MissingDependencyResult {
                    sub_question: sq.id.clone(),
                    dependency: dep.clone(),
                })?;
            dep_results.insert(dep.clone(), result);
        }
        enrich_with_context(sq, &dep_results)?
    } else {
        sq.question.clone()
    };

    let attempt = ctx.attempts.get(&sq.id).copied().unwrap_or(1);
    bus.emit(RunEventKind::SubQuestionStarted {
        id: sq.id.clone(),
        attempt,
        agent_type: sq.agent_type,
    });
    driver.dispatch(
        AgentRequest {
            sub_question_id: sq.id.clone(),
            agent_type: sq.agent_type,
            question: sq.question.clone(),
            prompt,
            attempt,
            verification_criteria: sq.verification_criteria.clone(),
        },
        registry,
        config,
    );
    started.insert(sq.id.clone());
    Ok(())
}
