//! Shared fixtures for integration tests: random DAG generation, instant
//! scripted agents, an executor harness, and event-log oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use conductor::backends::scripted::Scenario;
use conductor::backends::tools::ToolGateway;
use conductor::backends::{
    AgentBackend, AgentRequest, AgentResponse, BackendError, BackendRegistry, PlannerBackend,
    PlannerOutput, ReplanRequest, ReplannerBackend, ReplannerOutput, SynthesisRequest,
    SynthesizerBackend, SynthesizerOutput, VerificationRequest, VerifierBackend, VerifierJudgment,
};
use conductor::events::{EventBus, NullSink, RunEvent, RunEventKind, SimClock};
use conductor::executor::{execute_plan, AgentResult, ExecutionContext, ExecutorConfig, SimDriver};
use conductor::plan::{AgentType, ExecutionPlan, SubQuestion};
use conductor::verification::{Recommendation, VerificationStatus};

pub fn fnv1a(parts: &[&str]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for byte in part.bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash ^= 0xff;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// How instant agents report simulated latency.
#[derive(Clone, Copy)]
pub enum LatencyMode {
    Zero,
    Fixed(u64),
    /// Deterministic pseudo-random latency in 0..max_ms derived from
    /// (sub-question id, attempt).
    Hashed {
        max_ms: u64,
    },
}

/// Deterministic scripted agent for property tests.
pub struct InstantAgent {
    pub latency: LatencyMode,
    pub tokens: u64,
}

impl InstantAgent {
    pub fn zero() -> Self {
        Self {
            latency: LatencyMode::Zero,
            tokens: 10,
        }
    }
}

impl AgentBackend for InstantAgent {
    fn execute(
        &self,
        request: &AgentRequest,
        _tools: &mut ToolGateway,
    ) -> Result<AgentResponse, BackendError> {
        let latency_ms = match self.latency {
            LatencyMode::Zero => 0,
            LatencyMode::Fixed(ms) => ms,
            LatencyMode::Hashed { max_ms } => {
                fnv1a(&[&request.sub_question_id, &request.attempt.to_string()]) % max_ms.max(1)
            }
        };
        Ok(AgentResponse {
            content: format!(
                "answer for {} attempt {}",
                request.sub_question_id, request.attempt
            ),
            sources: vec![conductor::SourceAttribution::new(
                format!("src-{}", request.sub_question_id),
                format!("loc/{}", request.attempt),
            )],
            tokens_used: self.tokens,
            latency: Duration::from_millis(latency_ms),
        })
    }
}

pub struct StubPlanner(pub ExecutionPlan);
impl PlannerBackend for StubPlanner {
    fn plan(&self, _query: &str) -> Result<PlannerOutput, BackendError> {
        Ok(PlannerOutput {
            plan: self.0.clone(),
            tokens_used: 100,
        })
    }
}

/// Marks everything complete with fixed confidence.
pub struct AlwaysCompleteVerifier;
impl VerifierBackend for AlwaysCompleteVerifier {
    fn verify(&self, _request: &VerificationRequest<'_>) -> Result<VerifierJudgment, BackendError> {
        Ok(VerifierJudgment {
            status: VerificationStatus::Complete,
            completeness_score: 1.0,
            missing_aspects: vec![],
            contradictions: vec![],
            confidence: 0.9,
            recommendation: Recommendation::Accept,
            tokens_used: 5,
        })
    }
}

pub struct EmptyReplanner;
impl ReplannerBackend for EmptyReplanner {
    fn replan(&self, _request: &ReplanRequest<'_>) -> Result<ReplannerOutput, BackendError> {
        Ok(ReplannerOutput {
            tokens_used: 5,
            ..Default::default()
        })
    }
}

pub struct StubSynthesizer;
impl SynthesizerBackend for StubSynthesizer {
    fn synthesize(
        &self,
        request: &SynthesisRequest<'_>,
    ) -> Result<SynthesizerOutput, BackendError> {
        let sources = request
            .items
            .iter()
            .flat_map(|i| i.result.sources.iter().cloned())
            .collect();
        Ok(SynthesizerOutput {
            answer: format!("synthesized {} results", request.items.len()),
            sources,
            tokens_used: 5,
            ..Default::default()
        })
    }
}

/// Registry with instant agents behind every agent type.
pub fn instant_registry(plan: &ExecutionPlan, latency: LatencyMode) -> BackendRegistry {
    let agent = Arc::new(InstantAgent {
        latency,
        tokens: 10,
    });
    let mut registry = BackendRegistry::new(
        Arc::new(StubPlanner(plan.clone())),
        Arc::new(AlwaysCompleteVerifier),
        Arc::new(EmptyReplanner),
        Arc::new(StubSynthesizer),
    );
    for agent_type in AgentType::ALL {
        registry = registry.with_agent(agent_type, agent.clone());
    }
    registry
}

/// Random DAG over n <= max_n nodes. Edges always point from later ids to
/// earlier ids, so the plan is acyclic by construction.
pub fn random_plan(rng: &mut StdRng, max_n: usize, max_density: f64) -> ExecutionPlan {
    let n = rng.random_range(1..=max_n);
    let density = rng.random_range(0.0..=max_density);
    let ids: Vec<String> = (0..n).map(|i| format!("q{i:03}")).collect();
    let mut sub_questions = Vec::with_capacity(n);
    for j in 0..n {
        let mut sq = SubQuestion::new(&ids[j], format!("synthetic question {j}"), AgentType::Rag)
            .with_priority(rng.random_range(1..=10));
        for prior in ids.iter().take(j) {
            if rng.random_bool(density) {
                sq = sq.with_dependency(prior.clone());
            }
        }
        if rng.random_bool(0.5) && !sq.dependencies.is_empty() {
            sq = sq.with_context_from_deps(true);
        }
        sub_questions.push(sq);
    }
    ExecutionPlan::new(sub_questions, "random DAG")
}

/// Runs the executor standalone over a whole plan and returns (results,
/// events).
pub fn run_executor(
    plan: &ExecutionPlan,
    registry: &BackendRegistry,
    config: &ExecutorConfig,
) -> (BTreeMap<String, AgentResult>, Vec<RunEvent>) {
    let sink = NullSink;
    let clock = Arc::new(SimClock::new());
    let mut bus = EventBus::new(&sink, clock.clone());
    let mut driver = SimDriver::new(clock);
    let pending = plan.ids();
    let attempts = pending.iter().map(|id| (id.clone(), 1)).collect();
    let results = execute_plan(
        ExecutionContext {
            plan,
            pending: &pending,
            prior_results: &BTreeMap::new(),
            attempts: &attempts,
        },
        registry,
        config,
        &mut driver,
        &mut bus,
    )
    .expect("executor run");
    (results, bus.into_log())
}

/// Oracle: every start event must be preceded by finish events for all of
/// its dependencies (edge-by-edge check of the log).
pub fn assert_topological(plan: &ExecutionPlan, events: &[RunEvent]) {
    let mut finished: BTreeSet<&str> = BTreeSet::new();
    for event in events {
        match &event.kind {
            RunEventKind::SubQuestionStarted { id, .. } => {
                let sq = plan.get(id).expect("started id exists in plan");
                for dep in &sq.dependencies {
                    assert!(
                        finished.contains(dep.as_str()),
                        "{id} started before dependency {dep} finished"
                    );
                }
            }
            RunEventKind::SubQuestionFinished { id, .. } => {
                let id: &str = id;
                finished.insert(id);
            }
            _ => {}
        }
    }
    assert_eq!(
        finished.len(),
        plan.len(),
        "every sub-question finished exactly once"
    );
}

/// Oracle: maximum number of simultaneously in-flight executions observed in
/// the log.
pub fn max_in_flight(events: &[RunEvent]) -> usize {
    let mut current = 0usize;
    let mut max = 0usize;
    for event in events {
        match &event.kind {
            RunEventKind::SubQuestionStarted { .. } => {
                current += 1;
                max = max.max(current);
            }
            RunEventKind::SubQuestionFinished { .. } => current -= 1,
            _ => {}
        }
    }
    max
}

/// Extracts execution waves from a strict-barrier log: each maximal block of
/// starts (uninterrupted by finishes) is one wave.
pub fn waves_from_events(events: &[RunEvent]) -> Vec<BTreeSet<String>> {
    let mut waves: Vec<BTreeSet<String>> = Vec::new();
    let mut saw_finish_since_last_start = true;
    for event in events {
        match &event.kind {
            RunEventKind::SubQuestionStarted { id, .. } => {
                if saw_finish_since_last_start {
                    waves.push(BTreeSet::new());
                    saw_finish_since_last_start = false;
                }
                waves.last_mut().unwrap().insert(id.clone());
            }
            RunEventKind::SubQuestionFinished { .. } => {
                saw_finish_since_last_start = true;
            }
            _ => {}
        }
    }
    waves
}

/// Independent wave oracle: repeated removal of in-degree-zero nodes.
pub fn peel_waves(plan: &ExecutionPlan) -> Vec<BTreeSet<String>> {
    let mut remaining: BTreeMap<&str, BTreeSet<&str>> = plan
        .sub_questions
        .iter()
        .map(|sq| {
            (
                sq.id.as_str(),
                sq.dependencies
                    .iter()
                    .map(String::as_str)
                    .collect::<BTreeSet<&str>>(),
            )
        })
        .collect();
    let mut waves = Vec::new();
    while !remaining.is_empty() {
        let ready: Vec<&str> = remaining
            .iter()
            .filter(|(_, deps)| deps.is_empty())
            .map(|(id, _)| *id)
            .collect();
        assert!(!ready.is_empty(), "cyclic plan handed to the wave oracle");
        for id in &ready {
            remaining.remove(id);
        }
        for deps in remaining.values_mut() {
            for id in &ready {
                deps.remove(id);
            }
        }
        waves.push(ready.into_iter().map(str::to_string).collect());
    }
    waves
}

pub fn seeded(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn demo_scenario_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/demo.json")
}

pub fn demo_scenario() -> Scenario {
    Scenario::load(&demo_scenario_path()).expect("demo scenario loads")
}

/// Phase starts extracted from a log.
pub fn phase_starts(events: &[RunEvent]) -> Vec<conductor::Phase> {
    events
        .iter()
        .filter_map(|e| match &e.kind {
            RunEventKind::PhaseStarted { phase, .. } => Some(*phase),
            _ => None,
        })
        .collect()
}
