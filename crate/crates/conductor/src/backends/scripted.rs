//! Scripted deterministic backends driven by a scenario document, enabling
//! offline simulation of whole orchestration runs.
//!
//! Scenario documents are JSON with `seed`, `plan`, `agents` (list of
//! `{agent_type, match, attempts: [{content, sources, tokens, latency_ms,
//! fail}]}`), `verifier` (list of `{match, status, score, confidence,
//! recommendation, missing_aspects}`), and optional `replanner` overrides.
//! Agent script matching is deterministic: exact sub-question id first, then
//! substring on the question text, then the `"*"` default entry.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::tools::ToolGateway;
use crate::backends::{
    AgentBackend, AgentRequest, AgentResponse, BackendError, BackendRegistry, GroupSummary,
    KeyFinding, PlannerBackend, PlannerOutput, ReplanRequest, ReplannerBackend, ReplannerOutput,
    SynthesisRequest, SynthesisStage, SynthesizerBackend, SynthesizerOutput, VerificationRequest,
    VerifierBackend, VerifierJudgment,
};
use crate::executor::SourceAttribution;
use crate::plan::{validate_plan, AgentType, ExecutionPlan, SubQuestion};
use crate::verification::{Recommendation, VerificationStatus};

/// Simulated token cost of a planning call: base plus per-sub-question cost.
pub const SIM_PLAN_BASE_TOKENS: u64 = 100;
pub const SIM_PLAN_TOKENS_PER_SUB_QUESTION: u64 = 80;
/// Simulated token cost of a replanning call.
pub const SIM_REPLAN_TOKENS: u64 = 200;
/// Default simulated cost of one verification when the rule omits `tokens`.
pub const SIM_VERIFY_DEFAULT_TOKENS: u64 = 150;
/// Synthesis calls charge a base plus input-size-derived cost.
pub const SIM_SYNTH_BASE_TOKENS: u64 = 40;

/// One scripted attempt response for an agent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedAttempt {
    pub content: String,
    #[serde(default)]
    pub sources: Vec<SourceAttribution>,
    #[serde(default)]
    pub tokens: u64,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub fail: bool,
}

/// Scripted responses for one (agent type, question pattern) pair. Attempt
/// numbers beyond the list length repeat the last entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentScript {
    pub agent_type: AgentType,
    #[serde(rename = "match")]
    pub pattern: String,
    pub attempts: Vec<ScriptedAttempt>,
}

/// Maps a result-content pattern to a verification judgment. First matching
/// rule in list order wins; `"*"` matches anything.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifierRule {
    #[serde(rename = "match")]
    pub pattern: String,
    pub status: VerificationStatus,
    pub score: f64,
    #[serde(default)]
    pub confidence: f64,
    pub recommendation: Recommendation,
    #[serde(default)]
    pub missing_aspects: Vec<String>,
    #[serde(default)]
    pub contradictions: Vec<String>,
    #[serde(default = "default_verify_tokens")]
    pub tokens: u64,
}

fn default_verify_tokens() -> u64 {
    SIM_VERIFY_DEFAULT_TOKENS
}

/// Optional per-iteration replanner override.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplannerScript {
    pub iteration: u32,
    #[serde(default)]
    pub retry_sub_questions: Vec<String>,
    #[serde(default)]
    pub new_sub_questions: Vec<SubQuestion>,
    #[serde(default)]
    pub explanation: String,
    #[serde(default)]
    pub done: bool,
}

/// A full simulation scenario: fixed plan, agent scripts, verifier rules,
/// and optional replanner overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub plan: ExecutionPlan,
    pub agents: Vec<AgentScript>,
    pub verifier: Vec<VerifierRule>,
    #[serde(default)]
    pub replanner: Vec<ReplannerScript>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("scenario plan is invalid: {0}")]
    InvalidPlan(crate::plan::ValidationReport),
    #[error("agent script for `{agent_type}` pattern `{pattern}` has no attempts")]
    EmptyAttempts {
        agent_type: AgentType,
        pattern: String,
    },
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Self = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let report = validate_plan(&self.plan);
        if !report.is_ok() {
            return Err(ScenarioError::InvalidPlan(report));
        }
        for script in &self.agents {
            if script.attempts.is_empty() {
                return Err(ScenarioError::EmptyAttempts {
                    agent_type: script.agent_type,
                    pattern: script.pattern.clone(),
                });
            }
        }
        Ok(())
    }

    /// Builds a fully scripted registry for this scenario. Agent backends
    /// are registered for every agent type that has at least one script.
    pub fn registry(&self) -> BackendRegistry {
        let hub = Arc::new(ScriptedAgentHub {
            scripts: self.agents.clone(),
        });
        let mut registry = BackendRegistry::new(
            Arc::new(ScriptedPlanner {
                plan: self.plan.clone(),
            }),
            Arc::new(ScriptedVerifier {
                rules: self.verifier.clone(),
            }),
            Arc::new(ScriptedReplanner {
                scripts: self.replanner.clone(),
            }),
            Arc::new(SimSynthesizer),
        );
        let mut types: Vec<AgentType> = self.agents.iter().map(|s| s.agent_type).collect();
        types.sort();
        types.dedup();
        for agent_type in types {
            registry = registry.with_agent(agent_type, hub.clone());
        }
        registry
    }
}

/// Returns the scenario's fixed plan.
pub struct ScriptedPlanner {
    pub plan: ExecutionPlan,
}

impl PlannerBackend for ScriptedPlanner {
    fn plan(&self, _query: &str) -> Result<PlannerOutput, BackendError> {
        Ok(PlannerOutput {
            plan: self.plan.clone(),
            tokens_used: SIM_PLAN_BASE_TOKENS
                + SIM_PLAN_TOKENS_PER_SUB_QUESTION * self.plan.len() as u64,
        })
    }
}

/// Serves scripted attempt responses for all agent types in the scenario.
pub struct ScriptedAgentHub {
    scripts: Vec<AgentScript>,
}

impl ScriptedAgentHub {
    fn find(&self, request: &AgentRequest) -> Option<&AgentScript> {
        let candidates: Vec<&AgentScript> = self
            .scripts
            .iter()
            .filter(|s| s.agent_type == request.agent_type)
            .collect();
        candidates
            .iter()
            .find(|s| s.pattern == request.sub_question_id)
            .or_else(|| {
                candidates
                    .iter()
                    .find(|s| s.pattern != "*" && request.question.contains(&s.pattern))
            })
            .or_else(|| candidates.iter().find(|s| s.pattern == "*"))
            .copied()
    }
}

impl AgentBackend for ScriptedAgentHub {
    fn execute(
        &self,
        request: &AgentRequest,
        _tools: &mut ToolGateway,
    ) -> Result<AgentResponse, BackendError> {
        let script = self.find(request).ok_or_else(|| {
            BackendError::new(format!(
                "no script matches agent `{}` sub-question `{}`",
                request.agent_type, request.sub_question_id
            ))
        })?;
        let index = (request.attempt as usize)
            .saturating_sub(1)
            .min(script.attempts.len() - 1);
        let attempt = &script.attempts[index];
        let latency = Duration::from_millis(attempt.latency_ms);
        if attempt.fail {
            return Err(BackendError::new(format!(
                "scripted failure for `{}` attempt {}",
                request.sub_question_id, request.attempt
            ))
            .with_cost(attempt.tokens, latency));
        }
        Ok(AgentResponse {
            content: attempt.content.clone(),
            sources: attempt.sources.clone(),
            tokens_used: attempt.tokens,
            latency,
        })
    }
}

/// Judges results by content-pattern rules.
pub struct ScriptedVerifier {
    rules: Vec<VerifierRule>,
}

impl VerifierBackend for ScriptedVerifier {
    fn verify(&self, request: &VerificationRequest<'_>) -> Result<VerifierJudgment, BackendError> {
        let rule = self
            .rules
            .iter()
            .find(|r| r.pattern == "*" || request.result_content.contains(&r.pattern))
            .ok_or_else(|| {
                BackendError::new(format!(
                    "no verifier rule matches result for `{}`",
                    request.sub_question.id
                ))
            })?;
        Ok(VerifierJudgment {
            status: rule.status,
            completeness_score: rule.score,
            missing_aspects: rule.missing_aspects.clone(),
            contradictions: rule.contradictions.clone(),
            confidence: rule.confidence,
            recommendation: rule.recommendation,
            tokens_used: rule.tokens,
        })
    }
}

/// Replays scripted per-iteration decisions; iterations without a script get
/// an empty decision (the engine's mandatory-retry logic fills it in).
pub struct ScriptedReplanner {
    scripts: Vec<ReplannerScript>,
}

impl ReplannerBackend for ScriptedReplanner {
    fn replan(&self, request: &ReplanRequest<'_>) -> Result<ReplannerOutput, BackendError> {
        let script = self
            .scripts
            .iter()
            .find(|s| s.iteration == request.iteration);
        Ok(match script {
            Some(s) => ReplannerOutput {
                retry_sub_questions: s.retry_sub_questions.clone(),
                new_sub_questions: s.new_sub_questions.clone(),
                explanation: s.explanation.clone(),
                done: s.done,
                tokens_used: SIM_REPLAN_TOKENS,
            },
            None => ReplannerOutput {
                tokens_used: SIM_REPLAN_TOKENS,
                ..Default::default()
            },
        })
    }
}

fn excerpt(text: &str, limit: usize) -> String {
    let mut out: String = text.chars().take(limit).collect();
    if text.chars().count() > limit {
        out.push('…');
    }
    out
}

fn synth_tokens(input_chars: usize) -> u64 {
    SIM_SYNTH_BASE_TOKENS + (input_chars as u64) / 10
}

/// Deterministic built-in synthesizer for simulation: mechanically composes
/// the sectioned answer, findings with citations, and group summaries from
/// its inputs.
pub struct SimSynthesizer;

impl SimSynthesizer {
    /// Headline line for a result: the first real content line, or the last
    /// attempt's first line for merged retries. Attempt headers are skipped.
    fn headline(result: &crate::executor::AgentResult) -> &str {
        let mut lines = result
            .content
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with("=== attempt "));
        if result.merged_from_attempts.is_empty() {
            lines.next().unwrap_or("")
        } else {
            lines.next_back().unwrap_or("")
        }
    }

    fn findings_from_items(items: &[crate::backends::SynthesisItem<'_>]) -> Vec<KeyFinding> {
        items
            .iter()
            .filter(|item| !item.result.sources.is_empty() && !item.result.content.is_empty())
            .map(|item| KeyFinding {
                finding: format!(
                    "{}: {}",
                    item.result.sub_question_id,
                    excerpt(Self::headline(item.result), 140)
                ),
                citations: item.result.sources.clone(),
            })
            .collect()
    }

    fn sectioned_answer(
        query: &str,
        findings: &[KeyFinding],
        analysis: &str,
        confidence: Option<f64>,
    ) -> String {
        let mut answer = String::new();
        answer.push_str("EXECUTIVE SUMMARY\n");
        answer.push_str(&format!(
            "Synthesis of {} supported findings addressing: {}\n\n",
            findings.len(),
            query
        ));
        answer.push_str("KEY FINDINGS\n");
        for finding in findings {
            let citations: Vec<String> = finding.citations.iter().map(|c| c.citation()).collect();
            answer.push_str(&format!("- {} {}\n", finding.finding, citations.join(" ")));
        }
        answer.push_str("\nANALYSIS\n");
        answer.push_str(analysis);
        answer.push_str("\n\nCONCLUSIONS\n");
        match confidence {
            Some(c) => answer.push_str(&format!("Aggregate confidence {c:.2}; see gaps for residual limitations.\n")),
            None => answer.push_str("Confidence follows the final verification records; see gaps for residual limitations.\n"),
        }
        answer
    }
}

impl SynthesizerBackend for SimSynthesizer {
    fn synthesize(
        &self,
        request: &SynthesisRequest<'_>,
    ) -> Result<SynthesizerOutput, BackendError> {
        match &request.stage {
            SynthesisStage::Group(agent_type) => {
                let mut summary = format!("{agent_type} findings:\n");
                let mut sources: Vec<SourceAttribution> = Vec::new();
                let mut input_chars = 0usize;
                for item in &request.items {
                    input_chars += item.result.content.chars().count();
                    summary.push_str(&format!(
                        "- ({}) {}\n",
                        item.result.sub_question_id,
                        excerpt(&item.result.content, 160)
                    ));
                    for source in &item.result.sources {
                        if !sources.iter().any(|s| s.key() == source.key()) {
                            sources.push(source.clone());
                        }
                    }
                }
                Ok(SynthesizerOutput {
                    answer: summary,
                    sources,
                    tokens_used: synth_tokens(input_chars),
                    ..Default::default()
                })
            }
            SynthesisStage::SinglePass => {
                let findings = Self::findings_from_items(&request.items);
                let confidences: Vec<f64> = request
                    .items
                    .iter()
                    .filter_map(|item| item.record.map(|r| r.confidence))
                    .collect();
                let confidence = if confidences.is_empty() {
                    None
                } else {
                    Some(confidences.iter().sum::<f64>() / confidences.len() as f64)
                };
                let analysis = request
                    .items
                    .iter()
                    .map(|item| excerpt(&item.result.content, 120))
                    .collect::<Vec<_>>()
                    .join(" ");
                let input_chars: usize = request
                    .items
                    .iter()
                    .map(|item| item.result.content.chars().count())
                    .sum();
                let sources: Vec<SourceAttribution> = request
                    .items
                    .iter()
                    .flat_map(|item| item.result.sources.iter().cloned())
                    .collect();
                Ok(SynthesizerOutput {
                    answer: Self::sectioned_answer(request.query, &findings, &analysis, confidence),
                    key_findings: findings,
                    confidence,
                    sources,
                    gaps: Vec::new(),
                    tokens_used: synth_tokens(input_chars),
                })
            }
            SynthesisStage::Integrate(summaries) => {
                let findings: Vec<KeyFinding> = summaries
                    .iter()
                    .filter(|s| !s.sources.is_empty())
                    .map(|s| KeyFinding {
                        finding: format!("{}: {}", s.agent_type, excerpt(&s.summary, 140)),
                        citations: s.sources.iter().take(3).cloned().collect(),
                    })
                    .collect();
                let analysis = summaries
                    .iter()
                    .map(|s| s.summary.trim().replace('\n', " "))
                    .collect::<Vec<_>>()
                    .join(" | ");
                let input_chars: usize = summaries.iter().map(|s| s.summary.chars().count()).sum();
                let sources: Vec<SourceAttribution> = summaries
                    .iter()
                    .flat_map(|s| s.sources.iter().cloned())
                    .collect();
                Ok(SynthesizerOutput {
                    answer: Self::sectioned_answer(request.query, &findings, &analysis, None),
                    key_findings: findings,
                    confidence: None,
                    sources,
                    gaps: Vec::new(),
                    tokens_used: synth_tokens(input_chars),
                })
            }
        }
    }
}

/// Builds an arbitrary group summary list for tests of the integrate stage.
pub fn group_summary(
    agent_type: AgentType,
    summary: impl Into<String>,
    sources: Vec<SourceAttribution>,
) -> GroupSummary {
    GroupSummary {
        agent_type,
        summary: summary.into(),
        sources,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::tools::NullToolService;
    use crate::executor::ToolLimits;

    fn request(id: &str, question: &str, agent_type: AgentType, attempt: u32) -> AgentRequest {
        AgentRequest {
            sub_question_id: id.into(),
            agent_type,
            question: question.into(),
            prompt: question.into(),
            attempt,
            verification_criteria: String::new(),
        }
    }

    fn gateway() -> ToolGateway {
        ToolGateway::new(Arc::new(NullToolService), ToolLimits::default())
    }

    fn hub() -> ScriptedAgentHub {
        ScriptedAgentHub {
            scripts: vec![
                AgentScript {
                    agent_type: AgentType::Rag,
                    pattern: "s1".into(),
                    attempts: vec![
                        ScriptedAttempt {
                            content: "first attempt".into(),
                            sources: vec![],
                            tokens: 10,
                            latency_ms: 5,
                            fail: false,
                        },
                        ScriptedAttempt {
                            content: "second attempt".into(),
                            sources: vec![],
                            tokens: 20,
                            latency_ms: 5,
                            fail: false,
                        },
                    ],
                },
                AgentScript {
                    agent_type: AgentType::Rag,
                    pattern: "revenue".into(),
                    attempts: vec![ScriptedAttempt {
                        content: "substring match".into(),
                        sources: vec![],
                        tokens: 1,
                        latency_ms: 0,
                        fail: false,
                    }],
                },
                AgentScript {
                    agent_type: AgentType::Rag,
                    pattern: "*".into(),
                    attempts: vec![ScriptedAttempt {
                        content: "default".into(),
                        sources: vec![],
                        tokens: 1,
                        latency_ms: 0,
                        fail: false,
                    }],
                },
            ],
        }
    }

    #[test]
    fn match_precedence_is_id_then_substring_then_default() {
        let hub = hub();
        let exact = hub
            .execute(
                &request("s1", "anything", AgentType::Rag, 1),
                &mut gateway(),
            )
            .unwrap();
        assert_eq!(exact.content, "first attempt");
        let substring = hub
            .execute(
                &request("s9", "what is the revenue trend", AgentType::Rag, 1),
                &mut gateway(),
            )
            .unwrap();
        assert_eq!(substring.content, "substring match");
        let fallback = hub
            .execute(
                &request("s9", "unrelated", AgentType::Rag, 1),
                &mut gateway(),
            )
            .unwrap();
        assert_eq!(fallback.content, "default");
    }

    #[test]
    fn nth_execution_consumes_nth_attempt_and_repeats_the_last() {
        let hub = hub();
        let first = hub
            .execute(&request("s1", "q", AgentType::Rag, 1), &mut gateway())
            .unwrap();
        let second = hub
            .execute(&request("s1", "q", AgentType::Rag, 2), &mut gateway())
            .unwrap();
        let fifth = hub
            .execute(&request("s1", "q", AgentType::Rag, 5), &mut gateway())
            .unwrap();
        assert_eq!(first.content, "first attempt");
        assert_eq!(second.content, "second attempt");
        assert_eq!(fifth.content, "second attempt");
    }

    #[test]
    fn unmatched_agent_type_is_a_backend_error() {
        let hub = hub();
        assert!(hub
            .execute(&request("s1", "q", AgentType::Financial, 1), &mut gateway())
            .is_err());
    }

    #[test]
    fn scenario_document_parses_and_validates() {
        let text = r#"{
            "seed": 7,
            "plan": {"sub_questions": [
                {"id": "a", "question": "what happened", "agent_type": "rag", "priority": 9}
            ], "explanation": "demo"},
            "agents": [
                {"agent_type": "rag", "match": "*", "attempts": [
                    {"content": "answer [ok]", "sources": [{"label": "S1", "locator": "doc#1"}],
                     "tokens": 500, "latency_ms": 20, "fail": false}
                ]}
            ],
            "verifier": [
                {"match": "[ok]", "status": "complete", "score": 1.0, "confidence": 0.9,
                 "recommendation": "accept", "missing_aspects": []}
            ]
        }"#;
        let scenario = Scenario::from_json(text).unwrap();
        assert_eq!(scenario.seed, 7);
        let registry = scenario.registry();
        assert!(registry.validate_for(&scenario.plan).is_ok());
    }

    #[test]
    fn scenario_rejects_invalid_plans_and_empty_attempts() {
        let bad_plan =
            r#"{"seed": 1, "plan": {"sub_questions": []}, "agents": [], "verifier": []}"#;
        assert!(matches!(
            Scenario::from_json(bad_plan),
            Err(ScenarioError::InvalidPlan(_))
        ));

        let empty_attempts = r#"{
            "seed": 1,
            "plan": {"sub_questions": [{"id": "a", "question": "q", "agent_type": "rag"}]},
            "agents": [{"agent_type": "rag", "match": "*", "attempts": []}],
            "verifier": []
        }"#;
        assert!(matches!(
            Scenario::from_json(empty_attempts),
            Err(ScenarioError::EmptyAttempts { .. })
        ));
    }

    #[test]
    fn verifier_rules_match_in_list_order() {
        let verifier = ScriptedVerifier {
            rules: vec![
                VerifierRule {
                    pattern: "[final]".into(),
                    status: VerificationStatus::Complete,
                    score: 1.0,
                    confidence: 0.9,
                    recommendation: Recommendation::Accept,
                    missing_aspects: vec![],
                    contradictions: vec![],
                    tokens: 10,
                },
                VerifierRule {
                    pattern: "[draft]".into(),
                    status: VerificationStatus::Incomplete,
                    score: 0.3,
                    confidence: 0.4,
                    recommendation: Recommendation::Retry,
                    missing_aspects: vec!["depth".into()],
                    contradictions: vec![],
                    tokens: 10,
                },
            ],
        };
        let sq = SubQuestion::new("a", "q", AgentType::Rag);
        let both = VerificationRequest {
            sub_question: &sq,
            result_content: "mixed [draft] then [final]",
            sources: &[],
            dependency_contents: vec![],
        };
        // First listed rule wins even though both patterns occur.
        let judgment = verifier.verify(&both).unwrap();
        assert_eq!(judgment.status, VerificationStatus::Complete);
    }

    #[test]
    fn sim_synthesizer_single_pass_builds_sectioned_answer() {
        use crate::backends::SynthesisItem;
        use crate::executor::AgentResult;
        let plan = ExecutionPlan::new(vec![SubQuestion::new("a", "q", AgentType::Rag)], "");
        let result = AgentResult {
            sub_question_id: "a".into(),
            content: "headline finding\nmore detail".into(),
            sources: vec![SourceAttribution::new("S1", "doc")],
            tokens_used: 0,
            tool_trace: vec![],
            duration: Duration::ZERO,
            attempt: 1,
            merged_from_attempts: vec![],
        };
        let request = SynthesisRequest {
            query: "what happened",
            stage: SynthesisStage::SinglePass,
            items: vec![SynthesisItem {
                sub_question: plan.get("a").unwrap(),
                result: &result,
                record: None,
            }],
        };
        let output = SimSynthesizer.synthesize(&request).unwrap();
        for section in [
            "EXECUTIVE SUMMARY",
            "KEY FINDINGS",
            "ANALYSIS",
            "CONCLUSIONS",
        ] {
            assert!(output.answer.contains(section), "missing section {section}");
        }
        assert_eq!(output.key_findings.len(), 1);
        assert!(output.answer.contains("[S1 - doc]"));
    }
}
