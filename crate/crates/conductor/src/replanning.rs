//! Adaptive replanning: turns verification outcomes into retries, new
//! sub-questions, or termination, and merges retry results with preserved
//! prior attempts.
//!
//! Backend replan output is validated and repaired rather than trusted: the
//! engine force-adds every incomplete id the backend omitted, strips retries
//! of complete ids, and renames colliding new sub-question ids.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backends::{ReplanRequest, ReplannerBackend, ResultSummary};
use crate::executor::AgentResult;
use crate::plan::{ExecutionPlan, SubQuestion, PRIORITY_MAX, PRIORITY_MIN};
use crate::stopping::OrchestrationConfig;
use crate::verification::{
    completeness_ratio, Recommendation, VerificationRecord, VerificationStatus,
};

/// The corrective actions for one iteration. `done == true` implies both
/// action lists are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanDecision {
    pub retry_sub_questions: Vec<String>,
    pub new_sub_questions: Vec<SubQuestion>,
    pub explanation: String,
    pub done: bool,
}

impl ReplanDecision {
    pub fn done(explanation: impl Into<String>) -> Self {
        Self {
            retry_sub_questions: Vec::new(),
            new_sub_questions: Vec::new(),
            explanation: explanation.into(),
            done: true,
        }
    }

    pub fn has_actions(&self) -> bool {
        !self.retry_sub_questions.is_empty() || !self.new_sub_questions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ReplanOutcome {
    pub decision: ReplanDecision,
    pub tokens_used: u64,
}

/// Ids that must be retried regardless of what the backend says: status
/// Incomplete, or a Retry recommendation on a non-complete record.
pub fn mandatory_retry_ids(records: &BTreeMap<String, VerificationRecord>) -> BTreeSet<String> {
    records
        .values()
        .filter(|r| {
            r.status == VerificationStatus::Incomplete
                || (r.recommendation == Recommendation::Retry
                    && r.status != VerificationStatus::Complete)
        })
        .map(|r| r.sub_question_id.clone())
        .collect()
}

fn summaries(
    results: &BTreeMap<String, AgentResult>,
    records: &BTreeMap<String, VerificationRecord>,
    complete: bool,
) -> Vec<ResultSummary> {
    records
        .values()
        .filter(|r| r.is_complete() == complete)
        .map(|r| {
            let excerpt: String = results
                .get(&r.sub_question_id)
                .map(|res| res.content.chars().take(200).collect())
                .unwrap_or_default();
            ResultSummary {
                id: r.sub_question_id.clone(),
                status: r.status,
                completeness_score: r.completeness_score,
                missing_aspects: r.missing_aspects.clone(),
                excerpt,
            }
        })
        .collect()
}

/// Decides the next iteration's actions. The decision logic is enforced
/// regardless of backend output:
///
/// * completeness above the ready threshold, or iteration at the limit,
///   means done with empty lists;
/// * otherwise every incomplete id is retried (backend omissions are
///   force-added, complete ids stripped);
/// * backend-proposed new sub-questions are accepted only in the 0.5..=0.8
///   completeness band or when contradictions were recorded, after id and
///   dependency repair;
/// * a backend failure falls back to retrying all incomplete ids.
pub fn decide_replan(
    query: &str,
    plan: &ExecutionPlan,
    results: &BTreeMap<String, AgentResult>,
    records: &BTreeMap<String, VerificationRecord>,
    iteration: u32,
    config: &OrchestrationConfig,
    backend: &dyn ReplannerBackend,
) -> ReplanOutcome {
    let ratio = completeness_ratio(records);

    if ratio > config.ready_threshold {
        return ReplanOutcome {
            decision: ReplanDecision::done(format!(
                "completeness {ratio:.3} above ready threshold; proceeding to synthesis"
            )),
            tokens_used: 0,
        };
    }
    if iteration >= config.max_iterations {
        return ReplanOutcome {
            decision: ReplanDecision::done(format!(
                "iteration {iteration} reached max_iterations {}; proceeding with what exists",
                config.max_iterations
            )),
            tokens_used: 0,
        };
    }

    let mandatory = mandatory_retry_ids(records);
    let request = ReplanRequest {
        query,
        plan,
        complete: summaries(results, records, true),
        incomplete: summaries(results, records, false),
        iteration,
        completeness_ratio: ratio,
    };

    let (raw, tokens_used) = match backend.replan(&request) {
        Ok(output) => {
            let tokens = output.tokens_used;
            (output, tokens)
        }
        Err(err) => {
            // Deterministic fallback: retry everything incomplete.
            return ReplanOutcome {
                decision: ReplanDecision {
                    retry_sub_questions: mandatory.into_iter().collect(),
                    new_sub_questions: Vec::new(),
                    explanation: format!(
                        "replanner failed ({}); retrying all incomplete ids",
                        err.message
                    ),
                    done: false,
                },
                tokens_used: err.tokens_used,
            };
        }
    };

    // Retry set: backend list filtered to known, non-complete plan ids, then
    // closed over the mandatory set. Kept sorted for determinism.
    let mut retry: BTreeSet<String> = raw
        .retry_sub_questions
        .into_iter()
        .filter(|id| plan.contains(id))
        .filter(|id| records.get(id).map(|r| !r.is_complete()).unwrap_or(true))
        .collect();
    retry.extend(mandatory.iter().cloned());

    let contradictions_found = records.values().any(|r| !r.contradictions.is_empty());
    let new_allowed = (0.5..=0.8).contains(&ratio) || contradictions_found;
    let new_sub_questions = if new_allowed {
        repair_new_sub_questions(raw.new_sub_questions, plan)
    } else {
        Vec::new()
    };

    ReplanOutcome {
        decision: ReplanDecision {
            retry_sub_questions: retry.into_iter().collect(),
            new_sub_questions,
            explanation: raw.explanation,
            done: false,
        },
        tokens_used,
    }
}

/// Makes backend-proposed sub-questions safe to splice into the plan:
/// colliding ids get a numeric suffix, priorities are clamped into range,
/// self-dependencies are dropped, and entries with empty questions or
/// unresolvable dependencies are discarded.
fn repair_new_sub_questions(proposed: Vec<SubQuestion>, plan: &ExecutionPlan) -> Vec<SubQuestion> {
    let mut known_ids = plan.ids();
    let mut accepted = Vec::new();

    for mut sq in proposed {
        if sq.question.trim().is_empty() || sq.id.is_empty() {
            continue;
        }
        if known_ids.contains(&sq.id) {
            let mut suffix = 2u32;
            while known_ids.contains(&format!("{}_{suffix}", sq.id)) {
                suffix += 1;
            }
            sq.id = format!("{}_{suffix}", sq.id);
        }
        sq.priority = sq.priority.clamp(PRIORITY_MIN, PRIORITY_MAX);
        let own_id = sq.id.clone();
        sq.dependencies.remove(&own_id);
        if !sq.dependencies.iter().all(|d| known_ids.contains(d)) {
            continue;
        }
        known_ids.insert(sq.id.clone());
        accepted.push(sq);
    }
    accepted
}

const ATTEMPT_HEADER_PREFIX: &str = "=== attempt ";

fn attempt_header(attempt: u32) -> String {
    format!("{ATTEMPT_HEADER_PREFIX}{attempt} ===")
}

/// Merges a retry result onto the preserved previous attempt: contents are
/// concatenated under per-attempt headers, sources are unioned
/// (previous-first, deduplicated by label + locator), token counts add, and
/// the lineage records every prior attempt.
///
/// Panics when the two results belong to different sub-questions or the
/// retry attempt is not newer — both are coordinator bugs, never expected in
/// a valid run.
pub fn merge_results(previous: &AgentResult, retry: &AgentResult) -> AgentResult {
    assert_eq!(
        previous.sub_question_id, retry.sub_question_id,
        "merge_results called across different sub-questions"
    );
    assert!(
        retry.attempt > previous.attempt,
        "retry attempt {} must be newer than previous attempt {}",
        retry.attempt,
        previous.attempt
    );

    // A merge of two failures has no usable content to preserve; keep the
    // content empty so the result stays failure-marked for verification.
    let content = if previous.is_failure() && retry.is_failure() {
        String::new()
    } else {
        let mut content = String::new();
        if previous.merged_from_attempts.is_empty() {
            content.push_str(&attempt_header(previous.attempt));
            content.push('\n');
        }
        content.push_str(&previous.content);
        content.push_str("\n\n");
        content.push_str(&attempt_header(retry.attempt));
        content.push('\n');
        content.push_str(&retry.content);
        content
    };

    let mut sources = previous.sources.clone();
    for source in &retry.sources {
        if !sources.iter().any(|s| s.key() == source.key()) {
            sources.push(source.clone());
        }
    }

    let mut tool_trace = previous.tool_trace.clone();
    tool_trace.extend(retry.tool_trace.iter().cloned());

    let mut merged_from_attempts = previous.merged_from_attempts.clone();
    merged_from_attempts.push(previous.attempt);

    AgentResult {
        sub_question_id: retry.sub_question_id.clone(),
        content,
        sources,
        tokens_used: previous.tokens_used + retry.tokens_used,
        tool_trace,
        duration: previous.duration + retry.duration,
        attempt: retry.attempt,
        merged_from_attempts,
    }
}
