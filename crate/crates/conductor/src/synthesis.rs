//! Final-answer synthesis: single-pass for small result sets, hierarchical
//! (group-by-agent-type, then integrate) for large ones, with mandatory
//! source attribution and gap propagation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    GroupSummary, KeyFinding, SynthesisItem, SynthesisRequest, SynthesisStage, SynthesizerBackend,
    SynthesizerOutput,
};
use crate::executor::{AgentResult, SourceAttribution};
use crate::plan::{AgentType, ExecutionPlan};
use crate::verification::{mean_confidence, VerificationRecord};

/// Hierarchical synthesis kicks in past this many characters of result
/// content...
pub const HIERARCHICAL_CHAR_THRESHOLD: usize = 15_000;
/// ...or at this many results.
pub const HIERARCHICAL_RESULT_THRESHOLD: usize = 10;

/// The synthesized final answer. Every key finding carries at least one
/// citation and every citation's source appears in `sources`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    /// Sectioned answer text: executive summary, key findings, analysis,
    /// conclusions.
    pub answer: String,
    pub key_findings: Vec<KeyFinding>,
    pub confidence: f64,
    pub sources: Vec<SourceAttribution>,
    pub gaps: Vec<String>,
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("no results to synthesize")]
    NoResults,
    #[error("result `{0}` does not correspond to any plan sub-question")]
    UnknownResultId(String),
    #[error("synthesis backend failed at the final stage: {0}")]
    BackendFailed(String),
}

/// True when the result volume exceeds either hierarchical threshold:
/// content beyond 15k characters, or ten or more results.
pub fn needs_hierarchical(results: &BTreeMap<String, AgentResult>) -> bool {
    if results.len() >= HIERARCHICAL_RESULT_THRESHOLD {
        return true;
    }
    let chars: usize = results.values().map(|r| r.content.chars().count()).sum();
    chars > HIERARCHICAL_CHAR_THRESHOLD
}

/// Partitions results by their sub-question's agent type. Group keys iterate
/// in canonical agent-type order; within a group, results follow plan order.
pub fn group_by_agent_type<'r>(
    plan: &ExecutionPlan,
    results: &'r BTreeMap<String, AgentResult>,
) -> Result<BTreeMap<AgentType, Vec<&'r AgentResult>>, SynthesisError> {
    for id in results.keys() {
        if !plan.contains(id) {
            return Err(SynthesisError::UnknownResultId(id.clone()));
        }
    }
    let mut groups: BTreeMap<AgentType, Vec<&AgentResult>> = BTreeMap::new();
    for sq in &plan.sub_questions {
        if let Some(result) = results.get(&sq.id) {
            groups.entry(sq.agent_type).or_default().push(result);
        }
    }
    Ok(groups)
}

/// Synthesis outcome plus accounting the orchestrator needs.
#[derive(Debug, Clone)]
pub struct SynthesisOutcome {
    pub answer: FinalAnswer,
    pub tokens_used: u64,
    pub hierarchical: bool,
    pub backend_calls: u32,
    pub groups: u32,
}

fn items_for<'a>(
    plan: &'a ExecutionPlan,
    results: &'a [&'a AgentResult],
    records: &'a BTreeMap<String, VerificationRecord>,
) -> Vec<SynthesisItem<'a>> {
    results
        .iter()
        .map(|result| SynthesisItem {
            sub_question: plan
                .get(&result.sub_question_id)
                .expect("grouped results reference plan entries"),
            result,
            record: records.get(&result.sub_question_id),
        })
        .collect()
}

/// Machine-built stand-in when a group-stage backend call fails: concatenated
/// result excerpts, so the group still reaches integration.
fn fallback_group_summary(agent_type: AgentType, members: &[&AgentResult]) -> GroupSummary {
    let mut summary = format!("{agent_type} findings (fallback summary):\n");
    let mut sources = Vec::new();
    for result in members {
        let excerpt: String = result.content.chars().take(240).collect();
        summary.push_str(&format!("- ({}) {}\n", result.sub_question_id, excerpt));
        for source in &result.sources {
            if !sources
                .iter()
                .any(|s: &SourceAttribution| s.key() == source.key())
            {
                sources.push(source.clone());
            }
        }
    }
    GroupSummary {
        agent_type,
        summary,
        sources,
    }
}

/// Produces the final answer. Hierarchical mode invokes the backend once per
/// agent-type group and once to integrate; otherwise a single backend call
/// covers all results. The output is post-processed so the FinalAnswer
/// invariants hold regardless of backend behavior: sources are the
/// deduplicated union of all result sources, findings keep only traceable
/// citations (uncitable findings are dropped), and every non-complete record
/// contributes a gap entry.
pub fn synthesize(
    query: &str,
    plan: &ExecutionPlan,
    results: &BTreeMap<String, AgentResult>,
    records: &BTreeMap<String, VerificationRecord>,
    backend: &dyn SynthesizerBackend,
) -> Result<SynthesisOutcome, SynthesisError> {
    if results.is_empty() {
        return Err(SynthesisError::NoResults);
    }

    let hierarchical = needs_hierarchical(results);
    let mut backend_calls = 0u32;
    let mut tokens_used = 0u64;
    let mut groups_count = 0u32;

    let output = if hierarchical {
        let groups = group_by_agent_type(plan, results)?;
        groups_count = groups.len() as u32;
        let mut summaries = Vec::new();
        for (agent_type, members) in &groups {
            let request = SynthesisRequest {
                query,
                stage: SynthesisStage::Group(*agent_type),
                items: items_for(plan, members, records),
            };
            backend_calls += 1;
            match backend.synthesize(&request) {
                Ok(out) => {
                    tokens_used += out.tokens_used;
                    summaries.push(GroupSummary {
                        agent_type: *agent_type,
                        summary: out.answer,
                        sources: out.sources,
                    });
                }
                Err(err) => {
                    tokens_used += err.tokens_used;
                    summaries.push(fallback_group_summary(*agent_type, members));
                }
            }
        }
        let request = SynthesisRequest {
            query,
            stage: SynthesisStage::Integrate(&summaries),
            items: Vec::new(),
        };
        backend_calls += 1;
        match backend.synthesize(&request) {
            Ok(out) => {
                tokens_used += out.tokens_used;
                out
            }
            Err(err) => {
                return Err(SynthesisError::BackendFailed(err.message));
            }
        }
    } else {
        let ordered: Vec<&AgentResult> = plan
            .sub_questions
            .iter()
            .filter_map(|sq| results.get(&sq.id))
            .collect();
        let request = SynthesisRequest {
            query,
            stage: SynthesisStage::SinglePass,
            items: items_for(plan, &ordered, records),
        };
        backend_calls += 1;
        match backend.synthesize(&request) {
            Ok(out) => {
                tokens_used += out.tokens_used;
                out
            }
            Err(err) => {
                return Err(SynthesisError::BackendFailed(err.message));
            }
        }
    };

    let answer = finalize(output, plan, results, records);
    Ok(SynthesisOutcome {
        answer,
        tokens_used,
        hierarchical,
        backend_calls,
        groups: groups_count,
    })
}

/// Deduplicated union of every contributing result's sources, in plan order
/// then per-result order.
fn aggregate_sources(
    plan: &ExecutionPlan,
    results: &BTreeMap<String, AgentResult>,
) -> Vec<SourceAttribution> {
    let mut aggregated: Vec<SourceAttribution> = Vec::new();
    for sq in &plan.sub_questions {
        if let Some(result) = results.get(&sq.id) {
            for source in &result.sources {
                if !aggregated.iter().any(|s| s.key() == source.key()) {
                    aggregated.push(source.clone());
                }
            }
        }
    }
    aggregated
}

fn finalize(
    output: SynthesizerOutput,
    plan: &ExecutionPlan,
    results: &BTreeMap<String, AgentResult>,
    records: &BTreeMap<String, VerificationRecord>,
) -> FinalAnswer {
    let aggregated = aggregate_sources(plan, results);

    let key_findings: Vec<KeyFinding> = output
        .key_findings
        .into_iter()
        .filter_map(|mut finding| {
            finding
                .citations
                .retain(|c| aggregated.iter().any(|s| s.key() == c.key()));
            if finding.citations.is_empty() {
                None
            } else {
                Some(finding)
            }
        })
        .collect();

    let mut gaps = output.gaps;
    for record in records.values() {
        if !record.is_complete() {
            let missing = if record.missing_aspects.is_empty() {
                "unspecified".to_string()
            } else {
                record.missing_aspects.join("; ")
            };
            let entry = format!(
                "{}: {} — missing: {}",
                record.sub_question_id, record.status, missing
            );
            if !gaps.contains(&entry) {
                gaps.push(entry);
            }
        }
    }

    let confidence = output
        .confidence
        .map(|c| c.clamp(0.0, 1.0))
        .unwrap_or_else(|| mean_confidence(records));

    FinalAnswer {
        answer: output.answer,
        key_findings,
        confidence,
        sources: aggregated,
        gaps,
    }
}
