//! Reference adapter that forwards each backend role to an HTTP endpoint
//! exchanging the structured role documents as JSON. A gateway in front of an
//! actual model provider implements the five routes; this keeps provider
//! specifics out of the engine.
//!
//! Routes (all `POST {base}/{role}`):
//! - `/plan`        -> `{sub_questions, explanation}`
//! - `/agent`       -> `{content, sources, tokens_used}`
//! - `/verify`      -> `{verification_status, completeness_score, missing_aspects,
//!                      contradictions, confidence, recommendation}`
//! - `/replan`      -> `{retry_sub_questions, new_sub_questions, explanation, done}`
//! - `/synthesize`  -> `{answer, key_findings, confidence, sources, gaps}`

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::backends::tools::ToolGateway;
use crate::backends::{
    AgentBackend, AgentRequest, AgentResponse, BackendError, PlannerBackend, PlannerOutput,
    ReplanRequest, ReplannerBackend, ReplannerOutput, SynthesisRequest, SynthesisStage,
    SynthesizerBackend, SynthesizerOutput, VerificationRequest, VerifierBackend, VerifierJudgment,
};
use crate::executor::SourceAttribution;
use crate::plan::ExecutionPlan;

/// HTTP backend for all five orchestration roles.
pub struct LiveHttpBackend {
    base_url: String,
    agent: ureq::Agent,
}

impl LiveHttpBackend {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(timeout)
            .timeout(timeout)
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn post(&self, role: &str, body: serde_json::Value) -> Result<serde_json::Value, BackendError> {
        let url = format!("{}/{}", self.base_url, role);
        let response = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| BackendError::new(format!("{role} endpoint failed: {e}")))?;
        response
            .into_json()
            .map_err(|e| BackendError::new(format!("{role} endpoint returned malformed JSON: {e}")))
    }
}

#[derive(Deserialize)]
struct AgentDoc {
    content: String,
    #[serde(default)]
    sources: Vec<SourceAttribution>,
    #[serde(default)]
    tokens_used: u64,
}

#[derive(Deserialize)]
struct PlanDoc {
    #[serde(flatten)]
    plan: ExecutionPlan,
    #[serde(default)]
    tokens_used: u64,
}

impl PlannerBackend for LiveHttpBackend {
    fn plan(&self, query: &str) -> Result<PlannerOutput, BackendError> {
        let body = json!({ "query": query });
        let doc: PlanDoc = serde_json::from_value(self.post("plan", body)?)
            .map_err(|e| BackendError::new(format!("plan document did not parse: {e}")))?;
        Ok(PlannerOutput {
            plan: doc.plan,
            tokens_used: doc.tokens_used,
        })
    }
}

impl AgentBackend for LiveHttpBackend {
    fn execute(
        &self,
        request: &AgentRequest,
        _tools: &mut ToolGateway,
    ) -> Result<AgentResponse, BackendError> {
        let body = json!({
            "sub_question_id": request.sub_question_id,
            "agent_type": request.agent_type,
            "question": request.question,
            "prompt": request.prompt,
            "attempt": request.attempt,
            "verification_criteria": request.verification_criteria,
        });
        let doc: AgentDoc = serde_json::from_value(self.post("agent", body)?)
            .map_err(|e| BackendError::new(format!("agent document did not parse: {e}")))?;
        Ok(AgentResponse {
            content: doc.content,
            sources: doc.sources,
            tokens_used: doc.tokens_used,
            latency: Duration::ZERO,
        })
    }
}

impl VerifierBackend for LiveHttpBackend {
    fn verify(&self, request: &VerificationRequest<'_>) -> Result<VerifierJudgment, BackendError> {
        let dependency_contents: Vec<serde_json::Value> = request
            .dependency_contents
            .iter()
            .map(|(id, content)| json!({ "id": id, "content": content }))
            .collect();
        let body = json!({
            "sub_question": request.sub_question.question,
            "verification_criteria": request.sub_question.verification_criteria,
            "result": request.result_content,
            "sources": request.sources,
            "dependency_results": dependency_contents,
        });
        serde_json::from_value(self.post("verify", body)?)
            .map_err(|e| BackendError::new(format!("verification document did not parse: {e}")))
    }
}

impl ReplannerBackend for LiveHttpBackend {
    fn replan(&self, request: &ReplanRequest<'_>) -> Result<ReplannerOutput, BackendError> {
        let body = json!({
            "query": request.query,
            "plan": request.plan,
            "complete_results": request.complete,
            "incomplete_results": request.incomplete,
            "iteration": request.iteration,
            "completeness_ratio": request.completeness_ratio,
        });
        serde_json::from_value(self.post("replan", body)?)
            .map_err(|e| BackendError::new(format!("replanning document did not parse: {e}")))
    }
}

impl SynthesizerBackend for LiveHttpBackend {
    fn synthesize(
        &self,
        request: &SynthesisRequest<'_>,
    ) -> Result<SynthesizerOutput, BackendError> {
        let items: Vec<serde_json::Value> = request
            .items
            .iter()
            .map(|item| {
                json!({
                    "id": item.result.sub_question_id,
                    "question": item.sub_question.question,
                    "content": item.result.content,
                    "sources": item.result.sources,
                    "verification": item.record,
                })
            })
            .collect();
        let stage = match &request.stage {
            SynthesisStage::SinglePass => json!({ "stage": "single_pass" }),
            SynthesisStage::Group(agent_type) => {
                json!({ "stage": "group", "agent_type": agent_type })
            }
            SynthesisStage::Integrate(summaries) => json!({
                "stage": "integrate",
                "summaries": summaries.iter().map(|s| json!({
                    "agent_type": s.agent_type,
                    "summary": s.summary,
                    "sources": s.sources,
                })).collect::<Vec<_>>(),
            }),
        };
        let body = json!({
            "query": request.query,
            "stage": stage,
            "results": items,
        });
        serde_json::from_value(self.post("synthesize", body)?)
            .map_err(|e| BackendError::new(format!("synthesis document did not parse: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verification::{Recommendation, VerificationStatus};

    #[test]
    fn role_documents_parse_with_contract_field_names() {
        let verify: VerifierJudgment = serde_json::from_str(
            r#"{"verification_status": "partial", "completeness_score": 0.6,
                "missing_aspects": ["trend"], "confidence": 0.7, "recommendation": "retry"}"#,
        )
        .unwrap();
        assert_eq!(verify.status, VerificationStatus::Partial);
        assert_eq!(verify.recommendation, Recommendation::Retry);

        let replan: ReplannerOutput = serde_json::from_str(
            r#"{"retry_sub_questions": ["a"], "new_sub_questions": [], "explanation": "x", "done": false}"#,
        )
        .unwrap();
        assert_eq!(replan.retry_sub_questions, vec!["a"]);

        let synth: SynthesizerOutput = serde_json::from_str(
            r#"{"answer": "text", "key_findings": [{"finding": "f", "citations": [{"label": "S", "locator": "l"}]}],
                "confidence": 0.8, "sources": [{"label": "S", "locator": "l"}], "gaps": []}"#,
        )
        .unwrap();
        assert_eq!(synth.key_findings.len(), 1);

        let plan: PlanDoc = serde_json::from_str(
            r#"{"sub_questions": [{"id": "a", "question": "q", "agent_type": "rag"}], "explanation": "e"}"#,
        )
        .unwrap();
        assert_eq!(plan.plan.len(), 1);
    }
}
