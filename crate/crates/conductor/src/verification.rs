//! Completeness verification: per-result verification records, reuse of
//! already-complete judgments, and the aggregate ratios that drive stop
//! conditions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::{VerificationRequest, VerifierBackend, VerifierJudgment};
use crate::executor::AgentResult;
use crate::plan::ExecutionPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerificationStatus {
    Complete,
    Partial,
    Incomplete,
}

impl fmt::Display for VerificationStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VerificationStatus::Complete => "complete",
            VerificationStatus::Partial => "partial",
            VerificationStatus::Incomplete => "incomplete",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recommendation {
    Accept,
    Retry,
    Escalate,
}

impl fmt::Display for Recommendation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Recommendation::Accept => "accept",
            Recommendation::Retry => "retry",
            Recommendation::Escalate => "escalate",
        };
        f.write_str(s)
    }
}

/// Structured completeness judgment for one sub-question result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub sub_question_id: String,
    pub status: VerificationStatus,
    pub completeness_score: f64,
    pub missing_aspects: Vec<String>,
    pub contradictions: Vec<String>,
    pub confidence: f64,
    pub recommendation: Recommendation,
}

impl VerificationRecord {
    /// Builds a record from a backend judgment, normalizing it into the
    /// record invariants: scores clamped to [0,1] and Complete status forced
    /// to an Accept recommendation.
    pub fn from_judgment(sub_question_id: impl Into<String>, judgment: VerifierJudgment) -> Self {
        let recommendation = if judgment.status == VerificationStatus::Complete {
            Recommendation::Accept
        } else {
            judgment.recommendation
        };
        Self {
            sub_question_id: sub_question_id.into(),
            status: judgment.status,
            completeness_score: judgment.completeness_score.clamp(0.0, 1.0),
            missing_aspects: judgment.missing_aspects,
            contradictions: judgment.contradictions,
            confidence: judgment.confidence.clamp(0.0, 1.0),
            recommendation,
        }
    }

    /// Synthetic record for results that never produced verifiable content
    /// (execution failure/timeout) or whose verification backend failed.
    pub fn unverifiable(sub_question_id: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            sub_question_id: sub_question_id.into(),
            status: VerificationStatus::Incomplete,
            completeness_score: 0.0,
            missing_aspects: vec![reason.into()],
            contradictions: Vec::new(),
            confidence: 0.0,
            recommendation: Recommendation::Retry,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.status == VerificationStatus::Complete
    }
}

/// Result of one verification phase.
#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub records: BTreeMap<String, VerificationRecord>,
    /// Ids that received a fresh judgment this phase (everything except
    /// copied-through Complete records).
    pub fresh: Vec<String>,
    pub tokens_used: u64,
}

/// Verifies every result, copying through prior Complete records without
/// invoking the backend. Failure-marked results and backend failures yield
/// synthetic Incomplete records so the loop can proceed.
pub fn verify_results(
    plan: &ExecutionPlan,
    results: &BTreeMap<String, AgentResult>,
    prior: &BTreeMap<String, VerificationRecord>,
    backend: &dyn VerifierBackend,
) -> VerifyOutcome {
    let mut records = BTreeMap::new();
    let mut fresh = Vec::new();
    let mut tokens_used = 0u64;

    for (id, result) in results {
        if let Some(previous) = prior.get(id) {
            if previous.is_complete() {
                records.insert(id.clone(), previous.clone());
                continue;
            }
        }

        let record = if result.is_failure() {
            let reason = if result.is_timeout() {
                "execution timed out"
            } else {
                "execution failed"
            };
            VerificationRecord::unverifiable(id, reason)
        } else {
            match plan.get(id) {
                None => VerificationRecord::unverifiable(id, "result references no plan entry"),
                Some(sub_question) => {
                    let dependency_contents = sub_question
                        .dependencies
                        .iter()
                        .map(|dep| {
                            let content = results
                                .get(dep)
                                .map(|r| r.content.clone())
                                .unwrap_or_default();
                            (dep.clone(), content)
                        })
                        .collect();
                    let request = VerificationRequest {
                        sub_question,
                        result_content: &result.content,
                        sources: &result.sources,
                        dependency_contents,
                    };
                    match backend.verify(&request) {
                        Ok(judgment) => {
                            tokens_used += judgment.tokens_used;
                            VerificationRecord::from_judgment(id, judgment)
                        }
                        Err(err) => {
                            tokens_used += err.tokens_used;
                            VerificationRecord::unverifiable(
                                id,
                                format!("verifier failed: {}", err.message),
                            )
                        }
                    }
                }
            }
        };
        fresh.push(id.clone());
        records.insert(id.clone(), record);
    }

    VerifyOutcome {
        records,
        fresh,
        tokens_used,
    }
}

/// Fraction of records whose status is Complete. Empty maps yield 0.
pub fn completeness_ratio(records: &BTreeMap<String, VerificationRecord>) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let complete = records.values().filter(|r| r.is_complete()).count();
    complete as f64 / records.len() as f64
}

/// Unweighted mean confidence over all records. Empty maps yield 0.
pub fn mean_confidence(records: &BTreeMap<String, VerificationRecord>) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.values().map(|r| r.confidence).sum::<f64>() / records.len() as f64
}

/// Mean completeness_score, tracked for diagnostics alongside the ratio.
pub fn mean_completeness_score(records: &BTreeMap<String, VerificationRecord>) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.values().map(|r| r.completeness_score).sum::<f64>() / records.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::BackendError;
    use crate::plan::{AgentType, SubQuestion};
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::time::Duration;

    /// Maps content markers to judgments; counts invocations.
    struct MarkerVerifier {
        calls: AtomicU32,
    }

    impl MarkerVerifier {
        fn new() -> Self {
            Self {
                calls: AtomicU32::new(0),
            }
        }
    }

    impl VerifierBackend for MarkerVerifier {
        fn verify(
            &self,
            request: &VerificationRequest<'_>,
        ) -> Result<VerifierJudgment, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let (status, score) = if request.result_content.contains("FULL") {
                (VerificationStatus::Complete, 1.0)
            } else if request.result_content.contains("HALF") {
                (VerificationStatus::Partial, 0.5)
            } else {
                (VerificationStatus::Incomplete, 0.0)
            };
            Ok(VerifierJudgment {
                status,
                completeness_score: score,
                missing_aspects: vec![],
                contradictions: vec![],
                confidence: 0.9,
                recommendation: if status == VerificationStatus::Complete {
                    Recommendation::Accept
                } else {
                    Recommendation::Retry
                },
                tokens_used: 10,
            })
        }
    }

    fn plan_of(ids: &[&str]) -> ExecutionPlan {
        ExecutionPlan::new(
            ids.iter()
                .map(|id| SubQuestion::new(*id, format!("q {id}"), AgentType::Rag))
                .collect(),
            "",
        )
    }

    fn ok_result(id: &str, content: &str) -> AgentResult {
        AgentResult {
            sub_question_id: id.into(),
            content: content.into(),
            sources: vec![],
            tokens_used: 0,
            tool_trace: vec![],
            duration: Duration::ZERO,
            attempt: 1,
            merged_from_attempts: vec![],
        }
    }

    #[test]
    fn complete_prior_records_skip_the_backend() {
        let plan = plan_of(&["a", "b"]);
        let results = BTreeMap::from([
            ("a".to_string(), ok_result("a", "FULL")),
            ("b".to_string(), ok_result("b", "HALF")),
        ]);
        let prior = BTreeMap::from([(
            "a".to_string(),
            VerificationRecord {
                sub_question_id: "a".into(),
                status: VerificationStatus::Complete,
                completeness_score: 1.0,
                missing_aspects: vec![],
                contradictions: vec![],
                confidence: 0.95,
                recommendation: Recommendation::Accept,
            },
        )]);
        let verifier = MarkerVerifier::new();
        let outcome = verify_results(&plan, &results, &prior, &verifier);
        assert_eq!(verifier.calls.load(Ordering::SeqCst), 1);
        assert_eq!(outcome.fresh, vec!["b".to_string()]);
        assert_eq!(outcome.records.len(), 2);
        assert_eq!(outcome.records["a"].confidence, 0.95);
    }

    #[test]
    fn failure_marked_result_becomes_incomplete_retry() {
        let plan = plan_of(&["a"]);
        let results = BTreeMap::from([(
            "a".to_string(),
            AgentResult::timed_out("a", 1, Duration::from_secs(1), vec![]),
        )]);
        let verifier = MarkerVerifier::new();
        let outcome = verify_results(&plan, &results, &BTreeMap::new(), &verifier);
        let record = &outcome.records["a"];
        assert_eq!(record.status, VerificationStatus::Incomplete);
        assert_eq!(record.recommendation, Recommendation::Retry);
        assert_eq!(verifier.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn scripted_judgments_are_echoed() {
        let plan = plan_of(&["a", "b"]);
        let results = BTreeMap::from([
            ("a".to_string(), ok_result("a", "FULL answer")),
            ("b".to_string(), ok_result("b", "HALF answer")),
        ]);
        let verifier = MarkerVerifier::new();
        let outcome = verify_results(&plan, &results, &BTreeMap::new(), &verifier);
        assert_eq!(outcome.records["a"].completeness_score, 1.0);
        assert_eq!(outcome.records["b"].completeness_score, 0.5);
        assert_eq!(outcome.tokens_used, 20);
    }

    #[test]
    fn backend_failure_yields_synthetic_record() {
        struct FailingVerifier;
        impl VerifierBackend for FailingVerifier {
            fn verify(
                &self,
                _r: &VerificationRequest<'_>,
            ) -> Result<VerifierJudgment, BackendError> {
                Err(BackendError::new("judge offline"))
            }
        }
        let plan = plan_of(&["a"]);
        let results = BTreeMap::from([("a".to_string(), ok_result("a", "text"))]);
        let outcome = verify_results(&plan, &results, &BTreeMap::new(), &FailingVerifier);
        let record = &outcome.records["a"];
        assert_eq!(record.status, VerificationStatus::Incomplete);
        assert_eq!(record.completeness_score, 0.0);
        assert_eq!(record.confidence, 0.0);
        assert_eq!(record.recommendation, Recommendation::Retry);
    }

    #[test]
    fn verification_is_idempotent_on_complete_records() {
        let plan = plan_of(&["a"]);
        let results = BTreeMap::from([("a".to_string(), ok_result("a", "FULL"))]);
        let verifier = MarkerVerifier::new();
        let first = verify_results(&plan, &results, &BTreeMap::new(), &verifier);
        let second = verify_results(&plan, &results, &first.records, &verifier);
        assert_eq!(first.records, second.records);
        assert_eq!(verifier.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn ratio_examples() {
        let mut records = BTreeMap::new();
        for (i, complete) in [true, true, true, true, false].iter().enumerate() {
            let id = format!("q{i}");
            let record = if *complete {
                VerificationRecord::from_judgment(
                    &id,
                    VerifierJudgment {
                        status: VerificationStatus::Complete,
                        completeness_score: 1.0,
                        missing_aspects: vec![],
                        contradictions: vec![],
                        confidence: 1.0,
                        recommendation: Recommendation::Accept,
                        tokens_used: 0,
                    },
                )
            } else {
                VerificationRecord::unverifiable(&id, "gap")
            };
            records.insert(id, record);
        }
        assert_eq!(completeness_ratio(&records), 0.8);

        let all_complete: BTreeMap<String, VerificationRecord> = records
            .iter()
            .filter(|(_, v)| v.is_complete())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        assert_eq!(completeness_ratio(&all_complete), 1.0);

        let one_of_three = BTreeMap::from([
            ("a".to_string(), records["q0"].clone()),
            (
                "b".to_string(),
                VerificationRecord::unverifiable("b", "gap"),
            ),
            (
                "c".to_string(),
                VerificationRecord::unverifiable("c", "gap"),
            ),
        ]);
        assert!((completeness_ratio(&one_of_three) - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(completeness_ratio(&BTreeMap::new()), 0.0);
    }

    #[test]
    fn mean_confidence_examples() {
        let mut records = BTreeMap::new();
        records.insert("a".to_string(), with_confidence("a", 0.5));
        records.insert("b".to_string(), with_confidence("b", 1.0));
        assert_eq!(mean_confidence(&records), 0.75);
        assert_eq!(mean_confidence(&BTreeMap::new()), 0.0);
    }

    fn with_confidence(id: &str, confidence: f64) -> VerificationRecord {
        VerificationRecord {
            sub_question_id: id.into(),
            status: VerificationStatus::Partial,
            completeness_score: 0.5,
            missing_aspects: vec![],
            contradictions: vec![],
            confidence,
            recommendation: Recommendation::Accept,
        }
    }

    #[test]
    fn mean_confidence_matches_exact_rational_oracle() {
        // Confidences are integer hundredths, so the exact mean is the
        // integer sum over 100n; the float mean must agree to 1e-12.
        let mut seed = 0x2545f491u64;
        let mut next = || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            seed
        };
        for _ in 0..50 {
            let n = (next() % 100 + 1) as usize;
            let hundredths: Vec<u64> = (0..n).map(|_| next() % 101).collect();
            let records: BTreeMap<String, VerificationRecord> = hundredths
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let id = format!("q{i:03}");
                    (id.clone(), with_confidence(&id, *h as f64 / 100.0))
                })
                .collect();
            let exact = hundredths.iter().sum::<u64>() as f64 / (100 * n) as f64;
            assert!((mean_confidence(&records) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn complete_status_forces_accept_recommendation() {
        let record = VerificationRecord::from_judgment(
            "a",
            VerifierJudgment {
                status: VerificationStatus::Complete,
                completeness_score: 1.4,
                missing_aspects: vec![],
                contradictions: vec![],
                confidence: -0.3,
                recommendation: Recommendation::Retry,
                tokens_used: 0,
            },
        );
        assert_eq!(record.recommendation, Recommendation::Accept);
        assert_eq!(record.completeness_score, 1.0);
        assert_eq!(record.confidence, 0.0);
    }
}
