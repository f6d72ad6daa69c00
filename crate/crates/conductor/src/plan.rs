//! Execution-plan data model: sub-questions, the dependency DAG, plan
//! validation, and wave decomposition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Functional tier an agent type belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentTier {
    DataGathering,
    Analysis,
    Output,
}

/// The agent taxonomy. Variant order is the canonical enumeration order used
/// wherever deterministic per-type iteration is required (e.g. grouped
/// synthesis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    Rag,
    WebSearch,
    Financial,
    Competitor,
    Analysis,
    Reasoning,
    RawData,
    Document,
    Visualization,
}

impl AgentType {
    /// All agent types in canonical order.
    pub const ALL: [AgentType; 9] = [
        AgentType::Rag,
        AgentType::WebSearch,
        AgentType::Financial,
        AgentType::Competitor,
        AgentType::Analysis,
        AgentType::Reasoning,
        AgentType::RawData,
        AgentType::Document,
        AgentType::Visualization,
    ];

    pub fn tier(self) -> AgentTier {
        match self {
            AgentType::Rag
            | AgentType::WebSearch
            | AgentType::Financial
            | AgentType::Competitor => AgentTier::DataGathering,
            AgentType::Analysis | AgentType::Reasoning | AgentType::RawData => AgentTier::Analysis,
            AgentType::Document | AgentType::Visualization => AgentTier::Output,
        }
    }

    /// The lower_snake_case name used in plan documents.
    pub fn as_str(self) -> &'static str {
        match self {
            AgentType::Rag => "rag",
            AgentType::WebSearch => "web_search",
            AgentType::Financial => "financial",
            AgentType::Competitor => "competitor",
            AgentType::Analysis => "analysis",
            AgentType::Reasoning => "reasoning",
            AgentType::RawData => "raw_data",
            AgentType::Document => "document",
            AgentType::Visualization => "visualization",
        }
    }
}

impl fmt::Display for AgentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const PRIORITY_MIN: u8 = 1;
pub const PRIORITY_MAX: u8 = 10;
pub const PRIORITY_DEFAULT: u8 = 5;

fn default_priority() -> u8 {
    PRIORITY_DEFAULT
}

/// One atomic, independently answerable unit of a decomposed query.
///
/// Duplicate dependency entries in external documents are normalized away by
/// the set representation. `priority` is range-checked by [`validate_plan`],
/// not at parse time, so invalid documents can be loaded and diagnosed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQuestion {
    pub id: String,
    pub question: String,
    pub agent_type: AgentType,
    #[serde(default)]
    pub dependencies: BTreeSet<String>,
    #[serde(default = "default_priority")]
    pub priority: u8,
    #[serde(default)]
    pub context_from_deps: bool,
    #[serde(default)]
    pub verification_criteria: String,
}

impl SubQuestion {
    pub fn new(id: impl Into<String>, question: impl Into<String>, agent_type: AgentType) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            agent_type,
            dependencies: BTreeSet::new(),
            priority: PRIORITY_DEFAULT,
            context_from_deps: false,
            verification_criteria: String::new(),
        }
    }

    pub fn with_dependency(mut self, dep: impl Into<String>) -> Self {
        self.dependencies.insert(dep.into());
        self
    }

    pub fn with_priority(mut self, priority: u8) -> Self {
        self.priority = priority;
        self
    }

    pub fn with_context_from_deps(mut self, enabled: bool) -> Self {
        self.context_from_deps = enabled;
        self
    }

    pub fn with_verification_criteria(mut self, criteria: impl Into<String>) -> Self {
        self.verification_criteria = criteria.into();
        self
    }
}

/// The DAG of sub-questions plus the planner's rationale.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub sub_questions: Vec<SubQuestion>,
    #[serde(default)]
    pub explanation: String,
}

impl ExecutionPlan {
    pub fn new(sub_questions: Vec<SubQuestion>, explanation: impl Into<String>) -> Self {
        Self {
            sub_questions,
            explanation: explanation.into(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&SubQuestion> {
        self.sub_questions.iter().find(|sq| sq.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.sub_questions.iter().map(|sq| sq.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.sub_questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub_questions.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization cannot fail")
    }
}

/// A single well-formedness violation. Violations are data, not faults:
/// validation always runs to completion and reports everything it finds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanViolation {
    EmptyPlan,
    EmptyId { index: usize },
    DuplicateId { id: String },
    EmptyQuestion { id: String },
    PriorityOutOfRange { id: String, priority: u8 },
    SelfDependency { id: String },
    DanglingDependency { from: String, to: String },
    Cycle { members: Vec<String> },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::EmptyPlan => write!(f, "plan contains no sub-questions"),
            PlanViolation::EmptyId { index } => {
                write!(f, "sub-question at index {index} has an empty id")
            }
            PlanViolation::DuplicateId { id } => write!(f, "duplicate sub-question id `{id}`"),
            PlanViolation::EmptyQuestion { id } => {
                write!(f, "sub-question `{id}` has empty question text")
            }
            PlanViolation::PriorityOutOfRange { id, priority } => write!(
                f,
                "sub-question `{id}` priority {priority} outside [{PRIORITY_MIN}, {PRIORITY_MAX}]"
            ),
            PlanViolation::SelfDependency { id } => {
                write!(f, "sub-question `{id}` depends on itself")
            }
            PlanViolation::DanglingDependency { from, to } => {
                write!(f, "dangling reference {from} -> {to}")
            }
            PlanViolation::Cycle { members } => {
                write!(f, "dependency cycle {{{}}}", members.join(", "))
            }
        }
    }
}

/// Outcome of [`validate_plan`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<PlanViolation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            write!(f, "plan is valid")
        } else {
            writeln!(f, "plan is invalid ({} violations):", self.violations.len())?;
            for v in &self.violations {
                writeln!(f, "  - {v}")?;
            }
            Ok(())
        }
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid plan: {0}")]
    InvalidPlan(ValidationReport),
}

/// Checks every plan invariant and enumerates all violations found.
///
/// Deterministic and order-insensitive: permuting `sub_questions` never
/// changes the ok/violation outcome.
pub fn validate_plan(plan: &ExecutionPlan) -> ValidationReport {
    let mut violations = Vec::new();

    if plan.is_empty() {
        violations.push(PlanViolation::EmptyPlan);
        return ValidationReport { violations };
    }

    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut duplicates: BTreeSet<&str> = BTreeSet::new();
    for (index, sq) in plan.sub_questions.iter().enumerate() {
        if sq.id.is_empty() {
            violations.push(PlanViolation::EmptyId { index });
        } else if !seen.insert(&sq.id) {
            duplicates.insert(&sq.id);
        }
    }
    for id in duplicates {
        violations.push(PlanViolation::DuplicateId { id: id.to_string() });
    }

    // Per-node checks, in id order so the report is order-insensitive.
    let mut by_id: BTreeMap<&str, &SubQuestion> = BTreeMap::new();
    for sq in &plan.sub_questions {
        by_id.entry(sq.id.as_str()).or_insert(sq);
    }
    for (id, sq) in &by_id {
        if sq.question.trim().is_empty() {
            violations.push(PlanViolation::EmptyQuestion { id: id.to_string() });
        }
        if sq.priority < PRIORITY_MIN || sq.priority > PRIORITY_MAX {
            violations.push(PlanViolation::PriorityOutOfRange {
                id: id.to_string(),
                priority: sq.priority,
            });
        }
        if sq.dependencies.contains(*id) {
            violations.push(PlanViolation::SelfDependency { id: id.to_string() });
        }
        for dep in &sq.dependencies {
            if !seen.contains(dep.as_str()) && !dep.is_empty() {
                violations.push(PlanViolation::DanglingDependency {
                    from: id.to_string(),
                    to: dep.clone(),
                });
            }
        }
    }

    for members in cycles(&by_id) {
        violations.push(PlanViolation::Cycle { members });
    }

    ValidationReport { violations }
}

/// Strongly connected components with more than one node, via iterative
/// Tarjan. Self-loops are reported separately as `SelfDependency`.
fn cycles(by_id: &BTreeMap<&str, &SubQuestion>) -> Vec<Vec<String>> {
    struct Frame<'a> {
        node: &'a str,
        edges: Vec<&'a str>,
        next: usize,
    }

    let mut index_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut lowlink: BTreeMap<&str, usize> = BTreeMap::new();
    let mut on_stack: BTreeSet<&str> = BTreeSet::new();
    let mut stack: Vec<&str> = Vec::new();
    let mut next_index = 0usize;
    let mut sccs: Vec<Vec<String>> = Vec::new();

    for &root in by_id.keys() {
        if index_of.contains_key(root) {
            continue;
        }
        let mut frames = vec![Frame {
            node: root,
            edges: edges_of(by_id, root),
            next: 0,
        }];
        index_of.insert(root, next_index);
        lowlink.insert(root, next_index);
        next_index += 1;
        stack.push(root);
        on_stack.insert(root);

        while let Some(frame) = frames.last_mut() {
            if frame.next < frame.edges.len() {
                let target = frame.edges[frame.next];
                frame.next += 1;
                if let Some(&target_index) = index_of.get(target) {
                    if on_stack.contains(target) {
                        let node = frame.node;
                        let low = (*lowlink.get(node).unwrap()).min(target_index);
                        lowlink.insert(node, low);
                    }
                } else {
                    index_of.insert(target, next_index);
                    lowlink.insert(target, next_index);
                    next_index += 1;
                    stack.push(target);
                    on_stack.insert(target);
                    frames.push(Frame {
                        node: target,
                        edges: edges_of(by_id, target),
                        next: 0,
                    });
                }
            } else {
                let node = frame.node;
                frames.pop();
                if let Some(parent) = frames.last() {
                    let low = (*lowlink.get(parent.node).unwrap()).min(*lowlink.get(node).unwrap());
                    lowlink.insert(parent.node, low);
                }
                if lowlink.get(node) == index_of.get(node) {
                    let mut component = Vec::new();
                    while let Some(top) = stack.pop() {
                        on_stack.remove(top);
                        component.push(top.to_string());
                        if top == node {
                            break;
                        }
                    }
                    if component.len() > 1 {
                        component.sort();
                        sccs.push(component);
                    }
                }
            }
        }
    }

    sccs.sort();
    sccs
}

fn edges_of<'a>(by_id: &BTreeMap<&'a str, &'a SubQuestion>, node: &str) -> Vec<&'a str> {
    by_id
        .get(node)
        .map(|sq| {
            sq.dependencies
                .iter()
                .filter_map(|dep| by_id.get_key_value(dep.as_str()).map(|(k, _)| *k))
                .filter(|dep| *dep != node)
                .collect()
        })
        .unwrap_or_default()
}

/// Decomposes a valid plan into execution waves.
///
/// Wave 0 holds the dependency-free sub-questions; wave n holds those whose
/// dependencies all lie in waves < n with at least one in wave n-1. Waves are
/// disjoint and their union covers the plan.
pub fn wave_decomposition(plan: &ExecutionPlan) -> Result<Vec<BTreeSet<String>>, PlanError> {
    let report = validate_plan(plan);
    if !report.is_ok() {
        return Err(PlanError::InvalidPlan(report));
    }

    let mut wave_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut remaining: BTreeMap<&str, &SubQuestion> = plan
        .sub_questions
        .iter()
        .map(|sq| (sq.id.as_str(), sq))
        .collect();

    let mut waves: Vec<BTreeSet<String>> = Vec::new();
    while !remaining.is_empty() {
        let current = waves.len();
        let ready: Vec<&str> = remaining
            .iter()
            .filter(|(_, sq)| {
                sq.dependencies
                    .iter()
                    .all(|d| wave_of.contains_key(d.as_str()))
            })
            .map(|(id, _)| *id)
            .collect();
        // Acyclic by validation, so progress is guaranteed.
        debug_assert!(!ready.is_empty());
        let mut wave = BTreeSet::new();
        for id in ready {
            remaining.remove(id);
            wave_of.insert(id, current);
            wave.insert(id.to_string());
        }
        waves.push(wave);
    }
    Ok(waves)
}
