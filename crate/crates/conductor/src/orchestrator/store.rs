//! Run store: one directory per run holding the `plan.json`, `state.json`,
//! and `events.log` documents, enabling replay and post-hoc inspection.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::events::{check_sequence, encode_sse_log, parse_sse_log, EventLogError, RunEvent};
use crate::orchestrator::OrchestrationState;

pub const PLAN_FILE: &str = "plan.json";
pub const STATE_FILE: &str = "state.json";
pub const EVENTS_FILE: &str = "events.log";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown run id `{0}`")]
    UnknownRunId(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt run record: {0}")]
    Corrupt(String),
    #[error("corrupt event log: {0}")]
    CorruptEvents(#[from] EventLogError),
}

static RUN_COUNTER: AtomicU64 = AtomicU64::new(0);

fn generate_run_id() -> String {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let n = RUN_COUNTER.fetch_add(1, Ordering::SeqCst);
    format!("run-{now}-{n:04}")
}

/// A directory of run directories.
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    /// Persists run state under a generated id; the state round-trips
    /// field-for-field through [`RunStore::load_state`].
    pub fn persist_state(&self, state: &OrchestrationState) -> Result<String, StoreError> {
        let run_id = generate_run_id();
        self.persist_state_as(&run_id, state)?;
        Ok(run_id)
    }

    pub fn persist_state_as(
        &self,
        run_id: &str,
        state: &OrchestrationState,
    ) -> Result<(), StoreError> {
        let dir = self.run_dir(run_id);
        std::fs::create_dir_all(&dir)?;
        let state_json = serde_json::to_string_pretty(state)
            .map_err(|e| StoreError::Corrupt(format!("state does not serialize: {e}")))?;
        std::fs::write(dir.join(STATE_FILE), state_json)?;
        std::fs::write(dir.join(PLAN_FILE), state.plan.to_json_pretty())?;
        Ok(())
    }

    /// Persists state plus the full event log.
    pub fn persist_run(
        &self,
        run_id: &str,
        state: &OrchestrationState,
        events: &[RunEvent],
    ) -> Result<(), StoreError> {
        self.persist_state_as(run_id, state)?;
        std::fs::write(
            self.run_dir(run_id).join(EVENTS_FILE),
            encode_sse_log(events),
        )?;
        Ok(())
    }

    pub fn load_state(&self, run_id: &str) -> Result<OrchestrationState, StoreError> {
        let path = self.run_dir(run_id).join(STATE_FILE);
        if !path.exists() {
            return Err(StoreError::UnknownRunId(run_id.to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        let state: OrchestrationState = serde_json::from_str(&text)
            .map_err(|e| StoreError::Corrupt(format!("state does not parse: {e}")))?;
        if !state.ledger.is_consistent() {
            return Err(StoreError::Corrupt(
                "token ledger total does not match phase tallies".into(),
            ));
        }
        Ok(state)
    }

    /// Loads and validates the event log: parseable frames, sequence numbers
    /// gap-free from zero.
    pub fn load_events(&self, run_id: &str) -> Result<Vec<RunEvent>, StoreError> {
        let path = self.run_dir(run_id).join(EVENTS_FILE);
        if !path.exists() {
            return Err(StoreError::UnknownRunId(run_id.to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        let events = parse_sse_log(&text)?;
        check_sequence(&events)?;
        Ok(events)
    }
}

/// Loads a run directory directly (the CLI's `--out` layout), without going
/// through a parent store.
pub fn load_run_dir(dir: &Path) -> Result<Vec<RunEvent>, StoreError> {
    let path = dir.join(EVENTS_FILE);
    if !path.exists() {
        return Err(StoreError::UnknownRunId(dir.display().to_string()));
    }
    let text = std::fs::read_to_string(path)?;
    let events = parse_sse_log(&text)?;
    check_sequence(&events)?;
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{AgentType, ExecutionPlan, SubQuestion};

    fn sample_state() -> OrchestrationState {
        let plan = ExecutionPlan::new(vec![SubQuestion::new("a", "q", AgentType::Rag)], "e");
        let mut state = OrchestrationState::new(plan);
        state.completeness_history.push(0.5);
        state
    }

    #[test]
    fn state_round_trips_through_the_store() {
        let dir = std::env::temp_dir().join(format!("conductor-store-{}", std::process::id()));
        let store = RunStore::new(&dir);
        let state = sample_state();
        let run_id = store.persist_state(&state).unwrap();
        let loaded = store.load_state(&run_id).unwrap();
        assert_eq!(loaded, state);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_run_id_is_reported() {
        let store = RunStore::new(std::env::temp_dir().join("conductor-store-missing"));
        assert!(matches!(
            store.load_state("nope"),
            Err(StoreError::UnknownRunId(_))
        ));
        assert!(matches!(
            store.load_events("nope"),
            Err(StoreError::UnknownRunId(_))
        ));
    }
}
