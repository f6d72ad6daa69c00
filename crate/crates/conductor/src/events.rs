//! Run event stream: sequence-numbered lifecycle events, injectable clocks,
//! sinks, and the SSE-compatible log encoding used by the run store.
//!
//! Every event is framed as `event: <kind>` / `data: <json>` so a
//! Server-Sent-Events gateway can forward log records verbatim.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Phase;
use crate::plan::AgentType;
use crate::stopping::StopOutcome;
use crate::verification::{Recommendation, VerificationStatus};

/// Monotonic run-relative clock, injectable so simulated runs are
/// reproducible.
pub trait Clock: Send + Sync {
    /// Milliseconds since the start of the run.
    fn now_ms(&self) -> u64;
}

/// Wall clock anchored at creation time.
pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }
}

/// Virtual clock advanced explicitly by the simulation driver.
pub struct SimClock {
    now: AtomicU64,
}

impl SimClock {
    pub fn new() -> Self {
        Self {
            now: AtomicU64::new(0),
        }
    }

    /// Advances to `ms` if it is ahead of the current instant. Never moves
    /// backwards.
    pub fn advance_to(&self, ms: u64) {
        self.now.fetch_max(ms, Ordering::SeqCst);
    }
}

impl Default for SimClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

/// How a single sub-question execution ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionDisposition {
    Ok,
    Degraded,
    Failed,
    Timeout,
}

impl ExecutionDisposition {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecutionDisposition::Ok => "ok",
            ExecutionDisposition::Degraded => "degraded",
            ExecutionDisposition::Failed => "failed",
            ExecutionDisposition::Timeout => "timeout",
        }
    }
}

/// Run outcome reported by the terminal event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

/// Kind-specific payloads for the run event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum RunEventKind {
    RunStarted {
        query: String,
        mode: String,
    },
    PhaseStarted {
        phase: Phase,
        iteration: u32,
    },
    PhaseFinished {
        phase: Phase,
        iteration: u32,
        tokens: u64,
    },
    SubQuestionStarted {
        id: String,
        attempt: u32,
        agent_type: AgentType,
    },
    SubQuestionFinished {
        id: String,
        attempt: u32,
        disposition: ExecutionDisposition,
        duration_ms: u64,
        tokens: u64,
    },
    VerificationRecorded {
        id: String,
        status: VerificationStatus,
        completeness_score: f64,
        confidence: f64,
        recommendation: Recommendation,
    },
    ReplanDecided {
        retry: Vec<String>,
        new: Vec<String>,
        done: bool,
    },
    StopTriggered {
        outcome: StopOutcome,
        detail: String,
    },
    SynthesisProduced {
        hierarchical: bool,
        groups: u32,
        sources: usize,
        key_findings: usize,
        confidence: f64,
    },
    RunFinished {
        status: RunStatus,
        stop: Option<StopOutcome>,
        total_tokens: u64,
        verify_cycles: u32,
        error: Option<String>,
    },
}

impl RunEventKind {
    pub fn name(&self) -> &'static str {
        match self {
            RunEventKind::RunStarted { .. } => "RunStarted",
            RunEventKind::PhaseStarted { .. } => "PhaseStarted",
            RunEventKind::PhaseFinished { .. } => "PhaseFinished",
            RunEventKind::SubQuestionStarted { .. } => "SubQuestionStarted",
            RunEventKind::SubQuestionFinished { .. } => "SubQuestionFinished",
            RunEventKind::VerificationRecorded { .. } => "VerificationRecorded",
            RunEventKind::ReplanDecided { .. } => "ReplanDecided",
            RunEventKind::StopTriggered { .. } => "StopTriggered",
            RunEventKind::SynthesisProduced { .. } => "SynthesisProduced",
            RunEventKind::RunFinished { .. } => "RunFinished",
        }
    }
}

/// One record of the run event stream. Sequence numbers are strictly
/// increasing and gap-free within a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub kind: RunEventKind,
}

impl RunEvent {
    /// Renders the SSE frame for this event.
    pub fn to_sse_frame(&self) -> String {
        let data = serde_json::to_string(self).expect("event serialization cannot fail");
        format!("event: {}\ndata: {}\n\n", self.kind.name(), data)
    }
}

/// Receives events in sequence order as they are emitted.
pub trait EventSink: Send + Sync {
    fn emit(&self, event: &RunEvent);
}

/// Discards everything.
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _event: &RunEvent) {}
}

/// Collects events in memory.
#[derive(Default)]
pub struct VecSink {
    events: Mutex<Vec<RunEvent>>,
}

impl VecSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<RunEvent> {
        self.events.lock().unwrap().clone()
    }
}

impl EventSink for VecSink {
    fn emit(&self, event: &RunEvent) {
        self.events.lock().unwrap().push(event.clone());
    }
}

/// Appends SSE frames to a file, flushing per event so a tailing gateway
/// sees records as they happen.
pub struct FileSink {
    writer: Mutex<BufWriter<File>>,
}

impl FileSink {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = File::create(path)?;
        Ok(Self {
            writer: Mutex::new(BufWriter::new(file)),
        })
    }
}

impl EventSink for FileSink {
    fn emit(&self, event: &RunEvent) {
        let mut writer = self.writer.lock().unwrap();
        let _ = writer.write_all(event.to_sse_frame().as_bytes());
        let _ = writer.flush();
    }
}

/// Owns sequence numbering and timestamping for one run; forwards every
/// event to the external sink and keeps the full log for the run report.
pub struct EventBus<'a> {
    sink: &'a dyn EventSink,
    clock: Arc<dyn Clock>,
    next_seq: u64,
    log: Vec<RunEvent>,
}

impl<'a> EventBus<'a> {
    pub fn new(sink: &'a dyn EventSink, clock: Arc<dyn Clock>) -> Self {
        Self {
            sink,
            clock,
            next_seq: 0,
            log: Vec::new(),
        }
    }

    pub fn emit(&mut self, kind: RunEventKind) {
        let event = RunEvent {
            seq: self.next_seq,
            ts_ms: self.clock.now_ms(),
            kind,
        };
        self.next_seq += 1;
        self.sink.emit(&event);
        self.log.push(event);
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    pub fn log(&self) -> &[RunEvent] {
        &self.log
    }

    pub fn into_log(self) -> Vec<RunEvent> {
        self.log
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EventLogError {
    #[error("malformed record at frame {frame}: {reason}")]
    Malformed { frame: usize, reason: String },
    #[error("bad sequence number {found} (expected {expected})")]
    BadSequence { expected: u64, found: u64 },
    #[error("event log is empty")]
    Empty,
}

/// Renders a full event log in the SSE encoding.
pub fn encode_sse_log(events: &[RunEvent]) -> String {
    events.iter().map(RunEvent::to_sse_frame).collect()
}

/// Parses an SSE-encoded event log. Frames must carry matching `event:` and
/// `data:` lines; sequence continuity is checked separately by
/// [`check_sequence`].
pub fn parse_sse_log(text: &str) -> Result<Vec<RunEvent>, EventLogError> {
    let mut events = Vec::new();
    for (frame, chunk) in text.split("\n\n").enumerate() {
        let chunk = chunk.trim_end_matches('\n');
        if chunk.is_empty() {
            continue;
        }
        let mut kind_line = None;
        let mut data_line = None;
        for line in chunk.lines() {
            if let Some(rest) = line.strip_prefix("event: ") {
                kind_line = Some(rest.trim());
            } else if let Some(rest) = line.strip_prefix("data: ") {
                data_line = Some(rest);
            } else {
                return Err(EventLogError::Malformed {
                    frame,
                    reason: format!("unexpected line `{line}`"),
                });
            }
        }
        let (kind, data) = match (kind_line, data_line) {
            (Some(k), Some(d)) => (k, d),
            _ => {
                return Err(EventLogError::Malformed {
                    frame,
                    reason: "frame missing event: or data: line".into(),
                })
            }
        };
        let event: RunEvent = serde_json::from_str(data).map_err(|e| EventLogError::Malformed {
            frame,
            reason: e.to_string(),
        })?;
        if event.kind.name() != kind {
            return Err(EventLogError::Malformed {
                frame,
                reason: format!(
                    "event line `{kind}` does not match payload kind `{}`",
                    event.kind.name()
                ),
            });
        }
        events.push(event);
    }
    Ok(events)
}

/// Verifies that sequence numbers start at 0 and are gap-free.
pub fn check_sequence(events: &[RunEvent]) -> Result<(), EventLogError> {
    if events.is_empty() {
        return Err(EventLogError::Empty);
    }
    for (expected, event) in events.iter().enumerate() {
        if event.seq != expected as u64 {
            return Err(EventLogError::BadSequence {
                expected: expected as u64,
                found: event.seq,
            });
        }
    }
    Ok(())
}

/// Stable FNV-1a digest of the SSE-encoded log; identical logs hash
/// identically across runs and platforms.
pub fn event_log_digest(events: &[RunEvent]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for byte in encode_sse_log(events).bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_events() -> Vec<RunEvent> {
        let sink = NullSink;
        let mut bus = EventBus::new(&sink, Arc::new(SimClock::new()));
        bus.emit(RunEventKind::RunStarted {
            query: "q".into(),
            mode: "full".into(),
        });
        bus.emit(RunEventKind::PhaseStarted {
            phase: Phase::Plan,
            iteration: 0,
        });
        bus.emit(RunEventKind::SubQuestionStarted {
            id: "a".into(),
            attempt: 1,
            agent_type: AgentType::Rag,
        });
        bus.into_log()
    }

    #[test]
    fn sequence_numbers_are_gap_free() {
        let events = sample_events();
        assert_eq!(
            events.iter().map(|e| e.seq).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert!(check_sequence(&events).is_ok());
    }

    #[test]
    fn sse_round_trip() {
        let events = sample_events();
        let text = encode_sse_log(&events);
        assert!(text.starts_with("event: RunStarted\ndata: {"));
        let parsed = parse_sse_log(&text).unwrap();
        assert_eq!(parsed, events);
    }

    #[test]
    fn gap_in_sequence_is_named() {
        let mut events = sample_events();
        events[2].seq = 7;
        assert_eq!(
            check_sequence(&events),
            Err(EventLogError::BadSequence {
                expected: 2,
                found: 7
            })
        );
    }

    #[test]
    fn truncated_frame_is_malformed() {
        let events = sample_events();
        let mut text = encode_sse_log(&events);
        text.truncate(text.len() - 25);
        assert!(parse_sse_log(&text).is_err());
    }

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let events = sample_events();
        assert_eq!(event_log_digest(&events), event_log_digest(&events));
        let mut other = events.clone();
        other[0].ts_ms = 99;
        assert_ne!(event_log_digest(&events), event_log_digest(&other));
    }

    #[test]
    fn sim_clock_never_moves_backwards() {
        let clock = SimClock::new();
        clock.advance_to(10);
        clock.advance_to(5);
        assert_eq!(clock.now_ms(), 10);
    }
}
