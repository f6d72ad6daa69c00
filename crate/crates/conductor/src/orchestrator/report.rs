//! Human-readable run reports and the event-log trace rendering shared by
//! `run` and `replay`. The trace is a pure function of the event log, so a
//! replayed run renders byte-identically to the original.

use std::fmt::Write as _;

use crate::backends::Phase;
use crate::events::{event_log_digest, RunEvent, RunEventKind};
use crate::orchestrator::RunReport;

/// Renders one event as a trace line.
pub fn render_event(event: &RunEvent) -> String {
    let desc = match &event.kind {
        RunEventKind::RunStarted { query, mode } => {
            format!("run started: mode={mode} query=\"{query}\"")
        }
        RunEventKind::PhaseStarted { phase, iteration } => {
            format!("phase {phase} started (iteration {iteration})")
        }
        RunEventKind::PhaseFinished {
            phase,
            iteration,
            tokens,
        } => {
            format!("phase {phase} finished (iteration {iteration}, {tokens} tokens)")
        }
        RunEventKind::SubQuestionStarted {
            id,
            attempt,
            agent_type,
        } => {
            format!("[{id}] attempt {attempt} started ({agent_type})")
        }
        RunEventKind::SubQuestionFinished {
            id,
            attempt,
            disposition,
            duration_ms,
            tokens,
        } => {
            format!(
                "[{id}] attempt {attempt} finished: {} ({duration_ms} ms, {tokens} tokens)",
                disposition.as_str()
            )
        }
        RunEventKind::VerificationRecorded {
            id,
            status,
            completeness_score,
            confidence,
            recommendation,
        } => {
            format!(
                "[{id}] verified: {status} (score {completeness_score:.2}, confidence {confidence:.2}, {recommendation})"
            )
        }
        RunEventKind::ReplanDecided { retry, new, done } => {
            format!(
                "replan decided: retry [{}] new [{}] done={done}",
                retry.join(", "),
                new.join(", ")
            )
        }
        RunEventKind::StopTriggered { outcome, detail } => {
            format!("stop triggered: {outcome} — {detail}")
        }
        RunEventKind::SynthesisProduced {
            hierarchical,
            groups,
            sources,
            key_findings,
            confidence,
        } => {
            let shape = if *hierarchical {
                format!("hierarchical over {groups} groups")
            } else {
                "single-pass".to_string()
            };
            format!(
                "synthesis produced: {shape}, {sources} sources, {key_findings} findings, confidence {confidence:.2}"
            )
        }
        RunEventKind::RunFinished {
            status,
            stop,
            total_tokens,
            verify_cycles,
            error,
        } => {
            let stop = stop.map(|s| s.as_str()).unwrap_or("none");
            match error {
                Some(err) => format!("run finished: {status:?}, error: {err}"),
                None => format!(
                    "run finished: stop={stop}, {total_tokens} tokens, {verify_cycles} verify cycles"
                ),
            }
        }
    };
    format!("#{:04} t+{:>8}ms  {desc}", event.seq, event.ts_ms)
}

/// Renders the full iteration trace for an event log.
pub fn render_trace(events: &[RunEvent]) -> String {
    let mut out = String::new();
    for event in events {
        out.push_str(&render_event(event));
        out.push('\n');
    }
    let _ = writeln!(out, "event log digest: {:016x}", event_log_digest(events));
    out
}

/// Renders the report for a completed run: final answer, fired stop
/// condition, per-phase token table, and the iteration trace.
pub fn render_report(report: &RunReport) -> String {
    let mut out = String::new();
    let state = &report.state;

    out.push_str("ORCHESTRATION RUN REPORT\n");
    out.push_str("========================\n");
    let _ = writeln!(out, "mode: {}", report.mode);
    match &state.stop {
        Some(stop) => {
            let _ = writeln!(out, "stop condition: {} — {}", stop.outcome, stop.detail);
        }
        None => {
            let _ = writeln!(
                out,
                "stop condition: none (mode runs without stop evaluation)"
            );
        }
    }
    let _ = writeln!(out, "verify cycles: {}", report.verify_cycles);
    let _ = writeln!(out, "final completeness: {:.3}", report.final_completeness);
    let _ = writeln!(
        out,
        "answer confidence: {:.2}",
        report.final_answer.confidence
    );

    out.push_str("\nTOKEN USAGE\n-----------\n");
    for phase in Phase::ALL {
        let _ = writeln!(
            out,
            "  {:<11}: {:>10}",
            phase.as_str(),
            state.ledger.phase_total(phase)
        );
    }
    let _ = writeln!(out, "  {:<11}: {:>10}", "total", state.ledger.total());

    out.push_str("\nSOURCES\n-------\n");
    if report.final_answer.sources.is_empty() {
        out.push_str("  (none)\n");
    }
    for source in &report.final_answer.sources {
        let _ = writeln!(out, "  {}", source.citation());
    }

    out.push_str("\nGAPS\n----\n");
    if report.final_answer.gaps.is_empty() {
        out.push_str("  (none)\n");
    }
    for gap in &report.final_answer.gaps {
        let _ = writeln!(out, "  - {gap}");
    }

    out.push_str("\nFINAL ANSWER\n------------\n");
    out.push_str(&report.final_answer.answer);
    if !report.final_answer.answer.ends_with('\n') {
        out.push('\n');
    }

    out.push_str("\nITERATION TRACE\n---------------\n");
    out.push_str(&render_trace(&report.events));
    out
}
