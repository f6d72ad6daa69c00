//! `conductor` — run orchestrations against scenarios or live backends,
//! validate plans, and replay stored event logs.
//!
//! Exit codes: 0 success, 1 run/validation failure, 2 usage error
//! (unreadable files, bad flags).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use conductor::backends::live::LiveHttpBackend;
use conductor::backends::scripted::Scenario;
use conductor::backends::BackendRegistry;
use conductor::events::NullSink;
use conductor::orchestrator::report::{render_report, render_trace};
use conductor::orchestrator::store::{load_run_dir, EVENTS_FILE};
use conductor::orchestrator::{run, RunMode, RunOptions, RunReport, TimingMode};
use conductor::plan::{validate_plan, AgentType, ExecutionPlan};
use conductor::stopping::OrchestrationConfig;
use conductor::BatchMode;

const EXIT_OK: u8 = 0;
const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "conductor",
    version,
    about = "Verification-driven multi-agent orchestration engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    StaticPipeline,
    SingleAgent,
}

impl From<ModeArg> for RunMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Full => RunMode::Full,
            ModeArg::StaticPipeline => RunMode::StaticPipeline,
            ModeArg::SingleAgent => RunMode::SingleAgent,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run an orchestration for a query.
    Run {
        /// The query to resolve.
        query: String,
        /// Orchestration config document (missing keys take defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario document driving scripted backends (simulated timing).
        #[arg(long, conflicts_with = "live")]
        scenario: Option<PathBuf>,
        /// Base URL of a live backend gateway (wall-clock timing).
        #[arg(long)]
        live: Option<String>,
        /// Coordination mode.
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        /// Run-artifact directory; defaults to ./runs/<timestamp>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use literal batch-barrier semantics instead of slot refill.
        #[arg(long)]
        strict_barrier: bool,
    },
    /// Validate a plan document and print the validation report.
    ValidatePlan {
        /// Plan document path.
        path: PathBuf,
    },
    /// Re-emit a stored run's event log and render its trace.
    Replay {
        /// Run directory containing events.log.
        run_dir: PathBuf,
        /// Pace output by recorded inter-event times.
        #[arg(long)]
        follow: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            query,
            config,
            scenario,
            live,
            mode,
            out,
            strict_barrier,
        } => cmd_run(
            &query,
            config,
            scenario,
            live,
            mode.into(),
            out,
            strict_barrier,
        ),
        Command::ValidatePlan { path } => cmd_validate_plan(&path),
        Command::Replay { run_dir, follow } => cmd_replay(&run_dir, follow),
    };
    ExitCode::from(code)
}

fn default_out_dir() -> PathBuf {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    PathBuf::from("runs").join(stamp.to_string())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    query: &str,
    config_path: Option<PathBuf>,
    scenario_path: Option<PathBuf>,
    live_url: Option<String>,
    mode: RunMode,
    out: Option<PathBuf>,
    strict_barrier: bool,
) -> u8 {
    let config = match config_path {
        None => OrchestrationConfig::default(),
        Some(path) => match OrchestrationConfig::load(&path) {
            Ok(config) => config,
            Err(err) => {
                eprintln!("error: cannot load config {}: {err}", path.display());
                return EXIT_USAGE;
            }
        },
    };

    let (registry, timing): (BackendRegistry, TimingMode) = match (&scenario_path, &live_url) {
        (Some(path), None) => match Scenario::load(path) {
            Ok(scenario) => (scenario.registry(), TimingMode::Simulated),
            Err(err) => {
                eprintln!("error: cannot load scenario {}: {err}", path.display());
                return EXIT_USAGE;
            }
        },
        (None, Some(url)) => (live_registry(url, &config), TimingMode::WallClock),
        _ => {
            eprintln!("error: exactly one of --scenario or --live is required");
            return EXIT_USAGE;
        }
    };

    let options = RunOptions {
        mode,
        timing,
        batch_mode: if strict_barrier {
            BatchMode::StrictBarrier
        } else {
            BatchMode::SlotRefill
        },
    };

    let report = match run(query, &config, &registry, &NullSink, &options) {
        Ok(report) => report,
        Err(err) => {
            eprintln!("error: run failed: {err}");
            return EXIT_FAILURE;
        }
    };

    let out_dir = out.unwrap_or_else(default_out_dir);
    if let Err(err) = write_artifacts(&out_dir, &report) {
        eprintln!(
            "error: cannot write run artifacts to {}: {err}",
            out_dir.display()
        );
        return EXIT_FAILURE;
    }
    eprintln!("run artifacts: {}", out_dir.display());
    print!("{}", render_report(&report));
    EXIT_OK
}

fn live_registry(base_url: &str, config: &OrchestrationConfig) -> BackendRegistry {
    let backend = std::sync::Arc::new(LiveHttpBackend::new(base_url, config.agent_timeout));
    let mut registry = BackendRegistry::new(
        backend.clone(),
        backend.clone(),
        backend.clone(),
        backend.clone(),
    );
    for agent_type in AgentType::ALL {
        registry = registry.with_agent(agent_type, backend.clone());
    }
    registry
}

fn write_artifacts(out_dir: &Path, report: &RunReport) -> std::io::Result<()> {
    use conductor::events::encode_sse_log;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("plan.json"),
        report.state.plan.to_json_pretty(),
    )?;
    std::fs::write(out_dir.join("state.json"), report.state.to_json_pretty())?;
    std::fs::write(out_dir.join(EVENTS_FILE), encode_sse_log(&report.events))?;
    std::fs::write(out_dir.join("report.txt"), render_report(report))?;
    std::fs::write(out_dir.join("trace.txt"), render_trace(&report.events))?;
    Ok(())
}

fn cmd_validate_plan(path: &Path) -> u8 {
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(err) => {
            eprintln!("error: cannot read {}: {err}", path.display());
            return EXIT_USAGE;
        }
    };
    let plan = match ExecutionPlan::from_json(&text) {
        Ok(plan) => plan,
        Err(err) => {
            eprintln!("error: cannot parse plan document: {err}");
            return EXIT_USAGE;
        }
    };
    let report = validate_plan(&plan);
    print!("{report}");
    if report.is_ok() {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}

fn cmd_replay(run_dir: &Path, follow: bool) -> u8 {
    if !run_dir.is_dir() {
        eprintln!("error: {} is not a run directory", run_dir.display());
        return EXIT_USAGE;
    }
    if !run_dir.join(EVENTS_FILE).exists() {
        eprintln!("error: {} has no {EVENTS_FILE}", run_dir.display());
        return EXIT_FAILURE;
    }
    let events = match load_run_dir(run_dir) {
        Ok(events) => events,
        Err(err) => {
            eprintln!("error: {err}");
            return EXIT_FAILURE;
        }
    };
    if follow {
        // Pace by recorded timestamps, capped so replaying live runs cannot
        // stall the terminal indefinitely.
        let mut last_ts = events.first().map(|e| e.ts_ms).unwrap_or(0);
        for event in &events {
            let gap = event.ts_ms.saturating_sub(last_ts).min(2_000);
            if gap > 0 {
                std::thread::sleep(Duration::from_millis(gap));
            }
            last_ts = event.ts_ms;
            print!("{}", conductor::orchestrator::report::render_event(event));
            println!();
        }
        let digest = conductor::events::event_log_digest(&events);
        println!("event log digest: {digest:016x}");
    } else {
        print!("{}", render_trace(&events));
    }
    EXIT_OK
}
