use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use agora::api::{router, ApiConfig};
use agora::engine;
use agora::record::{report, RecordError, RunRecord};
use agora::scenario::{find_by_digest, load_scenario};
use clap::{Parser, Subcommand};

/// Exit status for usage and parse errors.
const USAGE: u8 = 3;
/// Exit status for replay divergence and other runtime failures.
const RUNTIME: u8 = 1;

#[derive(Parser)]
#[command(
    name = "agora",
    version,
    about = "Run, replay and serve agora marketplace scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scripted scenario headless and print the outcome.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the JSON-lines record.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-execute a record and compare it line by line.
    Replay {
        record: PathBuf,
        /// Directory searched for the record's scenario by digest.
        #[arg(long, env = "AGORA_SCENARIO_DIR")]
        scenario_dir: Option<PathBuf>,
    },
    /// Print the metrics of a finished record.
    Report { record: PathBuf },
    /// Serve the HTTP control API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, env = "AGORA_SCENARIO_DIR")]
        scenario_dir: Option<PathBuf>,
        /// Milliseconds per tick for interactive timeouts.
        #[arg(long, default_value_t = 10)]
        tick_ms: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Cmd::Run {
            scenario,
            seed,
            out,
        } => run(scenario, seed, out),
        Cmd::Replay {
            record,
            scenario_dir,
        } => replay(record, scenario_dir),
        Cmd::Report { record } => report_cmd(record),
        Cmd::Serve {
            bind,
            scenario_dir,
            tick_ms,
        } => serve(bind, scenario_dir, tick_ms),
    }
}

fn run(path: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> ExitCode {
    let scenario = match load_scenario(&path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE);
        }
    };
    let seed = seed.unwrap_or(scenario.seed);
    let hint = path.file_name().map(|n| n.to_string_lossy().into_owned());
    let record = match engine::run(&scenario, seed, hint) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE);
        }
    };
    if let Some(out) = out {
        if let Err(e) = record.write(&out) {
            eprintln!("error: {e}");
            return ExitCode::from(RUNTIME);
        }
    }
    let Some(outcome) = record.outcome() else {
        eprintln!("error: run ended without an outcome");
        return ExitCode::from(RUNTIME);
    };
    println!(
        "{}",
        serde_json::json!({
            "run_id": record.header.run_id,
            "outcome": outcome.outcome,
            "task_id": outcome.task_id,
            "reason": outcome.reason,
            "log_hash": record.log_hash(),
            "metrics": outcome.metrics,
        })
    );
    ExitCode::from(outcome.outcome.exit_code() as u8)
}

fn read_record(path: &Path) -> Result<RunRecord, ExitCode> {
    RunRecord::read(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(USAGE)
    })
}

fn replay(path: PathBuf, scenario_dir: Option<PathBuf>) -> ExitCode {
    let record = match read_record(&path) {
        Ok(r) => r,
        Err(code) => return code,
    };
    let dir = scenario_dir
        .or_else(|| path.parent().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let Some((_, scenario)) = find_by_digest(&dir, &record.header.scenario_digest) else {
        eprintln!(
            "error: {}",
            RecordError::UnknownDigest(record.header.scenario_digest.clone())
        );
        return ExitCode::from(RUNTIME);
    };
    match engine::replay(&record, &scenario) {
        Ok(fresh) => {
            println!(
                "{}",
                serde_json::json!({ "replay": "ok", "lines": fresh.lines.len(), "log_hash": fresh.log_hash() })
            );
            ExitCode::SUCCESS
        }
        Err(RecordError::ReplayDivergence {
            line,
            expected,
            actual,
        }) => {
            eprintln!("replay diverged at line {line}");
            eprintln!("  expected: {}", expected.unwrap_or_default());
            eprintln!("  actual:   {}", actual.unwrap_or_default());
            ExitCode::from(RUNTIME)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(RUNTIME)
        }
    }
}

fn report_cmd(path: PathBuf) -> ExitCode {
    let record = match read_record(&path) {
        Ok(r) => r,
        Err(code) => return code,
    };
    match report(&record) {
        Ok(metrics) => {
            let outcome = record.outcome().map(|o| o.outcome);
            println!(
                "{}",
                serde_json::json!({ "outcome": outcome, "metrics": metrics })
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(RUNTIME)
        }
    }
}

fn serve(bind: String, scenario_dir: Option<PathBuf>, tick_ms: u64) -> ExitCode {
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(RUNTIME);
        }
    };
    let config = ApiConfig {
        scenario_dir,
        tick: Duration::from_millis(tick_ms.max(1)),
    };
    runtime.block_on(async move {
        let listener = match tokio::net::TcpListener::bind(&bind).await {
            Ok(l) => l,
            Err(e) => {
                eprintln!("error: cannot bind {bind}: {e}");
                return ExitCode::from(USAGE);
            }
        };
        eprintln!("listening on {bind}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        match axum::serve(listener, router(config))
            .with_graceful_shutdown(shutdown)
            .await
        {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(RUNTIME)
            }
        }
    })
}
