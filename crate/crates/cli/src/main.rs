use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iotarch::orchestration::Mode;
use iotarch::kernel::EventLog;
use iotarch::run::{checks, project, run_scenario, Overrides, RunSummary};
use iotarch::scenario::{parse_config, Scenario};

mod serve;

#[derive(Parser)]
#[command(name = "iotarch", version, about = "Deterministic layered IoT platform simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to its horizon and write run.jsonl, summary.json and cloud-store.jsonl.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ticks: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Parse a rule file; with --config, also resolve names against a scenario.
    ValidateRules {
        file: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rebuild the final dashboard snapshot from a run.jsonl and print it.
    Replay { file: PathBuf },
    /// Run the simulation live behind the HTTP and WebSocket API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Wall-clock milliseconds per tick.
        #[arg(long, default_value_t = 250)]
        tick_ms: u64,
        /// Stop stepping after this many ticks (default: the scenario horizon).
        #[arg(long)]
        ticks: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<Mode>,
    },
}

const VALIDATION: u8 = 1;
const VIOLATION: u8 = 2;

fn load(path: &PathBuf) -> Result<Scenario, ExitCode> {
    parse_config(path).map_err(|e| {
        for d in e.diagnostics() {
            eprintln!("{}: {d}", path.display());
        }
        ExitCode::from(VALIDATION)
    })
}

fn exit_for(summary: &RunSummary) -> ExitCode {
    if summary.violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(VIOLATION)
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, ticks, seed, mode, out } => {
            let scenario = match load(&config) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let result = std::fs::create_dir_all(&out)
                .map_err(Into::into)
                .and_then(|_| run_scenario(scenario, Overrides { ticks, seed, mode }, Some(&out)));
            match result {
                Ok(run) => {
                    let s = &run.summary;
                    println!(
                        "{}: {} ticks, {} messages, {} commands, {} violations -> {}",
                        s.scenario,
                        s.ticks,
                        s.messages,
                        s.commands,
                        s.violations.len(),
                        out.display()
                    );
                    for v in &s.violations {
                        eprintln!("violation: {v}");
                    }
                    exit_for(s)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::ValidateRules { file, config } => validate_rules(&file, config.as_ref()),
        Command::Replay { file } => {
            let log = std::fs::read_to_string(&file).map_err(|e| e.to_string()).and_then(|t| EventLog::from_jsonl(&t).map_err(|e| e.to_string()));
            match log {
                Ok(log) => {
                    println!("{}", serde_json::to_string_pretty(&project(log.entries())).expect("serializable"));
                    let violations = checks::ordering(log.entries());
                    for v in &violations {
                        eprintln!("violation: {v}");
                    }
                    if violations.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(VIOLATION)
                    }
                }
                Err(e) => {
                    eprintln!("{}: {e}", file.display());
                    ExitCode::from(VALIDATION)
                }
            }
        }
        Command::Serve { config, port, host, tick_ms, ticks, seed, mode } => {
            let scenario = match load(&config) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let opts = serve::Options { host, port, tick_ms, ticks, seed, mode };
            match serve::serve(scenario, opts) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}

fn validate_rules(file: &PathBuf, config: Option<&PathBuf>) -> ExitCode {
    let text = match std::fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{}: {e}", file.display());
            return ExitCode::from(VALIDATION);
        }
    };
    let lines = match iotarch::edge::rules::parse_rule_file(&text) {
        Ok(lines) => lines,
        Err(errors) => {
            for e in errors {
                let (line, col) = e.position().unwrap_or((0, 0));
                eprintln!("{}:{line}:{col}: {}: {e}", file.display(), e.code());
            }
            return ExitCode::from(VALIDATION);
        }
    };
    if let Some(path) = config {
        let scenario = match load(path) {
            Ok(s) => s,
            Err(code) => return code,
        };
        let catalog = scenario.catalog();
        let mut failed = false;
        for (i, l) in lines.iter().enumerate() {
            if let Err(e) = iotarch::edge::link_rule(&format!("rule-{:03}", i + 1), &l.text, l.ast.clone(), &catalog) {
                eprintln!("{}:{}: {}: {e}", file.display(), l.line, e.code());
                failed = true;
            }
        }
        if failed {
            return ExitCode::from(VALIDATION);
        }
    }
    println!("{}: {} rules ok", file.display(), lines.len());
    ExitCode::SUCCESS
}
