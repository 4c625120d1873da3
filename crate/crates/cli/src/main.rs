//! Scenario-driven command line for the aggregation simulator.
//!
//! Exit codes: 0 on success, 1 for configuration problems, 2 for runtime
//! failures (horizon exceeded, failed quorum, ...).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use fedsim_core::config::{canned_scenario, BackendKind, ScenarioConfig, CANNED_SCENARIOS};
use fedsim_core::metrics::{rounds_csv, write_comparison, write_report};
use fedsim_core::scenario::{compare, run_backend_on_trace, RunOutcome, Trace};

#[derive(Parser)]
#[command(
    name = "fedsim",
    about = "Deterministic simulator comparing centralized, static-tree and serverless \
             federated-learning aggregation",
    after_help = "Bundled scenarios (usable as --config values): \
                  paper-latency-scaling, paper-joins, paper-active-cost, paper-intermittent-cost"
)]
struct Cli {
    /// Path to a scenario JSON file, or the name of a bundled scenario.
    #[arg(long, value_name = "PATH|NAME")]
    config: Option<String>,

    /// Override the configured backend (centralized | static_tree | serverless).
    #[arg(long, value_name = "ID")]
    backend: Option<String>,

    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for report files.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Stdout rendering: the JSON summary or the per-round CSV table.
    #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
    format: String,

    /// Run several backends on one recorded trace, comma separated.
    #[arg(long, value_name = "A,B,C")]
    compare: Option<String>,

    /// Print the default configuration as JSON and exit.
    #[arg(long)]
    print_defaults: bool,
}

enum CliError {
    Config(String),
    Runtime(String),
}

fn load_config(arg: &str) -> Result<ScenarioConfig, CliError> {
    let path = Path::new(arg);
    if path.exists() {
        ScenarioConfig::from_path(path).map_err(|e| CliError::Config(e.to_string()))
    } else if CANNED_SCENARIOS.contains(&arg) {
        canned_scenario(arg).map_err(|e| CliError::Config(e.to_string()))
    } else {
        Err(CliError::Config(format!(
            "config {arg:?} is neither a file nor a bundled scenario (available: {})",
            CANNED_SCENARIOS.join(", ")
        )))
    }
}

fn parse_backend(id: &str) -> Result<BackendKind, CliError> {
    BackendKind::parse(id).ok_or_else(|| {
        CliError::Config(format!(
            "unknown backend {id:?} (expected centralized, static_tree or serverless)"
        ))
    })
}

fn emit_outcome(cli: &Cli, outcome: &RunOutcome) -> Result<(), CliError> {
    write_report(&outcome.report, &cli.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(trace) = &outcome.broker_trace {
        let path = cli
            .out
            .join(format!("{}-broker-trace.ndjson", outcome.report.backend));
        std::fs::write(path, trace).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.print_defaults {
        print!("{}", ScenarioConfig::default().to_pretty_json());
        return Ok(());
    }
    let config_arg = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required (or use --print-defaults)".into()))?;
    let mut config = load_config(config_arg)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(backend) = &cli.backend {
        config.backend = parse_backend(backend)?;
    }

    if let Some(list) = &cli.compare {
        let backends: Vec<BackendKind> = list
            .split(',')
            .map(|s| parse_backend(s.trim()))
            .collect::<Result<_, _>>()?;
        if backends.len() < 2 {
            return Err(CliError::Config(
                "--compare needs at least two backends".into(),
            ));
        }
        let (outcomes, report) =
            compare(&config, &backends).map_err(|e| CliError::Runtime(e.to_string()))?;
        for outcome in &outcomes {
            emit_outcome(cli, outcome)?;
        }
        write_comparison(&report, &cli.out).map_err(|e| CliError::Runtime(e.to_string()))?;
        match cli.format.as_str() {
            "csv" => {
                for outcome in &outcomes {
                    println!("# backend={}", outcome.report.backend);
                    print!("{}", rounds_csv(&outcome.report.rounds));
                }
            }
            _ => println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            ),
        }
        return Ok(());
    }

    let trace = Trace::generate(&config);
    let outcome = run_backend_on_trace(&config, config.backend, &trace)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    emit_outcome(cli, &outcome)?;
    match cli.format.as_str() {
        "csv" => print!("{}", rounds_csv(&outcome.report.rounds)),
        _ => println!(
            "{}",
            serde_json::to_string_pretty(&outcome.report).expect("report serializes")
        ),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(message)) => {
            eprintln!("configuration error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("runtime error: {message}");
            ExitCode::from(2)
        }
    }
}
