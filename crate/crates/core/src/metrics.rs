//! Run measurement: per-round records, run-level summaries, projected cost
//! and savings arithmetic, and deterministic report files.
//!
//! Costs follow the container-second model: total container-seconds times a
//! unit price, rounded half-up to two decimals for presentation. Reports are
//! written with a stable field order so reruns under the same seed produce
//! byte-identical files.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("negative input to cost projection: {0}")]
    NegativeInput(f64),
    #[error("savings require a positive baseline cost, got {0}")]
    ZeroBaseline(f64),
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
}

/// Measurements of one synchronization round.
#[derive(Debug, Clone, Serialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// Time from the last accepted update to publication of the fused model.
    pub latency_seconds: f64,
    pub accepted_updates: u32,
    pub discarded_late: u32,
    pub invocations: u32,
    pub crashes: u32,
    pub reconfig_events: u32,
}

/// Run-level summary for one backend.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub backend: String,
    pub seed: u64,
    pub rounds_completed: u32,
    /// Aggregation latency averaged over all rounds.
    pub mean_latency_seconds: f64,
    pub container_seconds: f64,
    pub projected_cost_usd: f64,
    /// Busy time over alive time across all containers.
    pub utilization_proxy: f64,
    pub final_model_distance_to_optimum: f64,
    pub run_duration_seconds: f64,
    pub rounds: Vec<RoundMetrics>,
}

impl RunReport {
    pub fn mean_latency(rounds: &[RoundMetrics]) -> f64 {
        if rounds.is_empty() {
            return 0.0;
        }
        rounds.iter().map(|r| r.latency_seconds).sum::<f64>() / rounds.len() as f64
    }
}

/// Side-by-side comparison of several backends over one recorded trace.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub backends: Vec<RunReport>,
    /// Savings of the last backend versus the first, when both exist.
    pub cost_savings_percent: Option<f64>,
    pub container_second_savings_percent: Option<f64>,
    pub mean_latency_ratio: Option<f64>,
}

/// `container_seconds * unit_price`, rounded half-up to 2 decimals.
pub fn project_cost(container_seconds: f64, unit_price: f64) -> Result<f64, MetricsError> {
    if container_seconds < 0.0 {
        return Err(MetricsError::NegativeInput(container_seconds));
    }
    if unit_price < 0.0 {
        return Err(MetricsError::NegativeInput(unit_price));
    }
    Ok(round2(container_seconds * unit_price))
}

/// `100 * (static - serverless) / static`, rounded half-up to 2 decimals.
pub fn savings_percent(static_cost: f64, serverless_cost: f64) -> Result<f64, MetricsError> {
    if static_cost <= 0.0 {
        return Err(MetricsError::ZeroBaseline(static_cost));
    }
    Ok(round2(
        100.0 * (static_cost - serverless_cost) / static_cost,
    ))
}

/// Round half-up to two decimals (matching printed cost tables).
pub fn round2(value: f64) -> f64 {
    (value * 100.0 + 0.5).floor() / 100.0
}

pub const ROUNDS_CSV_HEADER: &str =
    "round,latency_s,accepted,discarded,invocations,crashes,reconfigs";

/// Renders the per-round table as CSV with the stable header above.
pub fn rounds_csv(rounds: &[RoundMetrics]) -> String {
    let mut out = String::from(ROUNDS_CSV_HEADER);
    out.push('\n');
    for r in rounds {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            r.latency_seconds,
            r.accepted_updates,
            r.discarded_late,
            r.invocations,
            r.crashes,
            r.reconfig_events
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes `<backend>-summary.json` and `<backend>-rounds.csv` into `dir`.
/// Returns the summary path.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<std::path::PathBuf, MetricsError> {
    std::fs::create_dir_all(dir)?;
    let summary_path = dir.join(format!("{}-summary.json", report.backend));
    let mut summary = std::fs::File::create(&summary_path)?;
    summary.write_all(
        serde_json::to_string_pretty(report)
            .expect("report serializes")
            .as_bytes(),
    )?;
    summary.write_all(b"\n")?;
    let csv_path = dir.join(format!("{}-rounds.csv", report.backend));
    std::fs::write(csv_path, rounds_csv(&report.rounds))?;
    Ok(summary_path)
}

/// Writes `comparison.json` into `dir`.
pub fn write_comparison(
    report: &ComparisonReport,
    dir: &Path,
) -> Result<std::path::PathBuf, MetricsError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("comparison.json");
    let mut file = std::fs::File::create(&path)?;
    file.write_all(
        serde_json::to_string_pretty(report)
            .expect("report serializes")
            .as_bytes(),
    )?;
    file.write_all(b"\n")?;
    Ok(path)
}
