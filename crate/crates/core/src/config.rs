//! Scenario configuration: strict JSON schema, field-level validation, and
//! the bundled reference scenarios.
//!
//! Unknown keys are a parse error so a typo in a config file cannot silently
//! fall back to a default. Validation collects every violated field rather
//! than stopping at the first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusionAlgorithm, FusionKind};
use crate::party::PartyBehavior;
use crate::rng::Distribution;
use crate::scaler::ScalerConfig;
use crate::topology::ContainerSpec;
use crate::trigger::{RoundPolicy, TriggerSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("unknown canned scenario {0:?}; available: {1}")]
    UnknownScenario(String, String),
}

/// Which aggregation architecture to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Centralized,
    StaticTree,
    Serverless,
}

impl BackendKind {
    pub fn label(&self) -> &'static str {
        match self {
            BackendKind::Centralized => "centralized",
            BackendKind::StaticTree => "static_tree",
            BackendKind::Serverless => "serverless",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "centralized" => Some(BackendKind::Centralized),
            "static_tree" => Some(BackendKind::StaticTree),
            "serverless" => Some(BackendKind::Serverless),
            _ => None,
        }
    }
}

/// A group of parties joining mid-run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinSpec {
    /// Round during which the group joins (1-based).
    pub round: u32,
    pub count: u32,
    /// Seconds after the round opens at which the join happens.
    pub offset_seconds: f64,
}

/// A group of parties leaving before a round starts.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaveSpec {
    /// First round the group no longer participates in (1-based).
    pub round: u32,
    pub count: u32,
}

/// Synthetic-task generation knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    /// Party optima are drawn uniformly from [-spread, spread]^d; larger
    /// values mean a more heterogeneous (non-IID) population.
    pub optimum_spread: f64,
    pub sample_count_min: u32,
    pub sample_count_max: u32,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            optimum_spread: 1.0,
            sample_count_min: 50,
            sample_count_max: 150,
        }
    }
}

/// Fault-injection knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FaultSpec {
    /// Probability that any serverless invocation crashes before publishing.
    pub invocation_crash_prob: f64,
    /// Kill one static-tree node mid-round to exercise recovery.
    pub static_node_kill: Option<NodeKillSpec>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeKillSpec {
    pub round: u32,
    pub offset_seconds: f64,
    /// Node index in the tree plan; defaults to the first internal node.
    pub node_index: Option<usize>,
}

/// Failure-detection constants for the static tree.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeartbeatSpec {
    pub interval_seconds: f64,
    pub timeout_beats: u32,
}

impl Default for HeartbeatSpec {
    fn default() -> Self {
        HeartbeatSpec {
            interval_seconds: 5.0,
            timeout_beats: 3,
        }
    }
}

/// Full experiment description. Every field has a default, so `{}` is a
/// valid config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub job_id: String,
    pub backend: BackendKind,
    pub parties: usize,
    pub fanout: usize,
    pub rounds: u32,
    pub model_dimension: usize,
    pub fusion: FusionAlgorithm,
    /// Local optimizer step size at the parties.
    pub local_eta: f64,
    /// Server optimizer step size.
    pub server_eta: f64,
    /// Fraction of parties asked to participate each round.
    pub sample_fraction: f64,
    /// Optional Gaussian noise on local gradients (off by default).
    pub gradient_noise_std: f64,
    pub trigger: TriggerSpec,
    pub round_policy: RoundPolicy,
    pub behavior: PartyBehavior,
    pub joins: Vec<JoinSpec>,
    pub leaves: Vec<LeaveSpec>,
    pub task: TaskSpec,
    pub compute: ContainerSpec,
    pub scaler: ScalerConfig,
    /// Always-on container equivalents for ancillary services (queue,
    /// metadata, object store), charged identically to every backend.
    pub ancillary_containers: f64,
    pub unit_price_usd_per_container_second: f64,
    /// Seconds between periodic trigger evaluations.
    pub trigger_eval_period_seconds: f64,
    pub heartbeat: HeartbeatSpec,
    /// Constant overlay re-wiring time added to static-tree reconfiguration.
    pub retopology_seconds: f64,
    pub fault: FaultSpec,
    pub seed: u64,
    pub horizon_seconds: f64,
    /// Record a broker trace (serverless backend only).
    pub record_broker_trace: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            job_id: "job1".to_string(),
            backend: BackendKind::Serverless,
            parties: 100,
            fanout: 10,
            rounds: 5,
            model_dimension: 16,
            fusion: FusionAlgorithm {
                kind: FusionKind::FedAvg,
                prox_mu: 0.0,
                local_epochs_tau: 1,
            },
            local_eta: 1.0,
            server_eta: 1.0,
            sample_fraction: 1.0,
            gradient_noise_std: 0.0,
            trigger: TriggerSpec::EveryKUpdates { k: 10 },
            round_policy: RoundPolicy::default(),
            behavior: PartyBehavior::default(),
            joins: Vec::new(),
            leaves: Vec::new(),
            task: TaskSpec::default(),
            compute: ContainerSpec::default(),
            scaler: ScalerConfig::default(),
            ancillary_containers: 1.0,
            unit_price_usd_per_container_second: 0.0002692,
            trigger_eval_period_seconds: 1.0,
            heartbeat: HeartbeatSpec::default(),
            retopology_seconds: 5.0,
            fault: FaultSpec::default(),
            seed: 42,
            horizon_seconds: crate::kernel::DEFAULT_HORIZON,
            record_broker_trace: false,
        }
    }
}

impl ScenarioConfig {
    /// Parses and validates a config file.
    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: ScenarioConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Checks every invariant, collecting all violations.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        if self.job_id.is_empty() {
            errors.push("job_id: must not be empty".to_string());
        }
        if self.parties < 1 {
            errors.push(format!("parties: must be >= 1, got {}", self.parties));
        }
        if self.fanout < 2 {
            errors.push(format!("fanout: must be >= 2, got {}", self.fanout));
        }
        if self.rounds < 1 {
            errors.push(format!("rounds: must be >= 1, got {}", self.rounds));
        }
        if self.model_dimension < 1 {
            errors.push(format!(
                "model_dimension: must be >= 1, got {}",
                self.model_dimension
            ));
        }
        if let Err(e) = self.fusion.validate() {
            errors.push(format!("fusion: {e}"));
        }
        if self.local_eta <= 0.0 || !self.local_eta.is_finite() {
            errors.push(format!(
                "local_eta: must be positive, got {}",
                self.local_eta
            ));
        }
        if self.server_eta <= 0.0 || !self.server_eta.is_finite() {
            errors.push(format!(
                "server_eta: must be positive, got {}",
                self.server_eta
            ));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            errors.push(format!(
                "sample_fraction: must lie in (0, 1], got {}",
                self.sample_fraction
            ));
        }
        if self.gradient_noise_std < 0.0 || !self.gradient_noise_std.is_finite() {
            errors.push("gradient_noise_std: must be non-negative".to_string());
        }
        if let Err(e) = self.trigger.validate() {
            errors.push(format!("trigger: {e}"));
        }
        if let Err(e) = self.round_policy.validate() {
            errors.push(format!("round_policy: {e}"));
        }
        if let Err(e) = self.behavior.think_time.validate() {
            errors.push(format!("behavior.think_time: {e}"));
        }
        if !(0.0..1.0).contains(&self.behavior.dropout_prob) {
            errors.push(format!(
                "behavior.dropout_prob: must lie in [0, 1), got {}",
                self.behavior.dropout_prob
            ));
        }
        for (i, join) in self.joins.iter().enumerate() {
            if join.round < 1 || join.round > self.rounds {
                errors.push(format!(
                    "joins[{i}].round: out of range 1..={}",
                    self.rounds
                ));
            }
            if join.count == 0 {
                errors.push(format!("joins[{i}].count: must be >= 1"));
            }
            if join.offset_seconds < 0.0 || !join.offset_seconds.is_finite() {
                errors.push(format!("joins[{i}].offset_seconds: must be non-negative"));
            }
        }
        let leaving: u64 = self.leaves.iter().map(|l| l.count as u64).sum();
        if leaving >= self.parties as u64 {
            errors.push("leaves: cannot remove every party".to_string());
        }
        for (i, leave) in self.leaves.iter().enumerate() {
            if leave.round < 1 || leave.round > self.rounds {
                errors.push(format!(
                    "leaves[{i}].round: out of range 1..={}",
                    self.rounds
                ));
            }
        }
        if self.task.sample_count_min < 1 || self.task.sample_count_min > self.task.sample_count_max
        {
            errors.push("task: requires 1 <= sample_count_min <= sample_count_max".to_string());
        }
        if self.task.optimum_spread < 0.0 || !self.task.optimum_spread.is_finite() {
            errors.push("task.optimum_spread: must be non-negative".to_string());
        }
        if let Err(e) = self.compute.validate() {
            errors.push(format!("compute: {e}"));
        }
        if let Err(e) = self.scaler.validate() {
            errors.push(format!("scaler: {e}"));
        }
        if self.ancillary_containers < 0.0 || !self.ancillary_containers.is_finite() {
            errors.push("ancillary_containers: must be non-negative".to_string());
        }
        if self.unit_price_usd_per_container_second < 0.0 {
            errors.push("unit_price_usd_per_container_second: must be non-negative".to_string());
        }
        if self.trigger_eval_period_seconds <= 0.0 || !self.trigger_eval_period_seconds.is_finite()
        {
            errors.push("trigger_eval_period_seconds: must be positive".to_string());
        }
        if self.heartbeat.interval_seconds <= 0.0 || self.heartbeat.timeout_beats == 0 {
            errors.push("heartbeat: interval must be positive and timeout_beats >= 1".to_string());
        }
        if self.retopology_seconds < 0.0 || !self.retopology_seconds.is_finite() {
            errors.push("retopology_seconds: must be non-negative".to_string());
        }
        if !(0.0..=1.0).contains(&self.fault.invocation_crash_prob) {
            errors.push("fault.invocation_crash_prob: must lie in [0, 1]".to_string());
        }
        if self.horizon_seconds <= 0.0 || !self.horizon_seconds.is_finite() {
            errors.push("horizon_seconds: must be positive".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    pub fn to_pretty_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    pub fn topic_agg(&self) -> String {
        format!("{}-Agg", self.job_id)
    }

    pub fn topic_parties(&self) -> String {
        format!("{}-Parties", self.job_id)
    }
}

pub const CANNED_SCENARIOS: [&str; 4] = [
    "paper-latency-scaling",
    "paper-joins",
    "paper-active-cost",
    "paper-intermittent-cost",
];

/// Returns a bundled scenario by name.
///
/// * `paper-latency-scaling` — constant-pace parties at the largest scale;
///   used to compare latency growth of the three architectures.
/// * `paper-joins` — a single round with a 20% party join burst mid-round.
/// * `paper-active-cost` — actively participating parties; cost comparison.
/// * `paper-intermittent-cost` — parties respond over a 10-minute window.
pub fn canned_scenario(name: &str) -> Result<ScenarioConfig, ConfigError> {
    let base = ScenarioConfig::default();
    let config = match name {
        "paper-latency-scaling" => ScenarioConfig {
            job_id: "latency-scaling".to_string(),
            parties: 10_000,
            fanout: 10,
            rounds: 50,
            model_dimension: 8,
            behavior: PartyBehavior {
                think_time: Distribution::Constant { c: 10.0 },
                dropout_prob: 0.0,
            },
            trigger: TriggerSpec::EveryKUpdates { k: 10 },
            ..base
        },
        "paper-joins" => ScenarioConfig {
            job_id: "joins".to_string(),
            parties: 1000,
            fanout: 10,
            rounds: 1,
            model_dimension: 8,
            behavior: PartyBehavior {
                think_time: Distribution::Constant { c: 10.0 },
                dropout_prob: 0.0,
            },
            joins: vec![JoinSpec {
                round: 1,
                count: 200,
                offset_seconds: 5.0,
            }],
            trigger: TriggerSpec::EveryKUpdates { k: 10 },
            ..base
        },
        "paper-active-cost" => ScenarioConfig {
            job_id: "active-cost".to_string(),
            parties: 1000,
            fanout: 10,
            rounds: 50,
            model_dimension: 8,
            behavior: PartyBehavior {
                think_time: Distribution::Uniform { a: 60.0, b: 180.0 },
                dropout_prob: 0.0,
            },
            round_policy: RoundPolicy {
                response_timeout_seconds: 600.0,
                ..RoundPolicy::default()
            },
            trigger: TriggerSpec::EveryKUpdates { k: 10 },
            ..base
        },
        "paper-intermittent-cost" => ScenarioConfig {
            job_id: "intermittent-cost".to_string(),
            parties: 1000,
            fanout: 10,
            rounds: 50,
            model_dimension: 8,
            behavior: PartyBehavior {
                think_time: Distribution::Uniform { a: 0.0, b: 600.0 },
                dropout_prob: 0.0,
            },
            round_policy: RoundPolicy {
                response_timeout_seconds: 600.0,
                ..RoundPolicy::default()
            },
            trigger: TriggerSpec::EveryKUpdates { k: 10 },
            ..base
        },
        other => {
            return Err(ConfigError::UnknownScenario(
                other.to_string(),
                CANNED_SCENARIOS.join(", "),
            ))
        }
    };
    config.validate()?;
    Ok(config)
}
