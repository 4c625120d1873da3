//! Deterministic discrete-event simulator for federated-learning aggregation
//! architectures.
//!
//! Three backends — a centralized aggregator, a statically deployed k-ary
//! aggregation tree, and queue-triggered ephemeral ("serverless") aggregation
//! functions — run the same associative weighted-averaging mathematics over
//! emulated parties, so their latency, elasticity and container-second cost
//! can be compared on identical, replayable party traces.
//!
//! Entry points: [`config::ScenarioConfig`] describes an experiment,
//! [`scenario::run_scenario`] executes it, [`scenario::compare`] replays one
//! recorded trace across several backends.

pub mod broker;
pub mod config;
pub mod fusion;
pub mod kernel;
pub mod metrics;
pub mod party;
pub mod rng;
pub mod scaler;
pub mod scenario;
pub mod topology;
pub mod trigger;

pub use config::{BackendKind, ScenarioConfig};
pub use fusion::{GlobalModel, ModelUpdate, PartialAggregate, WeightVector};
pub use kernel::{Kernel, SimError, VirtualTime};
pub use metrics::{ComparisonReport, RoundMetrics, RunReport};
pub use rng::{Distribution, RngStream};
pub use scenario::{compare, run_scenario, RunOutcome};
