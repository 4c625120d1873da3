//! End-to-end scenario execution: party trace recording and the three
//! aggregation backends (centralized, static tree, serverless).
//!
//! The party-side randomness (tasks, think times, dropouts, sampling) is
//! drawn once into a [`Trace`] before any backend runs, so a comparison run
//! feeds the identical submission schedule to every backend. Backend-side
//! randomness (invocation crashes) lives on its own stream and never touches
//! the trace.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::broker::{
    Broker, BrokerError, InvocationId, MessageFilter, Payload, PayloadKind, Role, TopicAcl,
};
use crate::config::{BackendKind, ScenarioConfig};
use crate::fusion::{
    self, FusionError, GlobalModel, ModelUpdate, PartialAggregate, UpdateId, WeightVector,
};
use crate::kernel::{Kernel, SimError, VirtualTime};
use crate::metrics::{ComparisonReport, RoundMetrics, RunReport};
use crate::party::{self, Submission, SyntheticTask};
use crate::rng::RngStream;
use crate::scaler::{PodId, PodPool};
use crate::topology::{self, TreePlan};
use crate::trigger::{BrokerView, TriggerDecision, TriggerSpec};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("fusion failure: {0}")]
    Fusion(#[from] FusionError),
    #[error("broker failure: {0}")]
    Broker(#[from] BrokerError),
    #[error("topology failure: {0}")]
    Topology(#[from] topology::TopologyError),
    #[error("round {round} missed quorum: {responded} of {expected} parties responded")]
    QuorumFailed {
        round: u32,
        responded: usize,
        expected: usize,
    },
    #[error("exactly-once violation in round {round}: {detail}")]
    ExactlyOnce { round: u32, detail: String },
}

// ---------------------------------------------------------------------------
// Trace: everything the parties will do, drawn up front.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TraceParty {
    pub task: SyntheticTask,
    /// First round this party participates in (1-based).
    pub active_from: u32,
    /// First round this party no longer participates in.
    pub leaves_at: Option<u32>,
    /// Mid-round join: (round, offset from round open).
    pub join: Option<(u32, f64)>,
}

#[derive(Debug, Clone)]
pub struct TraceRound {
    /// Parties expected to participate (active and sampled); dropouts are
    /// still expected — the aggregator cannot know they will stay silent.
    pub eligible: Vec<bool>,
    /// Submission offset from round open; `None` for ineligible or dropout.
    pub submissions: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub parties: Vec<TraceParty>,
    pub rounds: Vec<TraceRound>,
}

impl Trace {
    pub fn generate(config: &ScenarioConfig) -> Trace {
        let mut optima = RngStream::new(config.seed, "party-optima");
        let mut samples = RngStream::new(config.seed, "party-samples");
        let mut behavior = RngStream::new(config.seed, "party-behavior");
        let mut sampling = RngStream::new(config.seed, "party-sampling");

        let mut parties: Vec<TraceParty> = Vec::new();
        let spread = config.task.optimum_spread;
        let mut push_party = |active_from: u32,
                              join: Option<(u32, f64)>,
                              optima: &mut RngStream,
                              samples: &mut RngStream| {
            let optimum = WeightVector(
                (0..config.model_dimension)
                    .map(|_| optima.next_f64() * 2.0 * spread - spread)
                    .collect(),
            );
            let sample_count =
                samples.next_range_u32(config.task.sample_count_min, config.task.sample_count_max);
            parties.push(TraceParty {
                task: SyntheticTask {
                    optimum,
                    sample_count,
                },
                active_from,
                leaves_at: None,
                join,
            });
        };

        for _ in 0..config.parties {
            push_party(1, None, &mut optima, &mut samples);
        }
        for join in &config.joins {
            for _ in 0..join.count {
                push_party(
                    join.round,
                    Some((join.round, join.offset_seconds)),
                    &mut optima,
                    &mut samples,
                );
            }
        }
        // Departures peel off the highest-indexed original parties.
        let mut next_leaver = config.parties;
        for leave in &config.leaves {
            for _ in 0..leave.count {
                if next_leaver == 0 {
                    break;
                }
                next_leaver -= 1;
                parties[next_leaver].leaves_at = Some(leave.round);
            }
        }

        let mut rounds = Vec::with_capacity(config.rounds as usize);
        for round in 1..=config.rounds {
            let mut eligible = vec![false; parties.len()];
            let mut submissions = vec![None; parties.len()];
            for (idx, p) in parties.iter().enumerate() {
                let active =
                    p.active_from <= round && p.leaves_at.is_none_or(|leave| round < leave);
                if !active {
                    continue;
                }
                let sampled =
                    config.sample_fraction >= 1.0 || sampling.next_f64() < config.sample_fraction;
                if !sampled {
                    continue;
                }
                eligible[idx] = true;
                let base = if p.join.is_some_and(|(jr, _)| jr == round) {
                    p.join.unwrap().1
                } else {
                    0.0
                };
                if let Submission::At(offset) =
                    party::submit_schedule(&config.behavior, &mut behavior)
                {
                    submissions[idx] = Some(base + offset);
                }
            }
            rounds.push(TraceRound {
                eligible,
                submissions,
            });
        }
        Trace { parties, rounds }
    }

    fn round(&self, round: u32) -> &TraceRound {
        &self.rounds[(round - 1) as usize]
    }

    /// Parties that joined mid-round in the given round.
    fn joiners_of_round(&self, round: u32) -> Vec<usize> {
        self.parties
            .iter()
            .enumerate()
            .filter(|(_, p)| p.join.is_some_and(|(jr, _)| jr == round))
            .map(|(idx, _)| idx)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Events shared by all backends.
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum Ev {
    /// A party submits its round-`round` update.
    Submit {
        party: u32,
        round: u32,
    },
    /// A party joins mid-round.
    Join {
        round: u32,
    },
    /// Response deadline of a round.
    CloseTimeout {
        round: u32,
    },
    /// Deferred trigger evaluation (serverless).
    Sweep,
    /// Periodic trigger evaluation (serverless).
    TriggerTick,
    /// Cadence boundary for time-based triggers (serverless).
    TriggerPeriod {
        round: u32,
    },
    /// Serverless invocation completes (successfully or by crashing).
    InvocationDone {
        invocation: u64,
    },
    /// Scaler idle-timeout check.
    PodExpire,
    /// Centralized aggregation finished.
    CentralDone {
        round: u32,
    },
    /// Static node finished folding its inputs.
    NodeDone {
        node: usize,
        round: u32,
        epoch: u32,
    },
    /// Static node crash and recovery.
    NodeKill {
        node: usize,
    },
    NodeRestart {
        node: usize,
    },
    /// Static root publishes the fused model (after any reconfiguration delay).
    RootPublish {
        round: u32,
    },
}

// ---------------------------------------------------------------------------
// Shared run state.
// ---------------------------------------------------------------------------

struct RoundCounters {
    invocations: u32,
    crashes: u32,
    reconfigs: u32,
    discarded_late: u32,
}

impl RoundCounters {
    fn new() -> Self {
        RoundCounters {
            invocations: 0,
            crashes: 0,
            reconfigs: 0,
            discarded_late: 0,
        }
    }
}

struct Common {
    config: ScenarioConfig,
    trace: Trace,
    model: GlobalModel,
    round: u32,
    round_open_at: VirtualTime,
    closed: bool,
    /// Parties that submitted an accepted update this round.
    responded: BTreeSet<u32>,
    /// Update ids frozen at round close; what the fused model must cover.
    accepted: Vec<UpdateId>,
    last_accept_at: VirtualTime,
    expected: usize,
    counters: RoundCounters,
    rounds_out: Vec<RoundMetrics>,
    finished: bool,
    run_end: VirtualTime,
    /// Aggregation compute time, for the utilization proxy.
    busy_seconds: f64,
}

impl Common {
    fn new(config: &ScenarioConfig, trace: &Trace) -> Common {
        Common {
            config: config.clone(),
            trace: trace.clone(),
            model: GlobalModel {
                round: 1,
                weights: WeightVector::zeros(config.model_dimension),
                learning_rate: config.server_eta,
            },
            round: 0,
            round_open_at: VirtualTime::ZERO,
            closed: false,
            responded: BTreeSet::new(),
            accepted: Vec::new(),
            last_accept_at: VirtualTime::ZERO,
            expected: 0,
            counters: RoundCounters::new(),
            rounds_out: Vec::new(),
            finished: false,
            run_end: VirtualTime::ZERO,
            busy_seconds: 0.0,
        }
    }

    /// Effective response deadline for the current round.
    fn deadline(&self) -> f64 {
        match &self.config.trigger {
            TriggerSpec::Quorum {
                max_wait_seconds, ..
            } => *max_wait_seconds,
            _ => self.config.round_policy.response_timeout_seconds,
        }
    }

    fn should_close(&self, now: VirtualTime) -> bool {
        let since_open = now.seconds() - self.round_open_at.seconds();
        match &self.config.trigger {
            TriggerSpec::Quorum {
                fraction,
                max_wait_seconds,
            } => {
                since_open >= *max_wait_seconds
                    || self.expected > 0
                        && self.responded.len() >= (fraction * self.expected as f64).ceil() as usize
            }
            _ => self.config.round_policy.should_close(
                self.responded.len(),
                self.expected,
                since_open,
            ),
        }
    }

    fn close_round(&mut self) -> Result<(), ScenarioError> {
        debug_assert!(!self.closed);
        self.closed = true;
        self.accepted = self
            .responded
            .iter()
            .map(|&p| UpdateId::new(p, self.round))
            .collect();
        let quorum_needed = self.config.round_policy.quorum_count(self.expected);
        if self.config.round_policy.fail_on_no_quorum && self.responded.len() < quorum_needed {
            return Err(ScenarioError::QuorumFailed {
                round: self.round,
                responded: self.responded.len(),
                expected: self.expected,
            });
        }
        Ok(())
    }

    fn record_round(&mut self, now: VirtualTime) {
        let latency = if self.accepted.is_empty() {
            0.0
        } else {
            now.seconds() - self.last_accept_at.seconds()
        };
        debug_assert!(latency >= 0.0);
        self.rounds_out.push(RoundMetrics {
            round: self.round,
            latency_seconds: latency,
            accepted_updates: self.accepted.len() as u32,
            discarded_late: self.counters.discarded_late,
            invocations: self.counters.invocations,
            crashes: self.counters.crashes,
            reconfig_events: self.counters.reconfigs,
        });
    }

    fn train_update(&self, party: u32, now: VirtualTime) -> Result<ModelUpdate, ScenarioError> {
        self.train_update_for_round(party, now, self.model.round)
    }

    /// Builds an update tagged for a specific round. Stale submissions keep
    /// their original round tag so they can never leak into a later round.
    fn train_update_for_round(
        &self,
        party: u32,
        now: VirtualTime,
        round: u32,
    ) -> Result<ModelUpdate, ScenarioError> {
        let task = &self.trace.parties[party as usize].task;
        let mut noise_rng = if self.config.gradient_noise_std > 0.0 {
            Some(RngStream::new(
                self.config.seed ^ ((party as u64) << 20) ^ self.round as u64,
                "party-grad-noise",
            ))
        } else {
            None
        };
        let mut update = party::local_train(
            party,
            &self.model,
            task,
            &self.config.fusion,
            self.config.local_eta,
            self.config.gradient_noise_std,
            noise_rng.as_mut(),
        )
        .map_err(|e| SimError::Handler {
            at: now.seconds(),
            message: e.to_string(),
        })?;
        update.submitted_at = now;
        update.round = round;
        update.update_id = crate::fusion::UpdateId::new(party, round);
        Ok(update)
    }

    /// Tasks of parties participating in the final round, for the
    /// convergence summary in the report.
    fn final_round_tasks(&self) -> Vec<SyntheticTask> {
        let last = self.trace.rounds.last().expect("at least one round");
        self.trace
            .parties
            .iter()
            .zip(last.eligible.iter())
            .filter(|(_, &e)| e)
            .map(|(p, _)| p.task.clone())
            .collect()
    }

    fn build_report(
        &self,
        backend: BackendKind,
        container_seconds: f64,
        utilization: f64,
    ) -> RunReport {
        let mean_latency = RunReport::mean_latency(&self.rounds_out);
        let cost = crate::metrics::project_cost(
            container_seconds,
            self.config.unit_price_usd_per_container_second,
        )
        .unwrap_or(0.0);
        RunReport {
            backend: backend.label().to_string(),
            seed: self.config.seed,
            rounds_completed: self.rounds_out.len() as u32,
            mean_latency_seconds: mean_latency,
            container_seconds,
            projected_cost_usd: cost,
            utilization_proxy: utilization,
            final_model_distance_to_optimum: party::convergence_distance(
                &self.model,
                &self.final_round_tasks(),
            ),
            run_duration_seconds: self.run_end.seconds(),
            rounds: self.rounds_out.clone(),
        }
    }
}

/// Result of one backend run.
pub struct RunOutcome {
    pub report: RunReport,
    pub final_model: GlobalModel,
    pub broker_trace: Option<String>,
}

// ---------------------------------------------------------------------------
// Centralized backend.
// ---------------------------------------------------------------------------

struct CentralizedWorld {
    common: Common,
    buffer: Vec<ModelUpdate>,
}

impl CentralizedWorld {
    fn open_round(&mut self, kernel: &mut Kernel<Ev>, round: u32) -> Result<(), ScenarioError> {
        let now = kernel.now();
        self.common.round = round;
        self.common.round_open_at = now;
        self.common.closed = false;
        self.common.responded.clear();
        self.common.accepted.clear();
        self.common.counters = RoundCounters::new();
        self.buffer.clear();

        let schedule = self.common.trace.round(round).clone();
        self.common.expected = schedule.eligible.iter().filter(|&&e| e).count();
        for (idx, offset) in schedule.submissions.iter().enumerate() {
            if let Some(offset) = offset {
                kernel.schedule(
                    now.offset(*offset)?,
                    Ev::Submit {
                        party: idx as u32,
                        round,
                    },
                )?;
            }
        }
        kernel.schedule(
            now.offset(self.common.deadline())?,
            Ev::CloseTimeout { round },
        )?;
        Ok(())
    }

    fn maybe_close(&mut self, kernel: &mut Kernel<Ev>) -> Result<(), ScenarioError> {
        let now = kernel.now();
        if self.common.closed || !self.common.should_close(now) {
            return Ok(());
        }
        self.common.close_round()?;
        if self.common.accepted.is_empty() {
            self.finish_round(kernel, self.common.model.weights.clone())?;
            return Ok(());
        }
        let spec = &self.common.config.compute;
        let duration =
            self.buffer.len() as f64 * spec.per_update_cpu_seconds + spec.finalize_cpu_seconds;
        self.common.busy_seconds += duration;
        self.common.counters.invocations += 1;
        let round = self.common.round;
        kernel.schedule(now.offset(duration)?, Ev::CentralDone { round })?;
        Ok(())
    }

    fn finish_round(
        &mut self,
        kernel: &mut Kernel<Ev>,
        new_weights: WeightVector,
    ) -> Result<(), ScenarioError> {
        let now = kernel.now();
        self.common.record_round(now);
        self.common.model = GlobalModel {
            round: self.common.round + 1,
            weights: new_weights,
            learning_rate: self.common.config.server_eta,
        };
        if self.common.round < self.common.config.rounds {
            let next = self.common.round + 1;
            self.open_round(kernel, next)?;
        } else {
            self.common.finished = true;
            self.common.run_end = now;
        }
        Ok(())
    }

    fn handle(&mut self, kernel: &mut Kernel<Ev>, ev: Ev) -> Result<(), ScenarioError> {
        match ev {
            Ev::Submit { party, round } => {
                if round != self.common.round || self.common.closed {
                    self.common.counters.discarded_late += 1;
                    return Ok(());
                }
                let update = self.common.train_update(party, kernel.now())?;
                self.buffer.push(update);
                self.common.responded.insert(party);
                self.common.last_accept_at = kernel.now();
                self.maybe_close(kernel)?;
            }
            Ev::CloseTimeout { round } => {
                if round == self.common.round && !self.common.closed && !self.common.finished {
                    self.maybe_close(kernel)?;
                }
            }
            Ev::CentralDone { round } => {
                if round != self.common.round {
                    return Ok(());
                }
                let partial = fusion::leaf_aggregate(&self.buffer)?;
                self.verify_coverage(&partial)?;
                let next = fusion::finalize(&partial, &self.common.model)?;
                self.finish_round(kernel, next.weights)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn verify_coverage(&self, partial: &PartialAggregate) -> Result<(), ScenarioError> {
        if partial.contributors != self.common.accepted {
            return Err(ScenarioError::ExactlyOnce {
                round: self.common.round,
                detail: format!(
                    "root covers {} updates, round accepted {}",
                    partial.contributors.len(),
                    self.common.accepted.len()
                ),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Static tree backend.
// ---------------------------------------------------------------------------

struct NodeRt {
    alive: bool,
    epoch: u32,
    computing: bool,
    done_this_round: bool,
    /// Raw updates buffered at a leaf.
    buffer: Vec<ModelUpdate>,
    /// Child partials received by an internal node, deduplicated by child id.
    received: BTreeMap<usize, PartialAggregate>,
    /// This node's own output for the round, kept for retransmission.
    output: Option<PartialAggregate>,
}

impl NodeRt {
    fn fresh() -> NodeRt {
        NodeRt {
            alive: true,
            epoch: 0,
            computing: false,
            done_this_round: false,
            buffer: Vec::new(),
            received: BTreeMap::new(),
            output: None,
        }
    }

    fn reset_for_round(&mut self) {
        self.computing = false;
        self.done_this_round = false;
        self.buffer.clear();
        self.received.clear();
        self.output = None;
    }
}

struct StaticWorld {
    common: Common,
    plan: TreePlan,
    nodes: Vec<NodeRt>,
    /// Parties per leaf expected this round (eligible ones).
    leaf_expected: Vec<usize>,
    /// Reconfiguration delay charged to the current round.
    pending_reconfig_delay: f64,
    reconfigured_this_round: bool,
    /// Plan to switch to at the end of the round.
    next_plan: Option<TreePlan>,
    /// Container-second accounting: integral of alive node count.
    node_seconds: f64,
    node_count_alive: usize,
    node_count_since: VirtualTime,
}

impl StaticWorld {
    fn accrue_nodes(&mut self, now: VirtualTime) {
        self.node_seconds +=
            self.node_count_alive as f64 * (now.seconds() - self.node_count_since.seconds());
        self.node_count_since = now;
    }

    fn set_alive_count(&mut self, now: VirtualTime, count: usize) {
        self.accrue_nodes(now);
        self.node_count_alive = count;
    }

    fn open_round(&mut self, kernel: &mut Kernel<Ev>, round: u32) -> Result<(), ScenarioError> {
        let now = kernel.now();
        if let Some(plan) = self.next_plan.take() {
            // The reconfigured overlay becomes effective at the round boundary.
            self.plan = plan;
            self.nodes = (0..self.plan.node_count())
                .map(|_| NodeRt::fresh())
                .collect();
            self.set_alive_count(now, self.plan.node_count());
        }
        self.common.round = round;
        self.common.round_open_at = now;
        self.common.closed = false;
        self.common.responded.clear();
        self.common.accepted.clear();
        self.common.counters = RoundCounters::new();
        self.pending_reconfig_delay = 0.0;
        self.reconfigured_this_round = false;
        for node in &mut self.nodes {
            node.reset_for_round();
        }

        let schedule = self.common.trace.round(round).clone();
        let joiners: BTreeSet<usize> = self
            .common
            .trace
            .joiners_of_round(round)
            .into_iter()
            .collect();
        // Joining parties receive the model at the next round boundary, so
        // they neither submit nor count toward quorum this round.
        self.common.expected = schedule
            .eligible
            .iter()
            .enumerate()
            .filter(|(idx, &e)| e && !joiners.contains(idx))
            .count();
        self.leaf_expected = vec![0; self.plan.node_count()];
        for (idx, &eligible) in schedule.eligible.iter().enumerate() {
            if !eligible || joiners.contains(&idx) {
                continue;
            }
            if let Some(leaf) = self.plan.leaf_of(idx as u32) {
                self.leaf_expected[leaf] += 1;
            }
        }
        for (idx, offset) in schedule.submissions.iter().enumerate() {
            if joiners.contains(&idx) {
                continue;
            }
            if let Some(offset) = offset {
                kernel.schedule(
                    now.offset(*offset)?,
                    Ev::Submit {
                        party: idx as u32,
                        round,
                    },
                )?;
            }
        }
        for &idx in &joiners {
            let (_, offset) = self.common.trace.parties[idx].join.expect("joiner");
            kernel.schedule(now.offset(offset)?, Ev::Join { round })?;
        }
        if let Some(kill) = self.common.config.fault.static_node_kill {
            if kill.round == round {
                let node = kill
                    .node_index
                    .unwrap_or_else(|| self.default_kill_target());
                if node < self.plan.node_count() {
                    kernel.schedule(now.offset(kill.offset_seconds)?, Ev::NodeKill { node })?;
                }
            }
        }
        kernel.schedule(
            now.offset(self.common.deadline())?,
            Ev::CloseTimeout { round },
        )?;
        Ok(())
    }

    /// First internal (non-leaf, non-root) node, or the root of a tiny tree.
    fn default_kill_target(&self) -> usize {
        self.plan
            .nodes
            .iter()
            .find(|n| !n.is_leaf() && n.id != self.plan.root)
            .map(|n| n.id)
            .unwrap_or(self.plan.root)
    }

    fn fire_node(&mut self, kernel: &mut Kernel<Ev>, node: usize) -> Result<(), ScenarioError> {
        let rt = &self.nodes[node];
        if !rt.alive || rt.computing || rt.done_this_round {
            return Ok(());
        }
        let plan_node = &self.plan.nodes[node];
        let inputs = if plan_node.is_leaf() {
            rt.buffer.len()
        } else {
            rt.received.len()
        };
        let mut duration = inputs as f64 * self.common.config.compute.per_update_cpu_seconds;
        if node == self.plan.root {
            duration += self.common.config.compute.finalize_cpu_seconds;
        }
        self.common.busy_seconds += duration;
        self.common.counters.invocations += 1;
        let rt = &mut self.nodes[node];
        rt.computing = true;
        let epoch = rt.epoch;
        let round = self.common.round;
        kernel.schedule(
            kernel.now().offset(duration)?,
            Ev::NodeDone { node, round, epoch },
        )?;
        Ok(())
    }

    /// A leaf is ready early when every expected party reported.
    fn leaf_ready(&self, leaf: usize) -> bool {
        self.nodes[leaf].buffer.len() >= self.leaf_expected[leaf] && self.leaf_expected[leaf] > 0
    }

    /// An internal node is ready when all its children delivered.
    fn internal_ready(&self, node: usize) -> bool {
        self.nodes[node].received.len() == self.plan.nodes[node].children.len()
    }

    fn maybe_close(&mut self, kernel: &mut Kernel<Ev>) -> Result<(), ScenarioError> {
        let now = kernel.now();
        if self.common.closed || !self.common.should_close(now) {
            return Ok(());
        }
        self.common.close_round()?;
        if self.common.accepted.is_empty() {
            let weights = self.common.model.weights.clone();
            self.finish_round(kernel, weights)?;
            return Ok(());
        }
        // Flush every leaf that has not fired yet, even if some of its
        // parties never responded (missing updates are simply absent).
        for leaf in self.plan.leaves.clone() {
            if !self.nodes[leaf].done_this_round && !self.nodes[leaf].computing {
                self.fire_node(kernel, leaf)?;
            }
        }
        Ok(())
    }

    fn forward_output(
        &mut self,
        kernel: &mut Kernel<Ev>,
        node: usize,
        partial: PartialAggregate,
    ) -> Result<(), ScenarioError> {
        self.nodes[node].output = Some(partial.clone());
        self.nodes[node].done_this_round = true;
        if node == self.plan.root {
            let publish_delay = self.pending_reconfig_delay;
            let round = self.common.round;
            kernel.schedule(
                kernel.now().offset(publish_delay)?,
                Ev::RootPublish { round },
            )?;
            return Ok(());
        }
        let parent = self.plan.nodes[node].parent.expect("non-root node");
        self.nodes[parent].received.entry(node).or_insert(partial);
        if self.nodes[parent].alive && self.internal_ready(parent) {
            self.fire_node(kernel, parent)?;
        }
        Ok(())
    }

    fn finish_round(
        &mut self,
        kernel: &mut Kernel<Ev>,
        new_weights: WeightVector,
    ) -> Result<(), ScenarioError> {
        let now = kernel.now();
        self.common.record_round(now);
        self.common.model = GlobalModel {
            round: self.common.round + 1,
            weights: new_weights,
            learning_rate: self.common.config.server_eta,
        };
        if self.common.round < self.common.config.rounds {
            let next = self.common.round + 1;
            self.open_round(kernel, next)?;
        } else {
            self.common.finished = true;
            self.common.run_end = now;
            self.accrue_nodes(now);
        }
        Ok(())
    }

    fn handle(&mut self, kernel: &mut Kernel<Ev>, ev: Ev) -> Result<(), ScenarioError> {
        match ev {
            Ev::Submit { party, round } => {
                if round != self.common.round || self.common.closed {
                    self.common.counters.discarded_late += 1;
                    return Ok(());
                }
                let update = self.common.train_update(party, kernel.now())?;
                let leaf = self
                    .plan
                    .leaf_of(party)
                    .expect("party is assigned to a leaf");
                self.nodes[leaf].buffer.push(update);
                self.common.responded.insert(party);
                self.common.last_accept_at = kernel.now();
                self.maybe_close(kernel)?;
                if !self.common.finished
                    && !self.common.closed
                    && self.nodes[leaf].alive
                    && self.leaf_ready(leaf)
                {
                    self.fire_node(kernel, leaf)?;
                }
            }
            Ev::Join { round } => {
                if round != self.common.round || self.reconfigured_this_round {
                    return Ok(());
                }
                // One reconfiguration admits the whole join burst of the round.
                self.reconfigured_this_round = true;
                let joiners = self.common.trace.joiners_of_round(round).len();
                let reconfig = topology::reconfigure_tree(
                    &self.plan,
                    joiners,
                    &self.common.config.compute,
                    self.common.config.retopology_seconds,
                )?;
                self.pending_reconfig_delay += reconfig.delay_seconds;
                self.common.counters.reconfigs += reconfig.events;
                self.next_plan = Some(reconfig.plan);
            }
            Ev::CloseTimeout { round } => {
                if round == self.common.round && !self.common.closed && !self.common.finished {
                    self.maybe_close(kernel)?;
                }
            }
            Ev::NodeDone { node, round, epoch } => {
                if round != self.common.round
                    || !self.nodes[node].alive
                    || self.nodes[node].epoch != epoch
                {
                    return Ok(());
                }
                self.nodes[node].computing = false;
                let partial = if self.plan.nodes[node].is_leaf() {
                    if self.nodes[node].buffer.is_empty() {
                        PartialAggregate::empty(round, self.common.config.model_dimension)
                    } else {
                        fusion::leaf_aggregate(&self.nodes[node].buffer)?
                    }
                } else {
                    let parts: Vec<PartialAggregate> =
                        self.nodes[node].received.values().cloned().collect();
                    fusion::merge_all(&parts)?
                };
                self.forward_output(kernel, node, partial)?;
            }
            Ev::NodeKill { node } => {
                if self.common.finished || !self.nodes[node].alive {
                    return Ok(());
                }
                let now = kernel.now();
                let rt = &mut self.nodes[node];
                rt.alive = false;
                rt.epoch += 1;
                rt.computing = false;
                // In-memory inputs are lost with the container.
                rt.received.clear();
                self.common.counters.crashes += 1;
                let count = self.node_count_alive - 1;
                self.set_alive_count(now, count);
                // Detection takes the configured number of missed heartbeats,
                // then a fresh container starts.
                let hb = &self.common.config.heartbeat;
                let recovery = hb.interval_seconds * hb.timeout_beats as f64
                    + self.common.config.compute.startup_seconds;
                kernel.schedule(now.offset(recovery)?, Ev::NodeRestart { node })?;
            }
            Ev::NodeRestart { node } => {
                if self.common.finished {
                    return Ok(());
                }
                let now = kernel.now();
                self.nodes[node].alive = true;
                let count = self.node_count_alive + 1;
                self.set_alive_count(now, count);
                if self.nodes[node].done_this_round {
                    return Ok(());
                }
                // Children retransmit their cached outputs.
                let children = self.plan.nodes[node].children.clone();
                for child in children {
                    if let Some(out) = self.nodes[child].output.clone() {
                        self.nodes[node].received.entry(child).or_insert(out);
                    }
                }
                let is_leaf = self.plan.nodes[node].is_leaf();
                let ready = if is_leaf {
                    self.leaf_ready(node) || self.common.closed
                } else {
                    self.internal_ready(node)
                };
                if ready {
                    self.fire_node(kernel, node)?;
                }
            }
            Ev::RootPublish { round } => {
                if round != self.common.round {
                    return Ok(());
                }
                let partial = self.nodes[self.plan.root]
                    .output
                    .clone()
                    .expect("root computed before publish");
                if partial.contributors != self.common.accepted {
                    return Err(ScenarioError::ExactlyOnce {
                        round,
                        detail: format!(
                            "root covers {} updates, round accepted {}",
                            partial.contributors.len(),
                            self.common.accepted.len()
                        ),
                    });
                }
                let next = fusion::finalize(&partial, &self.common.model)?;
                self.finish_round(kernel, next.weights)?;
            }
            _ => {}
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Serverless backend.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InvRole {
    Leaf,
    Intermediate,
    Finalizer,
}

struct Invocation {
    role: InvRole,
    pod: PodId,
    round: u32,
    crashed: bool,
    claimed_updates: Vec<ModelUpdate>,
    claimed_partials: Vec<PartialAggregate>,
}

struct ServerlessWorld {
    common: Common,
    broker: Broker,
    pool: PodPool,
    invocations: BTreeMap<u64, Invocation>,
    next_invocation: u64,
    crash_rng: RngStream,
    sweep_pending: bool,
    /// Whether the pending sweep came from a cadence boundary (or close), so
    /// a time-based trigger may claim raw updates.
    sweep_allows_timed_claims: bool,
    /// Spawn requests waiting for pod capacity (claims already held).
    waiting_for_pod: VecDeque<u64>,
    topic_agg: String,
    topic_parties: String,
}

impl ServerlessWorld {
    fn request_sweep(&mut self, kernel: &mut Kernel<Ev>) -> Result<(), ScenarioError> {
        self.request_sweep_with(kernel, false)
    }

    fn request_sweep_with(
        &mut self,
        kernel: &mut Kernel<Ev>,
        timed_boundary: bool,
    ) -> Result<(), ScenarioError> {
        self.sweep_allows_timed_claims |= timed_boundary;
        if !self.sweep_pending && !self.common.finished {
            self.sweep_pending = true;
            kernel.schedule(kernel.now(), Ev::Sweep)?;
        }
        Ok(())
    }

    fn view(&self) -> BrokerView {
        BrokerView {
            round: self.common.round,
            round_open_at: self.common.round_open_at,
            round_closed: self.common.closed,
            unclaimed_updates: self.broker.unclaimed_count(
                &self.topic_parties,
                MessageFilter {
                    kind: PayloadKind::Update,
                    round: Some(self.common.round),
                },
            ),
            unclaimed_partials: self.broker.unclaimed_count(
                &self.topic_parties,
                MessageFilter {
                    kind: PayloadKind::Partial,
                    round: Some(self.common.round),
                },
            ),
            responded_parties: self.common.responded.len(),
            expected_parties: self.common.expected,
        }
    }

    fn open_round(&mut self, kernel: &mut Kernel<Ev>, round: u32) -> Result<(), ScenarioError> {
        let now = kernel.now();
        self.common.round = round;
        self.common.round_open_at = now;
        self.common.closed = false;
        self.common.responded.clear();
        self.common.accepted.clear();
        self.common.counters = RoundCounters::new();

        if round == 1 {
            // An init function publishes the starting model for download.
            self.broker.publish(
                &self.topic_agg,
                Payload::Global(self.common.model.clone()),
                Role::Aggregator,
                now,
            )?;
        }

        let schedule = self.common.trace.round(round).clone();
        let joiners: BTreeSet<usize> = self
            .common
            .trace
            .joiners_of_round(round)
            .into_iter()
            .collect();
        // Joiners submit within the round but only count as expected once
        // their join lands.
        self.common.expected = schedule
            .eligible
            .iter()
            .enumerate()
            .filter(|(idx, &e)| e && !joiners.contains(idx))
            .count();
        for &idx in &joiners {
            if !schedule.eligible[idx] {
                continue;
            }
            let (_, offset) = self.common.trace.parties[idx].join.expect("joiner");
            kernel.schedule(now.offset(offset)?, Ev::Join { round })?;
        }
        for (idx, offset) in schedule.submissions.iter().enumerate() {
            if let Some(offset) = offset {
                kernel.schedule(
                    now.offset(*offset)?,
                    Ev::Submit {
                        party: idx as u32,
                        round,
                    },
                )?;
            }
        }
        kernel.schedule(
            now.offset(self.common.deadline())?,
            Ev::CloseTimeout { round },
        )?;
        if let TriggerSpec::EveryTSeconds { t } = self.common.config.trigger {
            kernel.schedule(now.offset(t)?, Ev::TriggerPeriod { round })?;
        }
        Ok(())
    }

    fn spawn(
        &mut self,
        kernel: &mut Kernel<Ev>,
        role: InvRole,
        updates: Vec<ModelUpdate>,
        partials: Vec<PartialAggregate>,
    ) -> Result<(), ScenarioError> {
        let id = self.next_invocation;
        self.next_invocation += 1;
        let crashed = self
            .crash_rng
            .chance(self.common.config.fault.invocation_crash_prob)
            .expect("crash probability validated");
        self.invocations.insert(
            id,
            Invocation {
                role,
                pod: PodId(u64::MAX),
                round: self.common.round,
                crashed,
                claimed_updates: updates,
                claimed_partials: partials,
            },
        );
        self.common.counters.invocations += 1;
        self.try_start(kernel, id)?;
        Ok(())
    }

    fn try_start(&mut self, kernel: &mut Kernel<Ev>, id: u64) -> Result<(), ScenarioError> {
        let now = kernel.now();
        let Some(acquired) = self.pool.acquire(now) else {
            self.waiting_for_pod.push_back(id);
            return Ok(());
        };
        let inv = self.invocations.get_mut(&id).expect("invocation exists");
        inv.pod = acquired.pod;
        let spec = &self.common.config.compute;
        let work = match inv.role {
            InvRole::Leaf => inv.claimed_updates.len() as f64 * spec.per_update_cpu_seconds,
            InvRole::Intermediate => {
                inv.claimed_partials.len() as f64 * spec.per_update_cpu_seconds
            }
            InvRole::Finalizer => spec.finalize_cpu_seconds,
        };
        self.common.busy_seconds += work;
        let ends_at = acquired.ready_at.offset(work)?;
        kernel.schedule(ends_at, Ev::InvocationDone { invocation: id })?;
        Ok(())
    }

    fn claim_updates(
        &mut self,
        batch: usize,
        invocation: InvocationId,
        now: VirtualTime,
    ) -> Result<Vec<ModelUpdate>, ScenarioError> {
        let msgs = self.broker.claim_batch(
            &self.topic_parties,
            batch,
            invocation,
            MessageFilter {
                kind: PayloadKind::Update,
                round: Some(self.common.round),
            },
            now,
        )?;
        Ok(msgs
            .into_iter()
            .map(|m| match m.payload {
                Payload::Update(u) => u,
                _ => unreachable!("filtered to updates"),
            })
            .collect())
    }

    fn claim_partials(
        &mut self,
        batch: usize,
        invocation: InvocationId,
        now: VirtualTime,
    ) -> Result<Vec<PartialAggregate>, ScenarioError> {
        let msgs = self.broker.claim_batch(
            &self.topic_parties,
            batch,
            invocation,
            MessageFilter {
                kind: PayloadKind::Partial,
                round: Some(self.common.round),
            },
            now,
        )?;
        Ok(msgs
            .into_iter()
            .map(|m| match m.payload {
                Payload::Partial(p) => p,
                _ => unreachable!("filtered to partials"),
            })
            .collect())
    }

    /// One deferred trigger evaluation: close the round if due, spawn leaf
    /// and intermediate work, and finalize when a single covering partial
    /// remains.
    fn sweep(&mut self, kernel: &mut Kernel<Ev>) -> Result<(), ScenarioError> {
        if self.common.finished {
            return Ok(());
        }
        let now = kernel.now();
        let boundary_sweep = self.sweep_allows_timed_claims;
        self.sweep_allows_timed_claims = false;
        loop {
            // Time-based triggers batch leaf claims on their cadence only
            // while the round is open; a closed round flushes immediately.
            let leaf_claims_allowed = !matches!(
                self.common.config.trigger,
                TriggerSpec::EveryTSeconds { .. }
            ) || self.common.closed
                || boundary_sweep;
            let decision = crate::trigger::evaluate_trigger(
                &self.common.config.trigger,
                &self.common.config.round_policy,
                &self.view(),
                now,
                self.common.config.fanout,
            );
            match decision {
                TriggerDecision::CloseRound => {
                    self.common.close_round()?;
                    if self.common.accepted.is_empty() {
                        let weights = self.common.model.weights.clone();
                        self.finish_round(kernel, weights)?;
                        return Ok(());
                    }
                }
                TriggerDecision::Fire(plan) => {
                    let mut progressed = false;
                    if leaf_claims_allowed {
                        loop {
                            let available = self.view().unclaimed_updates;
                            let take = if available >= plan.leaf_batch {
                                plan.leaf_batch
                            } else if plan.flush_remainder && available > 0 {
                                available
                            } else {
                                break;
                            };
                            let inv = InvocationId(self.next_invocation);
                            let updates = self.claim_updates(take, inv, now)?;
                            self.spawn(kernel, InvRole::Leaf, updates, Vec::new())?;
                            progressed = true;
                        }
                    }
                    while self.view().unclaimed_partials >= 2 {
                        let take = self
                            .common
                            .config
                            .fanout
                            .min(self.view().unclaimed_partials);
                        let inv = InvocationId(self.next_invocation);
                        let partials = self.claim_partials(take, inv, now)?;
                        self.spawn(kernel, InvRole::Intermediate, Vec::new(), partials)?;
                        progressed = true;
                    }
                    if !progressed {
                        break;
                    }
                }
                TriggerDecision::Hold => break,
            }
        }
        // Finalization: the round is closed and exactly one unclaimed partial
        // covers every accepted update.
        if self.common.closed && !self.common.accepted.is_empty() {
            let filter = MessageFilter {
                kind: PayloadKind::Partial,
                round: Some(self.common.round),
            };
            if self.broker.unclaimed_count(&self.topic_parties, filter) == 1 {
                let covering = self
                    .broker
                    .peek_unclaimed(&self.topic_parties, filter)
                    .map(|m| match &m.payload {
                        Payload::Partial(p) => p.contributors.len() == self.common.accepted.len(),
                        _ => false,
                    })
                    .unwrap_or(false);
                if covering {
                    let inv = InvocationId(self.next_invocation);
                    let partials = self.claim_partials(1, inv, now)?;
                    self.spawn(kernel, InvRole::Finalizer, Vec::new(), partials)?;
                }
            }
        }
        Ok(())
    }

    fn finish_round(
        &mut self,
        kernel: &mut Kernel<Ev>,
        new_weights: WeightVector,
    ) -> Result<(), ScenarioError> {
        let now = kernel.now();
        self.common.record_round(now);
        self.common.model = GlobalModel {
            round: self.common.round + 1,
            weights: new_weights,
            learning_rate: self.common.config.server_eta,
        };
        if self.common.round < self.common.config.rounds {
            let next = self.common.round + 1;
            self.open_round(kernel, next)?;
            self.request_sweep(kernel)?;
        } else {
            self.common.finished = true;
            self.common.run_end = now;
        }
        Ok(())
    }

    fn handle(&mut self, kernel: &mut Kernel<Ev>, ev: Ev) -> Result<(), ScenarioError> {
        match ev {
            Ev::Submit { party, round } => {
                let now = kernel.now();
                let late = round != self.common.round || self.common.closed;
                let update = self.common.train_update_for_round(party, now, round)?;
                let offset = self.broker.publish(
                    &self.topic_parties,
                    Payload::Update(update),
                    Role::Party(party),
                    now,
                )?;
                if late {
                    // Durably stored but discarded: withdrawn from the
                    // claimable pool, left Unclaimed in the log.
                    self.broker.quarantine(&self.topic_parties, offset)?;
                    self.common.counters.discarded_late += 1;
                } else {
                    self.common.responded.insert(party);
                    self.common.last_accept_at = now;
                    self.request_sweep(kernel)?;
                }
            }
            Ev::Join { round } => {
                if round != self.common.round || self.common.closed {
                    return Ok(());
                }
                // The joiner reads the current model straight from the queue
                // and participates immediately; no reconfiguration happens.
                self.common.expected += 1;
                self.request_sweep(kernel)?;
            }
            Ev::CloseTimeout { round } => {
                if round == self.common.round && !self.common.closed && !self.common.finished {
                    self.request_sweep(kernel)?;
                }
            }
            Ev::Sweep => {
                self.sweep_pending = false;
                self.sweep(kernel)?;
            }
            Ev::TriggerTick => {
                if !self.common.finished {
                    self.request_sweep(kernel)?;
                    let period = self.common.config.trigger_eval_period_seconds;
                    kernel.schedule(kernel.now().offset(period)?, Ev::TriggerTick)?;
                }
            }
            Ev::TriggerPeriod { round } => {
                if round == self.common.round && !self.common.closed && !self.common.finished {
                    self.request_sweep_with(kernel, true)?;
                    if let TriggerSpec::EveryTSeconds { t } = self.common.config.trigger {
                        kernel.schedule(kernel.now().offset(t)?, Ev::TriggerPeriod { round })?;
                    }
                }
            }
            Ev::InvocationDone { invocation } => {
                let now = kernel.now();
                let inv = self
                    .invocations
                    .remove(&invocation)
                    .expect("invocation exists");
                let broker_inv = InvocationId(invocation);
                if inv.crashed {
                    // Restarted by the platform: claims go back, a sweep
                    // re-schedules the work.
                    self.broker.release(broker_inv, now)?;
                    self.common.counters.crashes += 1;
                    self.pool.release(inv.pod, now).expect("pod was busy");
                    self.schedule_pod_expiry(kernel)?;
                    self.start_waiting(kernel)?;
                    self.request_sweep(kernel)?;
                    return Ok(());
                }
                match inv.role {
                    InvRole::Leaf => {
                        let partial = fusion::leaf_aggregate(&inv.claimed_updates)?;
                        self.broker.publish(
                            &self.topic_parties,
                            Payload::Partial(partial),
                            Role::Aggregator,
                            now,
                        )?;
                        self.broker.ack(broker_inv, now)?;
                    }
                    InvRole::Intermediate => {
                        let partial = fusion::merge_all(&inv.claimed_partials)?;
                        self.broker.publish(
                            &self.topic_parties,
                            Payload::Partial(partial),
                            Role::Aggregator,
                            now,
                        )?;
                        self.broker.ack(broker_inv, now)?;
                    }
                    InvRole::Finalizer => {
                        let partial = &inv.claimed_partials[0];
                        if partial.contributors != self.common.accepted {
                            return Err(ScenarioError::ExactlyOnce {
                                round: inv.round,
                                detail: format!(
                                    "final aggregate covers {} updates, round accepted {}",
                                    partial.contributors.len(),
                                    self.common.accepted.len()
                                ),
                            });
                        }
                        let next = fusion::finalize(partial, &self.common.model)?;
                        self.broker.publish(
                            &self.topic_agg,
                            Payload::Global(next.clone()),
                            Role::Aggregator,
                            now,
                        )?;
                        self.broker.ack(broker_inv, now)?;
                        self.pool.release(inv.pod, now).expect("pod was busy");
                        self.schedule_pod_expiry(kernel)?;
                        self.start_waiting(kernel)?;
                        self.finish_round(kernel, next.weights)?;
                        return Ok(());
                    }
                }
                self.pool.release(inv.pod, now).expect("pod was busy");
                self.schedule_pod_expiry(kernel)?;
                self.start_waiting(kernel)?;
                self.request_sweep(kernel)?;
            }
            // Post-run expiry checks are skipped so the container-second
            // snapshot stays frozen at the end of the run.
            Ev::PodExpire if !self.common.finished => {
                self.pool.expire_due(kernel.now());
            }
            _ => {}
        }
        Ok(())
    }

    fn schedule_pod_expiry(&mut self, kernel: &mut Kernel<Ev>) -> Result<(), ScenarioError> {
        let delay = self.pool.config().idle_timeout_seconds;
        kernel.schedule(kernel.now().offset(delay)?, Ev::PodExpire)?;
        Ok(())
    }

    fn start_waiting(&mut self, kernel: &mut Kernel<Ev>) -> Result<(), ScenarioError> {
        while let Some(id) = self.waiting_for_pod.pop_front() {
            let before = self.waiting_for_pod.len();
            self.try_start(kernel, id)?;
            if self.waiting_for_pod.len() > before {
                break; // pool is full again
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Entry points.
// ---------------------------------------------------------------------------

/// Runs the backend selected in the config.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunOutcome, ScenarioError> {
    let trace = Trace::generate(config);
    run_backend_on_trace(config, config.backend, &trace)
}

/// Runs a specific backend on a freshly recorded trace.
pub fn run_with_backend(
    config: &ScenarioConfig,
    backend: BackendKind,
) -> Result<RunOutcome, ScenarioError> {
    let trace = Trace::generate(config);
    run_backend_on_trace(config, backend, &trace)
}

/// Runs every requested backend against one recorded trace and assembles the
/// side-by-side comparison.
pub fn compare(
    config: &ScenarioConfig,
    backends: &[BackendKind],
) -> Result<(Vec<RunOutcome>, ComparisonReport), ScenarioError> {
    let trace = Trace::generate(config);
    let mut outcomes = Vec::with_capacity(backends.len());
    for &backend in backends {
        outcomes.push(run_backend_on_trace(config, backend, &trace)?);
    }
    let report = build_comparison(config, &outcomes);
    Ok((outcomes, report))
}

fn build_comparison(config: &ScenarioConfig, outcomes: &[RunOutcome]) -> ComparisonReport {
    let find = |kind: BackendKind| {
        outcomes
            .iter()
            .find(|o| o.report.backend == kind.label())
            .map(|o| &o.report)
    };
    let static_report = find(BackendKind::StaticTree);
    let serverless_report = find(BackendKind::Serverless);
    let (mut cost_savings, mut cs_savings, mut latency_ratio) = (None, None, None);
    if let (Some(st), Some(sl)) = (static_report, serverless_report) {
        cost_savings =
            crate::metrics::savings_percent(st.projected_cost_usd, sl.projected_cost_usd).ok();
        cs_savings =
            crate::metrics::savings_percent(st.container_seconds, sl.container_seconds).ok();
        if sl.mean_latency_seconds > 0.0 {
            latency_ratio = Some(st.mean_latency_seconds / sl.mean_latency_seconds);
        }
    }
    ComparisonReport {
        seed: config.seed,
        backends: outcomes.iter().map(|o| o.report.clone()).collect(),
        cost_savings_percent: cost_savings,
        container_second_savings_percent: cs_savings,
        mean_latency_ratio: latency_ratio,
    }
}

/// Runs one backend against a pre-recorded trace.
pub fn run_backend_on_trace(
    config: &ScenarioConfig,
    backend: BackendKind,
    trace: &Trace,
) -> Result<RunOutcome, ScenarioError> {
    match backend {
        BackendKind::Centralized => run_centralized(config, trace),
        BackendKind::StaticTree => run_static(config, trace),
        BackendKind::Serverless => run_serverless(config, trace),
    }
}

fn ancillary_seconds(config: &ScenarioConfig, run_end: VirtualTime) -> f64 {
    config.ancillary_containers * run_end.seconds()
}

fn run_centralized(config: &ScenarioConfig, trace: &Trace) -> Result<RunOutcome, ScenarioError> {
    let mut kernel: Kernel<Ev> = Kernel::with_horizon(config.horizon_seconds);
    let mut world = CentralizedWorld {
        common: Common::new(config, trace),
        buffer: Vec::new(),
    };
    world.open_round(&mut kernel, 1)?;
    let mut failure = None;
    kernel
        .run_until_quiescent(|k, ev| match world.handle(k, ev.payload) {
            Ok(()) => Ok(()),
            Err(e) => {
                let msg = e.to_string();
                failure = Some(e);
                Err(SimError::Handler {
                    at: k.now().seconds(),
                    message: msg,
                })
            }
        })
        .map_err(|e| failure.take().unwrap_or(ScenarioError::Sim(e)))?;

    let run_end = world.common.run_end;
    // One always-on aggregator container for the whole run.
    let container_seconds = run_end.seconds() + ancillary_seconds(config, run_end);
    let utilization = if run_end.seconds() > 0.0 {
        world.common.busy_seconds / run_end.seconds()
    } else {
        0.0
    };
    let report =
        world
            .common
            .build_report(BackendKind::Centralized, container_seconds, utilization);
    Ok(RunOutcome {
        final_model: world.common.model.clone(),
        report,
        broker_trace: None,
    })
}

fn run_static(config: &ScenarioConfig, trace: &Trace) -> Result<RunOutcome, ScenarioError> {
    let mut kernel: Kernel<Ev> = Kernel::with_horizon(config.horizon_seconds);
    let plan = topology::build_tree(config.parties, config.fanout)?;
    let node_count = plan.node_count();
    let mut world = StaticWorld {
        common: Common::new(config, trace),
        nodes: (0..node_count).map(|_| NodeRt::fresh()).collect(),
        leaf_expected: vec![0; node_count],
        plan,
        pending_reconfig_delay: 0.0,
        reconfigured_this_round: false,
        next_plan: None,
        node_seconds: 0.0,
        node_count_alive: node_count,
        node_count_since: VirtualTime::ZERO,
    };
    world.open_round(&mut kernel, 1)?;
    let mut failure = None;
    kernel
        .run_until_quiescent(|k, ev| match world.handle(k, ev.payload) {
            Ok(()) => Ok(()),
            Err(e) => {
                let msg = e.to_string();
                failure = Some(e);
                Err(SimError::Handler {
                    at: k.now().seconds(),
                    message: msg,
                })
            }
        })
        .map_err(|e| failure.take().unwrap_or(ScenarioError::Sim(e)))?;

    let run_end = world.common.run_end;
    let node_seconds = world.node_seconds;
    let container_seconds = node_seconds + ancillary_seconds(config, run_end);
    let utilization = if node_seconds > 0.0 {
        world.common.busy_seconds / node_seconds
    } else {
        0.0
    };
    let report = world
        .common
        .build_report(BackendKind::StaticTree, container_seconds, utilization);
    Ok(RunOutcome {
        final_model: world.common.model.clone(),
        report,
        broker_trace: None,
    })
}

fn run_serverless(config: &ScenarioConfig, trace: &Trace) -> Result<RunOutcome, ScenarioError> {
    let mut kernel: Kernel<Ev> = Kernel::with_horizon(config.horizon_seconds);
    let mut broker = Broker::new(config.record_broker_trace);
    broker.create_topic(&config.topic_agg(), TopicAcl::agg_topic())?;
    broker.create_topic(&config.topic_parties(), TopicAcl::parties_topic())?;
    let mut world = ServerlessWorld {
        common: Common::new(config, trace),
        broker,
        pool: PodPool::new(config.scaler),
        invocations: BTreeMap::new(),
        next_invocation: 0,
        crash_rng: RngStream::new(config.seed, "invocation-crashes"),
        sweep_pending: false,
        sweep_allows_timed_claims: false,
        waiting_for_pod: VecDeque::new(),
        topic_agg: config.topic_agg(),
        topic_parties: config.topic_parties(),
    };
    world.open_round(&mut kernel, 1)?;
    kernel.schedule(
        VirtualTime::new(config.trigger_eval_period_seconds)?,
        Ev::TriggerTick,
    )?;
    let mut failure = None;
    kernel
        .run_until_quiescent(|k, ev| match world.handle(k, ev.payload) {
            Ok(()) => Ok(()),
            Err(e) => {
                let msg = e.to_string();
                failure = Some(e);
                Err(SimError::Handler {
                    at: k.now().seconds(),
                    message: msg,
                })
            }
        })
        .map_err(|e| failure.take().unwrap_or(ScenarioError::Sim(e)))?;

    let run_end = world.common.run_end;
    let pod_seconds = world.pool.container_seconds(run_end);
    let container_seconds = pod_seconds + ancillary_seconds(config, run_end);
    let utilization = world.pool.utilization(run_end);
    let report = world
        .common
        .build_report(BackendKind::Serverless, container_seconds, utilization);
    Ok(RunOutcome {
        final_model: world.common.model.clone(),
        report,
        broker_trace: world.broker.trace_ndjson(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{JoinSpec, NodeKillSpec};
    use crate::rng::Distribution;

    fn tiny_config() -> ScenarioConfig {
        ScenarioConfig {
            parties: 9,
            fanout: 3,
            rounds: 2,
            model_dimension: 4,
            behavior: crate::party::PartyBehavior {
                think_time: Distribution::Uniform { a: 0.5, b: 8.0 },
                dropout_prob: 0.0,
            },
            trigger: TriggerSpec::EveryKUpdates { k: 3 },
            seed: 11,
            ..ScenarioConfig::default()
        }
    }

    /// Independent closed-form expectation for one FedAvg round with tau=1,
    /// local eta=1, server eta=1 from a zero model: the sample-weighted mean
    /// of the eligible parties' optima, computed with scalar loops.
    #[allow(clippy::needless_range_loop)]
    fn expected_round1_model(config: &ScenarioConfig, trace: &Trace) -> Vec<f64> {
        let d = config.model_dimension;
        let mut sum = vec![0.0f64; d];
        let mut total = 0.0f64;
        for (idx, &eligible) in trace.rounds[0].eligible.iter().enumerate() {
            if !eligible || trace.rounds[0].submissions[idx].is_none() {
                continue;
            }
            let p = &trace.parties[idx];
            for k in 0..d {
                sum[k] += p.task.sample_count as f64 * p.task.optimum.0[k];
            }
            total += p.task.sample_count as f64;
        }
        sum.iter().map(|v| v / total).collect()
    }

    #[test]
    fn all_backends_agree_with_closed_form_round_one() {
        let mut config = tiny_config();
        config.rounds = 1;
        let trace = Trace::generate(&config);
        let expected = expected_round1_model(&config, &trace);
        for backend in [
            BackendKind::Centralized,
            BackendKind::StaticTree,
            BackendKind::Serverless,
        ] {
            let outcome = run_backend_on_trace(&config, backend, &trace).unwrap();
            assert_eq!(outcome.report.rounds_completed, 1);
            let got = &outcome.final_model.weights.0;
            for (g, e) in got.iter().zip(expected.iter()) {
                assert!(
                    (g - e).abs() <= 1e-9 * e.abs().max(1.0),
                    "{backend:?}: got {g}, expected {e}"
                );
            }
        }
    }

    #[test]
    fn same_seed_runs_are_identical() {
        let config = tiny_config();
        let a = run_scenario(&config).unwrap();
        let b = run_scenario(&config).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
        assert_eq!(a.final_model.weights.0, b.final_model.weights.0);
    }

    #[test]
    fn quorum_close_discards_late_updates() {
        let mut config = tiny_config();
        config.rounds = 2;
        config.parties = 10;
        config.fanout = 5;
        // Spread responses widely; a 0.5 quorum closes each round after the
        // fifth submission, so the stragglers of round 1 arrive while round 2
        // is running and are discarded there.
        config.behavior.think_time = Distribution::Uniform { a: 1.0, b: 400.0 };
        config.round_policy.quorum_fraction = 0.5;
        config.round_policy.response_timeout_seconds = 600.0;
        let outcome = run_scenario(&config).unwrap();
        assert_eq!(outcome.report.rounds[0].accepted_updates, 5);
        assert_eq!(outcome.report.rounds[1].accepted_updates, 5);
        let discarded: u32 = outcome.report.rounds.iter().map(|r| r.discarded_late).sum();
        assert!(discarded > 0, "round-1 stragglers must be discarded late");
    }

    #[test]
    fn crash_restarts_reproduce_the_crash_free_result() {
        let mut config = tiny_config();
        config.rounds = 3;
        let trace = Trace::generate(&config);
        let clean = run_backend_on_trace(&config, BackendKind::Serverless, &trace).unwrap();

        let mut faulty = config.clone();
        faulty.fault.invocation_crash_prob = 0.3;
        let crashed = run_backend_on_trace(&faulty, BackendKind::Serverless, &trace).unwrap();
        assert!(crashed.report.rounds.iter().map(|r| r.crashes).sum::<u32>() > 0);
        assert_eq!(crashed.report.rounds_completed, 3);
        let diff = crashed
            .final_model
            .weights
            .max_rel_diff(&clean.final_model.weights);
        assert!(diff <= 1e-9, "crash/no-crash divergence {diff}");
        for round in &crashed.report.rounds {
            assert_eq!(round.accepted_updates, 9);
        }
    }

    #[test]
    fn static_node_kill_recovers_and_round_completes() {
        let mut config = tiny_config();
        config.parties = 27;
        config.fanout = 3; // 3 levels: 9 leaves, 3 internal, 1 root
        config.rounds = 1;
        config.behavior.think_time = Distribution::Constant { c: 2.0 };
        let trace = Trace::generate(&config);
        let baseline = run_backend_on_trace(&config, BackendKind::StaticTree, &trace).unwrap();

        let mut faulty = config.clone();
        faulty.fault.static_node_kill = Some(NodeKillSpec {
            round: 1,
            offset_seconds: 1.0, // before any update arrives at the internal node
            node_index: None,
        });
        let killed = run_backend_on_trace(&faulty, BackendKind::StaticTree, &trace).unwrap();
        assert_eq!(killed.report.rounds[0].crashes, 1);
        let diff = killed
            .final_model
            .weights
            .max_rel_diff(&baseline.final_model.weights);
        assert!(diff <= 1e-9, "recovery changed the result by {diff}");
        // Recovery costs detection plus restart time.
        assert!(
            killed.report.rounds[0].latency_seconds > baseline.report.rounds[0].latency_seconds
        );
    }

    #[test]
    fn joins_reconfigure_static_but_not_serverless() {
        let mut config = tiny_config();
        config.parties = 30;
        config.fanout = 3;
        config.rounds = 1;
        config.behavior.think_time = Distribution::Constant { c: 10.0 };
        config.joins = vec![JoinSpec {
            round: 1,
            count: 6,
            offset_seconds: 2.0,
        }];
        let trace = Trace::generate(&config);
        let st = run_backend_on_trace(&config, BackendKind::StaticTree, &trace).unwrap();
        let sl = run_backend_on_trace(&config, BackendKind::Serverless, &trace).unwrap();
        assert!(st.report.rounds[0].reconfig_events >= 1);
        assert_eq!(sl.report.rounds[0].reconfig_events, 0);
        // Static aggregates only the original parties this round; the
        // serverless round admits the joiners immediately.
        assert_eq!(st.report.rounds[0].accepted_updates, 30);
        assert_eq!(sl.report.rounds[0].accepted_updates, 36);
        assert!(
            st.report.rounds[0].latency_seconds > 2.0 * sl.report.rounds[0].latency_seconds,
            "static {} vs serverless {}",
            st.report.rounds[0].latency_seconds,
            sl.report.rounds[0].latency_seconds
        );
    }

    #[test]
    fn pool_drains_between_widely_spaced_rounds() {
        let mut config = tiny_config();
        config.rounds = 2;
        // Long quiet stretch before submissions, far beyond idle timeout.
        config.behavior.think_time = Distribution::Uniform { a: 400.0, b: 500.0 };
        config.round_policy.response_timeout_seconds = 600.0;
        let outcome = run_scenario(&config).unwrap();
        assert_eq!(outcome.report.rounds_completed, 2);
        // If pods survived the quiet stretch the container-second bill would
        // be close to the full run duration; draining keeps it far below.
        let run = outcome.report.run_duration_seconds;
        let pods_cs = outcome.report.container_seconds - run; // minus ancillary
        assert!(
            pods_cs < 0.3 * run,
            "pods_cs {pods_cs} vs run {run}: pool did not drain"
        );
    }

    #[test]
    fn serverless_pods_do_not_accrue_while_waiting_for_updates() {
        let mut config = tiny_config();
        config.rounds = 1;
        // Everybody submits at t=500; nothing should be provisioned before.
        config.behavior.think_time = Distribution::Constant { c: 500.0 };
        config.round_policy.response_timeout_seconds = 900.0;
        let outcome = run_scenario(&config).unwrap();
        let run = outcome.report.run_duration_seconds;
        assert!(run > 500.0);
        let pods_cs = outcome.report.container_seconds - run;
        // Pods exist only for the few seconds of aggregation at the end
        // (plus the idle tail capped by the end of the run).
        assert!(pods_cs < 60.0, "pods accrued {pods_cs} container-seconds");
    }

    #[test]
    fn every_t_trigger_claims_on_cadence() {
        let mut config = tiny_config();
        config.rounds = 1;
        config.parties = 8;
        config.fanout = 8;
        config.behavior.think_time = Distribution::Uniform { a: 2.0, b: 90.0 };
        config.round_policy.response_timeout_seconds = 600.0;
        let trace = Trace::generate(&config);

        // A count trigger at the full fanout folds everything in one leaf
        // invocation plus one finalizer.
        config.trigger = TriggerSpec::EveryKUpdates { k: 8 };
        let by_count = run_backend_on_trace(&config, BackendKind::Serverless, &trace).unwrap();
        assert_eq!(by_count.report.rounds[0].invocations, 2);

        // A 10-second cadence sweeps partial batches as they arrive, so the
        // same trace needs several leaf invocations plus merges.
        config.trigger = TriggerSpec::EveryTSeconds { t: 10.0 };
        let by_time = run_backend_on_trace(&config, BackendKind::Serverless, &trace).unwrap();
        assert_eq!(by_time.report.rounds[0].accepted_updates, 8);
        assert!(
            by_time.report.rounds[0].invocations > by_count.report.rounds[0].invocations,
            "cadence trigger produced {} invocations",
            by_time.report.rounds[0].invocations
        );
        let a = by_time
            .final_model
            .weights
            .max_rel_diff(&by_count.final_model.weights);
        assert!(a <= 1e-9, "trigger choice changed the result by {a}");
    }

    #[test]
    fn fail_on_no_quorum_surfaces_an_error() {
        let mut config = tiny_config();
        config.rounds = 1;
        config.behavior.dropout_prob = 0.9;
        config.behavior.think_time = Distribution::Constant { c: 1.0 };
        config.round_policy.quorum_fraction = 1.0;
        config.round_policy.response_timeout_seconds = 30.0;
        config.round_policy.fail_on_no_quorum = true;
        config.seed = 5;
        let err = run_scenario(&config);
        assert!(matches!(err, Err(ScenarioError::QuorumFailed { .. })));
    }
}
