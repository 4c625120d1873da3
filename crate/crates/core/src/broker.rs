//! In-process topic-based publish/subscribe queue with per-message claim
//! flags and redelivery.
//!
//! Messages are append-only and never deleted within a run: a consumed
//! message flips to `Consumed` but stays in the log so exactly-once behavior
//! can be audited after the fact. A claim marks a message as owned by one
//! invocation; the owner either acks it (after publishing its own output) or
//! releases it on crash, returning the message to the unclaimed pool for
//! redelivery. Claims are atomic within one kernel event.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::fusion::{GlobalModel, ModelUpdate, PartialAggregate};
use crate::kernel::VirtualTime;

/// Who is performing a broker action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Party(u32),
    Aggregator,
}

impl Role {
    fn label(&self) -> &'static str {
        match self {
            Role::Party(_) => "party",
            Role::Aggregator => "aggregator",
        }
    }
}

/// Per-topic permissions for the two role classes.
#[derive(Debug, Clone, Copy)]
pub struct TopicAcl {
    pub parties_publish: bool,
    pub parties_consume: bool,
    pub aggregators_publish: bool,
    pub aggregators_consume: bool,
}

impl TopicAcl {
    /// `<job>-Parties`: any party may publish, only aggregators may read.
    pub fn parties_topic() -> Self {
        TopicAcl {
            parties_publish: true,
            parties_consume: false,
            aggregators_publish: true,
            aggregators_consume: true,
        }
    }

    /// `<job>-Agg`: only aggregators publish, every party may read.
    pub fn agg_topic() -> Self {
        TopicAcl {
            parties_publish: false,
            parties_consume: true,
            aggregators_publish: true,
            aggregators_consume: true,
        }
    }

    fn may_publish(&self, role: Role) -> bool {
        match role {
            Role::Party(_) => self.parties_publish,
            Role::Aggregator => self.aggregators_publish,
        }
    }

    fn may_consume(&self, role: Role) -> bool {
        match role {
            Role::Party(_) => self.parties_consume,
            Role::Aggregator => self.aggregators_consume,
        }
    }
}

/// What a queued message carries.
#[derive(Debug, Clone)]
pub enum Payload {
    Update(ModelUpdate),
    Partial(PartialAggregate),
    Global(GlobalModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PayloadKind {
    Update,
    Partial,
    Global,
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Update(_) => PayloadKind::Update,
            Payload::Partial(_) => PayloadKind::Partial,
            Payload::Global(_) => PayloadKind::Global,
        }
    }

    pub fn round(&self) -> u32 {
        match self {
            Payload::Update(u) => u.round,
            Payload::Partial(p) => p.round,
            Payload::Global(g) => g.round,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimState {
    Unclaimed,
    Claimed(InvocationId),
    Consumed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct InvocationId(pub u64);

#[derive(Debug, Clone)]
pub struct QueuedMessage {
    pub offset: u64,
    pub payload: Payload,
    pub claim_state: ClaimState,
    pub published_at: VirtualTime,
}

/// Selects messages by payload kind and, optionally, round.
#[derive(Debug, Clone, Copy)]
pub struct MessageFilter {
    pub kind: PayloadKind,
    pub round: Option<u32>,
}

#[derive(Debug, Error, PartialEq)]
pub enum BrokerError {
    #[error("topic {0:?} already exists")]
    DuplicateTopic(String),
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("{role} may not {action} on topic {topic:?}")]
    AclDenied {
        role: &'static str,
        action: &'static str,
        topic: String,
    },
    #[error("unknown invocation {0:?}")]
    UnknownInvocation(InvocationId),
    #[error("invocation {0:?} already finished (double ack or ack after release)")]
    InvocationFinished(InvocationId),
    #[error("invocation {0:?} is no longer active and may not claim")]
    InvocationNotActive(InvocationId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InvocationClaims {
    Active,
    Acked,
    Released,
}

/// One line of the optional broker trace dump.
#[derive(Debug, Serialize)]
pub struct TraceRecord {
    pub topic: String,
    pub offset: u64,
    pub event: &'static str,
    pub virtual_time: f64,
}

struct Topic {
    acl: TopicAcl,
    messages: Vec<QueuedMessage>,
    // Unclaimed offsets indexed by (kind, round); BTreeSet keeps claim order
    // FIFO by offset even after releases put old offsets back.
    unclaimed: BTreeMap<(PayloadKind, u32), std::collections::BTreeSet<u64>>,
}

impl Topic {
    fn class_of(payload: &Payload) -> (PayloadKind, u32) {
        (payload.kind(), payload.round())
    }
}

/// The in-memory broker: a set of named topics plus the claim registry.
pub struct Broker {
    topics: BTreeMap<String, Topic>,
    claims: BTreeMap<InvocationId, (InvocationClaims, Vec<(String, u64)>)>,
    trace: Option<Vec<TraceRecord>>,
}

impl Broker {
    pub fn new(record_trace: bool) -> Self {
        Broker {
            topics: BTreeMap::new(),
            claims: BTreeMap::new(),
            trace: if record_trace { Some(Vec::new()) } else { None },
        }
    }

    fn record(&mut self, topic: &str, offset: u64, event: &'static str, now: VirtualTime) {
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRecord {
                topic: topic.to_string(),
                offset,
                event,
                virtual_time: now.seconds(),
            });
        }
    }

    pub fn create_topic(&mut self, name: &str, acl: TopicAcl) -> Result<(), BrokerError> {
        if self.topics.contains_key(name) {
            return Err(BrokerError::DuplicateTopic(name.to_string()));
        }
        self.topics.insert(
            name.to_string(),
            Topic {
                acl,
                messages: Vec::new(),
                unclaimed: BTreeMap::new(),
            },
        );
        Ok(())
    }

    fn topic_mut(&mut self, name: &str) -> Result<&mut Topic, BrokerError> {
        self.topics
            .get_mut(name)
            .ok_or_else(|| BrokerError::UnknownTopic(name.to_string()))
    }

    fn topic(&self, name: &str) -> Result<&Topic, BrokerError> {
        self.topics
            .get(name)
            .ok_or_else(|| BrokerError::UnknownTopic(name.to_string()))
    }

    /// Appends a message; returns its offset.
    pub fn publish(
        &mut self,
        topic_name: &str,
        payload: Payload,
        publisher: Role,
        now: VirtualTime,
    ) -> Result<u64, BrokerError> {
        let topic = self.topic_mut(topic_name)?;
        if !topic.acl.may_publish(publisher) {
            return Err(BrokerError::AclDenied {
                role: publisher.label(),
                action: "publish",
                topic: topic_name.to_string(),
            });
        }
        let offset = topic.messages.len() as u64;
        let class = Topic::class_of(&payload);
        topic.messages.push(QueuedMessage {
            offset,
            payload,
            claim_state: ClaimState::Unclaimed,
            published_at: now,
        });
        topic.unclaimed.entry(class).or_default().insert(offset);
        self.record(topic_name, offset, "publish", now);
        Ok(offset)
    }

    /// Atomically claims up to `max_count` unclaimed messages matching the
    /// filter, oldest offsets first.
    pub fn claim_batch(
        &mut self,
        topic_name: &str,
        max_count: usize,
        invocation: InvocationId,
        filter: MessageFilter,
        now: VirtualTime,
    ) -> Result<Vec<QueuedMessage>, BrokerError> {
        if let Some((state, _)) = self.claims.get(&invocation) {
            if *state != InvocationClaims::Active {
                return Err(BrokerError::InvocationNotActive(invocation));
            }
        }
        let topic = self.topic_mut(topic_name)?;
        let mut picked: Vec<u64> = Vec::new();
        match filter.round {
            Some(round) => {
                if let Some(set) = topic.unclaimed.get_mut(&(filter.kind, round)) {
                    while picked.len() < max_count {
                        match set.pop_first() {
                            Some(offset) => picked.push(offset),
                            None => break,
                        }
                    }
                }
            }
            None => {
                // Round-agnostic claim: walk classes of the right kind in
                // offset order across rounds.
                let mut candidates: Vec<u64> = topic
                    .unclaimed
                    .iter()
                    .filter(|((kind, _), _)| *kind == filter.kind)
                    .flat_map(|(_, set)| set.iter().copied())
                    .collect();
                candidates.sort_unstable();
                candidates.truncate(max_count);
                for offset in &candidates {
                    let class = Topic::class_of(&topic.messages[*offset as usize].payload);
                    topic.unclaimed.get_mut(&class).unwrap().remove(offset);
                }
                picked = candidates;
            }
        }

        let mut out = Vec::with_capacity(picked.len());
        for offset in &picked {
            let msg = &mut topic.messages[*offset as usize];
            debug_assert_eq!(msg.claim_state, ClaimState::Unclaimed);
            msg.claim_state = ClaimState::Claimed(invocation);
            out.push(msg.clone());
        }
        let entry = self
            .claims
            .entry(invocation)
            .or_insert_with(|| (InvocationClaims::Active, Vec::new()));
        entry
            .1
            .extend(picked.iter().map(|o| (topic_name.to_string(), *o)));
        for offset in picked {
            self.record(topic_name, offset, "claim", now);
        }
        Ok(out)
    }

    /// Marks all of an invocation's claims consumed. Call only after the
    /// invocation's output has been published.
    pub fn ack(&mut self, invocation: InvocationId, now: VirtualTime) -> Result<(), BrokerError> {
        self.settle(invocation, true, now)
    }

    /// Returns all of an invocation's claims to the unclaimed pool (crash path).
    pub fn release(
        &mut self,
        invocation: InvocationId,
        now: VirtualTime,
    ) -> Result<(), BrokerError> {
        self.settle(invocation, false, now)
    }

    fn settle(
        &mut self,
        invocation: InvocationId,
        consume: bool,
        now: VirtualTime,
    ) -> Result<(), BrokerError> {
        let (state, owned) = self
            .claims
            .get_mut(&invocation)
            .ok_or(BrokerError::UnknownInvocation(invocation))?;
        if *state != InvocationClaims::Active {
            return Err(BrokerError::InvocationFinished(invocation));
        }
        *state = if consume {
            InvocationClaims::Acked
        } else {
            InvocationClaims::Released
        };
        let owned = std::mem::take(owned);
        for (topic_name, offset) in owned {
            let topic = self.topics.get_mut(&topic_name).expect("claimed topic");
            let msg = &mut topic.messages[offset as usize];
            debug_assert_eq!(msg.claim_state, ClaimState::Claimed(invocation));
            if consume {
                msg.claim_state = ClaimState::Consumed;
                self.record(&topic_name, offset, "consume", now);
            } else {
                msg.claim_state = ClaimState::Unclaimed;
                let class = Topic::class_of(&msg.payload);
                topic.unclaimed.entry(class).or_default().insert(offset);
                self.record(&topic_name, offset, "release", now);
            }
        }
        Ok(())
    }

    /// Non-destructive read of the newest message matching the filter.
    /// Used by parties to download the current global model.
    pub fn read_latest(
        &self,
        topic_name: &str,
        filter: MessageFilter,
        reader: Role,
    ) -> Result<Option<Payload>, BrokerError> {
        let topic = self.topic(topic_name)?;
        if !topic.acl.may_consume(reader) {
            return Err(BrokerError::AclDenied {
                role: reader.label(),
                action: "consume",
                topic: topic_name.to_string(),
            });
        }
        Ok(topic
            .messages
            .iter()
            .rev()
            .find(|m| {
                m.payload.kind() == filter.kind
                    && filter.round.is_none_or(|r| m.payload.round() == r)
            })
            .map(|m| m.payload.clone()))
    }

    /// Oldest unclaimed message matching the filter, without claiming it.
    pub fn peek_unclaimed(
        &self,
        topic_name: &str,
        filter: MessageFilter,
    ) -> Option<&QueuedMessage> {
        let topic = self.topic(topic_name).ok()?;
        match filter.round {
            Some(round) => topic
                .unclaimed
                .get(&(filter.kind, round))
                .and_then(|set| set.first())
                .map(|&offset| &topic.messages[offset as usize]),
            None => topic
                .unclaimed
                .iter()
                .filter(|((kind, _), _)| *kind == filter.kind)
                .flat_map(|(_, set)| set.iter().copied())
                .min()
                .map(|offset| &topic.messages[offset as usize]),
        }
    }

    /// Withdraws a message from the claimable pool while leaving it in the
    /// log as Unclaimed. Used to discard late updates at round close: they
    /// stay durably stored but are never aggregated.
    pub fn quarantine(&mut self, topic_name: &str, offset: u64) -> Result<(), BrokerError> {
        let topic = self.topic_mut(topic_name)?;
        let class = Topic::class_of(&topic.messages[offset as usize].payload);
        if let Some(set) = topic.unclaimed.get_mut(&class) {
            set.remove(&offset);
        }
        Ok(())
    }

    pub fn unclaimed_count(&self, topic_name: &str, filter: MessageFilter) -> usize {
        let Ok(topic) = self.topic(topic_name) else {
            return 0;
        };
        match filter.round {
            Some(round) => topic
                .unclaimed
                .get(&(filter.kind, round))
                .map_or(0, |s| s.len()),
            None => topic
                .unclaimed
                .iter()
                .filter(|((kind, _), _)| *kind == filter.kind)
                .map(|(_, s)| s.len())
                .sum(),
        }
    }

    pub fn message_count(&self, topic_name: &str) -> usize {
        self.topic(topic_name).map_or(0, |t| t.messages.len())
    }

    /// Iterates every message of a topic (audit support).
    pub fn messages(&self, topic_name: &str) -> Result<&[QueuedMessage], BrokerError> {
        Ok(&self.topic(topic_name)?.messages)
    }

    /// End-of-run audit: counts of messages per claim state across topics.
    /// A nonzero `claimed` means some invocation neither acked nor released.
    pub fn audit_states(&self) -> AuditCounts {
        let mut counts = AuditCounts::default();
        for topic in self.topics.values() {
            for msg in &topic.messages {
                match msg.claim_state {
                    ClaimState::Unclaimed => counts.unclaimed += 1,
                    ClaimState::Claimed(_) => counts.claimed += 1,
                    ClaimState::Consumed => counts.consumed += 1,
                }
            }
        }
        counts
    }

    /// Serializes the trace as newline-delimited JSON, one record per line.
    pub fn trace_ndjson(&self) -> Option<String> {
        self.trace.as_ref().map(|records| {
            let mut out = String::new();
            for r in records {
                out.push_str(&serde_json::to_string(r).expect("trace serializes"));
                out.push('\n');
            }
            out
        })
    }
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct AuditCounts {
    pub unclaimed: usize,
    pub claimed: usize,
    pub consumed: usize,
}
