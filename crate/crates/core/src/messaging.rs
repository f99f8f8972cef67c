//! Envelope routing over a simulated network.
//!
//! The [`Router`] owns a discrete clock and a delivery queue. Every send is
//! checked against the registry (registration gate, environment isolation,
//! introduction tokens), then scheduled with seeded latency jitter or dropped.
//! Partitions never drop: a message whose endpoints sit in different cells is
//! held until a network change heals the split.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::identification::Verdict;
use crate::ids::{AgentId, ContractId, ConversationId, EnvironmentId, TaskId, Tick};
use crate::rational::Rational;
use crate::registrar::{is_registrar, Registry};
use crate::rng::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MsgType {
    Request,
    Ack,
    Feedback,
    Offer,
    Bid,
    Award,
    Status,
    Cancel,
    Introduce,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestBody {
    pub subject: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AckBody {
    pub subject: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackBody {
    pub verdict: Verdict,
    #[serde(default)]
    pub comment: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfferBody {
    pub task_id: TaskId,
    pub round: u32,
    pub price: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BidBody {
    pub task_id: TaskId,
    pub auction_id: String,
    pub price: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AwardBody {
    pub task_id: TaskId,
    pub contract_id: ContractId,
    pub price: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusBody {
    pub subject: String,
    #[serde(default)]
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CancelBody {
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntroduceBody {
    pub token_id: String,
    pub requester: AgentId,
    pub provider: AgentId,
}

/// Typed payload; the variant fixes the envelope's `msg_type`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum Body {
    Request(RequestBody),
    Ack(AckBody),
    Feedback(FeedbackBody),
    Offer(OfferBody),
    Bid(BidBody),
    Award(AwardBody),
    Status(StatusBody),
    Cancel(CancelBody),
    Introduce(IntroduceBody),
}

impl Body {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Body::Request(_) => MsgType::Request,
            Body::Ack(_) => MsgType::Ack,
            Body::Feedback(_) => MsgType::Feedback,
            Body::Offer(_) => MsgType::Offer,
            Body::Bid(_) => MsgType::Bid,
            Body::Award(_) => MsgType::Award,
            Body::Status(_) => MsgType::Status,
            Body::Cancel(_) => MsgType::Cancel,
            Body::Introduce(_) => MsgType::Introduce,
        }
    }

    /// Decodes a JSON body under the schema selected by `msg_type`.
    pub fn from_value(msg_type: MsgType, value: Value) -> Result<Body, serde_json::Error> {
        Ok(match msg_type {
            MsgType::Request => Body::Request(serde_json::from_value(value)?),
            MsgType::Ack => Body::Ack(serde_json::from_value(value)?),
            MsgType::Feedback => Body::Feedback(serde_json::from_value(value)?),
            MsgType::Offer => Body::Offer(serde_json::from_value(value)?),
            MsgType::Bid => Body::Bid(serde_json::from_value(value)?),
            MsgType::Award => Body::Award(serde_json::from_value(value)?),
            MsgType::Status => Body::Status(serde_json::from_value(value)?),
            MsgType::Cancel => Body::Cancel(serde_json::from_value(value)?),
            MsgType::Introduce => Body::Introduce(serde_json::from_value(value)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvelopeError {
    #[error("msg_type {declared:?} does not match a {actual:?} body")]
    BodyMismatch { declared: MsgType, actual: MsgType },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub conversation_id: ConversationId,
    pub sender: AgentId,
    pub recipient: AgentId,
    pub environment: EnvironmentId,
    msg_type: MsgType,
    pub seq: u64,
    body: Body,
}

impl Envelope {
    pub fn new(
        conversation_id: ConversationId,
        sender: AgentId,
        recipient: AgentId,
        environment: EnvironmentId,
        seq: u64,
        body: Body,
    ) -> Self {
        Self {
            conversation_id,
            sender,
            recipient,
            environment,
            msg_type: body.msg_type(),
            seq,
            body,
        }
    }

    /// Fails when `msg_type` disagrees with the body's schema.
    pub fn try_new(
        conversation_id: ConversationId,
        sender: AgentId,
        recipient: AgentId,
        environment: EnvironmentId,
        msg_type: MsgType,
        seq: u64,
        body: Body,
    ) -> Result<Self, EnvelopeError> {
        if body.msg_type() != msg_type {
            return Err(EnvelopeError::BodyMismatch {
                declared: msg_type,
                actual: body.msg_type(),
            });
        }
        Ok(Self::new(
            conversation_id,
            sender,
            recipient,
            environment,
            seq,
            body,
        ))
    }

    pub fn msg_type(&self) -> MsgType {
        self.msg_type
    }

    pub fn body(&self) -> &Body {
        &self.body
    }

    pub fn into_body(self) -> Body {
        self.body
    }

    /// Same envelope under a new sequence number (used for retransmission).
    pub fn with_seq(mut self, seq: u64) -> Self {
        self.seq = seq;
        self
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    conversation_id: &'a ConversationId,
    sender: &'a AgentId,
    recipient: &'a AgentId,
    environment: &'a EnvironmentId,
    msg_type: MsgType,
    seq: u64,
    body: &'a Body,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvelopeIn {
    conversation_id: ConversationId,
    sender: AgentId,
    recipient: AgentId,
    environment: EnvironmentId,
    msg_type: MsgType,
    seq: u64,
    body: Value,
}

impl Serialize for Envelope {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        EnvelopeOut {
            conversation_id: &self.conversation_id,
            sender: &self.sender,
            recipient: &self.recipient,
            environment: &self.environment,
            msg_type: self.msg_type,
            seq: self.seq,
            body: &self.body,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Envelope {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = EnvelopeIn::deserialize(deserializer)?;
        let body = Body::from_value(raw.msg_type, raw.body).map_err(D::Error::custom)?;
        Ok(Envelope {
            conversation_id: raw.conversation_id,
            sender: raw.sender,
            recipient: raw.recipient,
            environment: raw.environment,
            msg_type: raw.msg_type,
            seq: raw.seq,
            body,
        })
    }
}

/// Per-sender sequence numbers; strictly increasing for every sender.
#[derive(Debug, Clone, Default)]
pub struct Sequencer {
    next: BTreeMap<AgentId, u64>,
}

impl Sequencer {
    pub fn next(&mut self, sender: &AgentId) -> u64 {
        let slot = self.next.entry(sender.clone()).or_insert(0);
        *slot += 1;
        *slot
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkState {
    #[serde(default = "default_latency")]
    pub base_latency: Tick,
    #[serde(default)]
    pub jitter: Tick,
    #[serde(default)]
    pub drop_probability: Rational,
    /// Disjoint cells. Agents outside every listed cell share an implicit cell.
    #[serde(default)]
    pub partitions: Vec<BTreeSet<AgentId>>,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_latency() -> Tick {
    1
}

impl Default for NetworkState {
    fn default() -> Self {
        Self {
            base_latency: default_latency(),
            jitter: 0,
            drop_probability: Rational::ZERO,
            partitions: Vec::new(),
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NetworkError {
    #[error("agent `{0}` appears in more than one partition cell")]
    OverlappingPartitionCells(AgentId),
    #[error("drop probability {0} outside [0, 1]")]
    InvalidDropProbability(Rational),
    #[error("network change at tick {at} is before the current tick {now}")]
    PastTick { at: Tick, now: Tick },
}

impl NetworkState {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.drop_probability < Rational::ZERO || self.drop_probability > Rational::ONE {
            return Err(NetworkError::InvalidDropProbability(self.drop_probability));
        }
        let mut seen = BTreeSet::new();
        for cell in &self.partitions {
            for agent in cell {
                if !seen.insert(agent) {
                    return Err(NetworkError::OverlappingPartitionCells(agent.clone()));
                }
            }
        }
        Ok(())
    }

    fn cell_of(&self, agent: &AgentId) -> Option<usize> {
        self.partitions.iter().position(|cell| cell.contains(agent))
    }

    /// True when `a` and `b` sit in different partition cells.
    pub fn separated(&self, a: &AgentId, b: &AgentId) -> bool {
        self.cell_of(a) != self.cell_of(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    SecurityViolation,
    EnvironmentViolation,
    SequenceViolation,
    StaleTick,
}

/// Why a cross-environment envelope was allowed through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exemption {
    Registrar,
    Introduction { token_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendReceipt {
    Queued {
        deliver_at: Tick,
        exemption: Option<Exemption>,
    },
    /// Accepted by the router but lost to the seeded drop draw.
    Dropped {
        exemption: Option<Exemption>,
    },
    Rejected(RejectReason),
}

impl SendReceipt {
    pub fn is_rejected(&self) -> bool {
        matches!(self, SendReceipt::Rejected(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Delivery {
    pub tick: Tick,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RouterStats {
    pub queued: u64,
    pub dropped: u64,
    pub rejected: u64,
    pub delivered: u64,
    pub held: u64,
}

type QueueKey = (Tick, AgentId, u64, ConversationId);
type ChannelKey = (AgentId, ConversationId);

#[derive(Debug, Clone)]
pub struct Router {
    clock: Tick,
    state: NetworkState,
    pending: Vec<(Tick, NetworkState)>,
    rng_seed: u64,
    rng: DetRng,
    queue: BTreeMap<QueueKey, Envelope>,
    held: Vec<Envelope>,
    held_per_channel: BTreeMap<ChannelKey, usize>,
    last_seq: BTreeMap<ChannelKey, u64>,
    last_deliver_at: BTreeMap<ChannelKey, Tick>,
    stats: RouterStats,
}

impl Router {
    pub fn new(state: NetworkState) -> Result<Self, NetworkError> {
        state.validate()?;
        Ok(Self {
            clock: 0,
            rng_seed: state.rng_seed,
            rng: DetRng::new(state.rng_seed),
            state,
            pending: Vec::new(),
            queue: BTreeMap::new(),
            held: Vec::new(),
            held_per_channel: BTreeMap::new(),
            last_seq: BTreeMap::new(),
            last_deliver_at: BTreeMap::new(),
            stats: RouterStats::default(),
        })
    }

    pub fn now(&self) -> Tick {
        self.clock
    }

    pub fn stats(&self) -> RouterStats {
        self.stats
    }

    /// State that governs sends issued at `tick`.
    pub fn state_at(&self, tick: Tick) -> &NetworkState {
        self.pending
            .iter()
            .rev()
            .find(|(at, _)| *at <= tick)
            .map(|(_, s)| s)
            .unwrap_or(&self.state)
    }

    pub fn held_count(&self) -> usize {
        self.held.len()
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    /// Earliest tick at which something will happen (a delivery or a
    /// network change), if anything is scheduled.
    pub fn next_event_tick(&self) -> Option<Tick> {
        let delivery = self.queue.keys().next().map(|k| k.0);
        let change = self.pending.first().map(|(at, _)| *at);
        match (delivery, change) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn send(&mut self, registry: &Registry, envelope: Envelope, now: Tick) -> SendReceipt {
        match self.admit(registry, &envelope, now) {
            Ok(exemption) => self.schedule(envelope, now, exemption),
            Err(reason) => {
                self.stats.rejected += 1;
                SendReceipt::Rejected(reason)
            }
        }
    }

    fn admit(
        &self,
        registry: &Registry,
        envelope: &Envelope,
        now: Tick,
    ) -> Result<Option<Exemption>, RejectReason> {
        if now < self.clock {
            return Err(RejectReason::StaleTick);
        }
        let sender = &envelope.sender;
        let recipient = &envelope.recipient;
        if !registry.is_registered(sender) || !registry.is_registered(recipient) {
            return Err(RejectReason::SecurityViolation);
        }
        let exemption = match (is_registrar(sender), is_registrar(recipient)) {
            (true, true) => None,
            (true, false) => {
                if registry.environment_of(recipient) != Some(&envelope.environment) {
                    return Err(RejectReason::EnvironmentViolation);
                }
                Some(Exemption::Registrar)
            }
            (false, true) => {
                if registry.environment_of(sender) != Some(&envelope.environment) {
                    return Err(RejectReason::EnvironmentViolation);
                }
                Some(Exemption::Registrar)
            }
            (false, false) => {
                let from = registry.environment_of(sender);
                if from != Some(&envelope.environment) {
                    return Err(RejectReason::EnvironmentViolation);
                }
                if from == registry.environment_of(recipient) {
                    None
                } else {
                    let token = registry
                        .token_for(&envelope.conversation_id, sender, recipient)
                        .ok_or(RejectReason::EnvironmentViolation)?;
                    Some(Exemption::Introduction {
                        token_id: token.token_id.clone(),
                    })
                }
            }
        };
        let channel = (sender.clone(), envelope.conversation_id.clone());
        if let Some(last) = self.last_seq.get(&channel) {
            if envelope.seq <= *last {
                return Err(RejectReason::SequenceViolation);
            }
        }
        Ok(exemption)
    }

    fn schedule(
        &mut self,
        envelope: Envelope,
        now: Tick,
        exemption: Option<Exemption>,
    ) -> SendReceipt {
        let state = self.state_at(now).clone();
        if state.rng_seed != self.rng_seed {
            self.rng_seed = state.rng_seed;
            self.rng = DetRng::new(state.rng_seed);
        }
        // Both draws are always taken so the stream position depends only on
        // the number of admitted sends.
        let jitter = self.rng.up_to(state.jitter);
        let dropped = self.rng.chance(state.drop_probability);
        let channel = (envelope.sender.clone(), envelope.conversation_id.clone());
        self.last_seq.insert(channel.clone(), envelope.seq);
        if dropped {
            self.stats.dropped += 1;
            return SendReceipt::Dropped { exemption };
        }
        let mut deliver_at = now + state.base_latency + jitter;
        if let Some(prev) = self.last_deliver_at.get(&channel) {
            deliver_at = deliver_at.max(*prev);
        }
        self.last_deliver_at.insert(channel, deliver_at);
        self.enqueue(deliver_at, envelope);
        self.stats.queued += 1;
        SendReceipt::Queued {
            deliver_at,
            exemption,
        }
    }

    fn enqueue(&mut self, at: Tick, envelope: Envelope) {
        let key = (
            at,
            envelope.sender.clone(),
            envelope.seq,
            envelope.conversation_id.clone(),
        );
        self.queue.insert(key, envelope);
    }

    /// Replaces the network state from tick `at` on. Messages already queued
    /// keep their schedule; held messages whose endpoints are reunited are
    /// released at `at + base_latency`.
    pub fn set_network(&mut self, state: NetworkState, at: Tick) -> Result<(), NetworkError> {
        state.validate()?;
        if at < self.clock {
            return Err(NetworkError::PastTick {
                at,
                now: self.clock,
            });
        }
        let index = self.pending.partition_point(|(t, _)| *t <= at);
        self.pending.insert(index, (at, state));
        Ok(())
    }

    fn apply_change(&mut self, at: Tick, state: NetworkState) {
        self.state = state;
        let held = core::mem::take(&mut self.held);
        let mut still_blocked: BTreeSet<ChannelKey> = BTreeSet::new();
        for envelope in held {
            let channel = (envelope.sender.clone(), envelope.conversation_id.clone());
            if still_blocked.contains(&channel)
                || self.state.separated(&envelope.sender, &envelope.recipient)
            {
                still_blocked.insert(channel);
                self.held.push(envelope);
                continue;
            }
            let mut deliver_at = at + self.state.base_latency;
            if let Some(prev) = self.last_deliver_at.get(&channel) {
                deliver_at = deliver_at.max(*prev);
            }
            self.last_deliver_at.insert(channel.clone(), deliver_at);
            if let Some(count) = self.held_per_channel.get_mut(&channel) {
                *count -= 1;
                if *count == 0 {
                    self.held_per_channel.remove(&channel);
                }
            }
            self.enqueue(deliver_at, envelope);
        }
    }

    /// Delivers everything due in `(now, until]`, ordered by
    /// `(tick, sender, seq)`. Network changes due at a tick apply before that
    /// tick's deliveries.
    pub fn advance(&mut self, until: Tick) -> Vec<Delivery> {
        let mut out = Vec::new();
        if until < self.clock {
            return out;
        }
        loop {
            let next_change = self
                .pending
                .first()
                .map(|(at, _)| *at)
                .filter(|at| *at <= until);
            let next_delivery = self
                .queue
                .keys()
                .next()
                .map(|k| k.0)
                .filter(|t| *t <= until);
            match (next_change, next_delivery) {
                (Some(c), d) if d.is_none_or(|d| c <= d) => {
                    let (at, state) = self.pending.remove(0);
                    self.clock = self.clock.max(at);
                    self.apply_change(at, state);
                }
                (_, Some(_)) => {
                    let Some((key, envelope)) = self.queue.pop_first() else {
                        break;
                    };
                    self.clock = self.clock.max(key.0);
                    let channel = (envelope.sender.clone(), envelope.conversation_id.clone());
                    if self.held_per_channel.contains_key(&channel)
                        || self.state.separated(&envelope.sender, &envelope.recipient)
                    {
                        *self.held_per_channel.entry(channel).or_insert(0) += 1;
                        self.held.push(envelope);
                        self.stats.held += 1;
                        continue;
                    }
                    self.stats.delivered += 1;
                    out.push(Delivery {
                        tick: key.0,
                        envelope,
                    });
                }
                _ => break,
            }
        }
        self.clock = until;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::Capability;
    use crate::registrar::{registrar_id, AgentKind, Registration};
    use alloc::vec;

    fn reg(id: &str, env: &str) -> Registration {
        Registration {
            agent_id: id.into(),
            kind: AgentKind::Provider,
            environment: env.into(),
            domains: BTreeSet::new(),
            capabilities: [Capability::from("x")].into_iter().collect(),
            price_schedule: BTreeMap::new(),
            location: String::new(),
            registered_at: 0,
        }
    }

    fn registry() -> Registry {
        let mut r = Registry::new();
        r.register(reg("A", "identification")).unwrap();
        r.register(reg("B", "identification")).unwrap();
        r.register(reg("C", "provisioning")).unwrap();
        r
    }

    fn status(conv: &str, from: &str, to: &str, env: &str, seq: u64) -> Envelope {
        Envelope::new(
            conv.into(),
            from.into(),
            to.into(),
            env.into(),
            seq,
            Body::Status(StatusBody {
                subject: "ping".into(),
                detail: Value::Null,
            }),
        )
    }

    fn net(latency: Tick) -> NetworkState {
        NetworkState {
            base_latency: latency,
            ..NetworkState::default()
        }
    }

    #[test]
    fn zero_jitter_schedule() {
        let registry = registry();
        let mut router = Router::new(net(2)).unwrap();
        router.advance(5);
        let receipt = router.send(&registry, status("c", "A", "B", "identification", 1), 5);
        assert_eq!(
            receipt,
            SendReceipt::Queued {
                deliver_at: 7,
                exemption: None
            }
        );
    }

    #[test]
    fn isolation_and_security() {
        let registry = registry();
        let mut router = Router::new(net(1)).unwrap();
        assert_eq!(
            router.send(&registry, status("c", "A", "C", "identification", 1), 0),
            SendReceipt::Rejected(RejectReason::EnvironmentViolation)
        );
        assert_eq!(
            router.send(&registry, status("c", "X", "B", "identification", 1), 0),
            SendReceipt::Rejected(RejectReason::SecurityViolation)
        );
        // The registrar bridges environments.
        let receipt = router.send(
            &registry,
            status("c", REGISTRAR_ID_STR, "C", "provisioning", 1),
            0,
        );
        assert!(matches!(
            receipt,
            SendReceipt::Queued {
                exemption: Some(Exemption::Registrar),
                ..
            }
        ));
        // Spoofed environment field.
        assert_eq!(
            router.send(&registry, status("d", "A", "B", "provisioning", 1), 0),
            SendReceipt::Rejected(RejectReason::EnvironmentViolation)
        );
    }

    const REGISTRAR_ID_STR: &str = crate::registrar::REGISTRAR_ID;

    #[test]
    fn introduction_token_exempts_cross_environment() {
        let mut registry = registry();
        let token = registry.introduce(&"A".into(), &"C".into()).unwrap();
        let mut router = Router::new(net(1)).unwrap();
        let env = Envelope::new(
            token.conversation_id.clone(),
            "A".into(),
            "C".into(),
            "identification".into(),
            1,
            Body::Offer(OfferBody {
                task_id: "t1".into(),
                round: 0,
                price: Rational::integer(10),
            }),
        );
        let receipt = router.send(&registry, env, 0);
        assert_eq!(
            receipt,
            SendReceipt::Queued {
                deliver_at: 1,
                exemption: Some(Exemption::Introduction {
                    token_id: token.token_id.clone()
                })
            }
        );
        assert_eq!(router.advance(1).len(), 1);
    }

    #[test]
    fn sequence_must_increase() {
        let registry = registry();
        let mut router = Router::new(net(1)).unwrap();
        assert!(!router
            .send(&registry, status("c", "A", "B", "identification", 2), 0)
            .is_rejected());
        assert_eq!(
            router.send(&registry, status("c", "A", "B", "identification", 2), 0),
            SendReceipt::Rejected(RejectReason::SequenceViolation)
        );
    }

    #[test]
    fn advance_orders_by_tick() {
        let registry = registry();
        let mut router = Router::new(net(0)).unwrap();
        router.advance(0);
        // m1 lands at 7, m2 at 6.
        router.set_network(net(7), 0).unwrap();
        router.send(&registry, status("c1", "A", "B", "identification", 1), 0);
        router.set_network(net(6), 0).unwrap();
        router.send(&registry, status("c2", "B", "A", "identification", 1), 0);
        let out = router.advance(10);
        let ticks: Vec<Tick> = out.iter().map(|d| d.tick).collect();
        assert_eq!(ticks, vec![6, 7]);
        assert_eq!(out[0].envelope.conversation_id, ConversationId::from("c2"));
    }

    #[test]
    fn partition_holds_then_heal_releases() {
        let registry = registry();
        let split = NetworkState {
            base_latency: 1,
            partitions: vec![
                [AgentId::from("A")].into_iter().collect(),
                [AgentId::from("B")].into_iter().collect(),
            ],
            ..NetworkState::default()
        };
        let mut router = Router::new(split).unwrap();
        router.send(&registry, status("c", "A", "B", "identification", 1), 0);
        router.send(&registry, status("c", "A", "B", "identification", 2), 0);
        assert!(router.advance(100).is_empty());
        assert_eq!(router.held_count(), 2);
        router.set_network(net(1), 100).unwrap();
        let out = router.advance(101);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|d| d.tick == 101));
        assert_eq!(out[0].envelope.seq, 1);
        assert_eq!(out[1].envelope.seq, 2);
    }

    #[test]
    fn overlapping_cells_rejected() {
        let mut router = Router::new(net(1)).unwrap();
        let bad = NetworkState {
            partitions: vec![
                ["A", "B"].iter().map(|a| AgentId::from(*a)).collect(),
                ["B", "C"].iter().map(|a| AgentId::from(*a)).collect(),
            ],
            ..NetworkState::default()
        };
        assert_eq!(
            router.set_network(bad, 0),
            Err(NetworkError::OverlappingPartitionCells("B".into()))
        );
    }

    #[test]
    fn drop_probability_applies_from_change_tick() {
        let registry = registry();
        let mut router = Router::new(net(1)).unwrap();
        let lossy = NetworkState {
            drop_probability: Rational::ONE,
            ..net(1)
        };
        router.set_network(lossy, 10).unwrap();
        assert!(matches!(
            router.send(&registry, status("c", "A", "B", "identification", 1), 9),
            SendReceipt::Queued { .. }
        ));
        router.advance(10);
        assert!(matches!(
            router.send(&registry, status("c", "A", "B", "identification", 2), 10),
            SendReceipt::Dropped { .. }
        ));
    }

    #[test]
    fn envelope_json_keys_and_mismatch() {
        let env = status("c", "A", "B", "identification", 3);
        let json = serde_json::to_string(&env).unwrap();
        assert_eq!(
            json,
            r#"{"conversation_id":"c","sender":"A","recipient":"B","environment":"identification","msg_type":"Status","seq":3,"body":{"subject":"ping","detail":null}}"#
        );
        let back: Envelope = serde_json::from_str(&json).unwrap();
        assert_eq!(back, env);

        let wrong = json.replace("\"Status\"", "\"Bid\"");
        assert!(serde_json::from_str::<Envelope>(&wrong).is_err());
        let err = Envelope::try_new(
            "c".into(),
            "A".into(),
            "B".into(),
            "identification".into(),
            MsgType::Award,
            1,
            env.body().clone(),
        );
        assert!(matches!(err, Err(EnvelopeError::BodyMismatch { .. })));
        let _ = registrar_id();
    }
}
