//! The run engine: one discrete-event loop per run that carries a request
//! through identification, planning, provisioning and execution over the
//! simulated network, writing every step to the event log.
//!
//! Scripted agents answer the moment a solicitation reaches them. Interactive
//! agents turn solicitations into prompts; when nothing else can happen the
//! engine parks until a [`Command`] answers one of them.

use std::collections::{BTreeMap, BTreeSet};

use agora_core::identification::{
    check_consumer_input, emit_descriptors, parse_request, solicit_feedback, step_identification,
    DescriptorSet, ExpertFeedback, IdentificationLimits, QuerySemantics, QueryStatus, RoundInput,
    Verdict,
};
use agora_core::messaging::{
    AckBody, AwardBody, BidBody, Body, Envelope, FeedbackBody, IntroduceBody, NetworkState,
    OfferBody, RequestBody, Router, SendReceipt, Sequencer,
};
use agora_core::planner::{
    apply_critique, decompose_workflow, draft_workflow, validate_workflow, EditOp, ExpertEdit,
    Workflow,
};
use agora_core::provisioning::{
    award, contract_id, map_providers, quotes_for, Contract, ContractStatus, ExecutionEvent,
    ExecutionOutcome, Executor, MechanismConfig, MechanismTrace, ProviderProfile,
    ProvisioningError, RequestBook, RequestPhase,
};
use agora_core::registrar::{is_registrar, registrar_id, AgentKind, Registry};
use agora_core::rng::derive_seed;
use agora_core::{AgentId, ConversationId, Rational, TaskId, Tick};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::record::{Header, LogLine, Metrics, Outcome, OutcomeDetail, RunRecord};
use crate::scenario::{Policy, Scenario, ScriptedPolicy};
use crate::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Scripted,
    Interactive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub mode: RunMode,
    pub scenario_hint: Option<String>,
}

impl RunConfig {
    /// Run id derived from the scenario digest and seed, so headless runs
    /// of the same input produce identical logs.
    pub fn headless(scenario: &Scenario, seed: u64, hint: Option<String>) -> Self {
        let id = derive_seed(seed, &["run", &scenario.digest()]);
        Self {
            run_id: format!("run-{id:016x}"),
            seed,
            mode: RunMode::Scripted,
            scenario_hint: hint,
        }
    }
}

/// Human input to a parked run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    ConsumerInput {
        #[serde(default)]
        attributes: BTreeMap<String, String>,
        #[serde(default)]
        confirm: Option<bool>,
        #[serde(default)]
        abandon: bool,
    },
    ExpertFeedback {
        expert_id: AgentId,
        verdict: Verdict,
        #[serde(default)]
        comment: String,
    },
    WorkflowCritique {
        expert_id: AgentId,
        #[serde(default)]
        edits: Vec<EditOp>,
    },
    /// The interactive timeout elapsed with no input.
    Idle,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommandError {
    /// Well-formed but not applicable in the current state.
    #[error("{reason}: {message}")]
    Conflict { reason: String, message: String },
    /// Malformed content.
    #[error("{0}")]
    Invalid(String),
}

impl CommandError {
    fn conflict(reason: &str, message: impl Into<String>) -> Self {
        CommandError::Conflict {
            reason: reason.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("interactive policy for `{0}` requires interactive mode")]
    InteractiveNotAllowed(AgentId),
    #[error("network: {0}")]
    Network(#[from] agora_core::messaging::NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Clarify,
    Feedback,
    Critique,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub agent_id: AgentId,
    pub kind: PromptKind,
    pub conversation_id: ConversationId,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Parked,
    Terminal(OutcomeDetail),
}

struct Identification {
    sem: QuerySemantics,
    experts: Vec<AgentId>,
    awaiting: BTreeSet<AgentId>,
    feedbacks: BTreeMap<AgentId, ExpertFeedback>,
    consumer_input: BTreeMap<String, String>,
    confirmed: bool,
}

struct Planning {
    descriptors: DescriptorSet,
    workflow: Workflow,
    round: u32,
    experts: Vec<AgentId>,
    awaiting: BTreeSet<AgentId>,
    edits: BTreeMap<AgentId, Vec<EditOp>>,
}

struct Provisioning {
    workflow: Workflow,
    candidates: BTreeMap<TaskId, Vec<AgentId>>,
    order: Vec<TaskId>,
    index: usize,
    contracts: Vec<Contract>,
    awaiting_award: Option<(ConversationId, Contract)>,
    orchestrator: AgentId,
}

struct Execution {
    executor: Executor,
    events: Vec<ExecutionEvent>,
    orchestrator: AgentId,
    workflow: Workflow,
}

enum Stage {
    Identification(Identification),
    Planning(Planning),
    Provisioning(Provisioning),
    Execution(Box<Execution>),
    Done,
}

pub struct Engine {
    scenario: Scenario,
    config: RunConfig,
    limits: IdentificationLimits,
    registry: Registry,
    router: Router,
    sequencer: Sequencer,
    book: RequestBook,
    profiles: BTreeMap<AgentId, ProviderProfile>,
    mechanism: MechanismConfig,
    interactive: BTreeSet<AgentId>,
    clock: Tick,
    lines: Vec<String>,
    events: Vec<LogLine>,
    retransmits: BTreeMap<(Tick, u64), Envelope>,
    retransmit_counter: u64,
    network_log: Vec<(Tick, NetworkState)>,
    departures: Vec<(Tick, AgentId)>,
    phase_departures: Vec<(Phase, AgentId)>,
    abandon_at_tick: Option<Tick>,
    abandon_at_phase: Option<Phase>,
    stage: Stage,
    phase: Option<Phase>,
    timer: Option<Tick>,
    prompts: BTreeMap<ConversationId, Prompt>,
    outcome: Option<OutcomeDetail>,
    last_sem: Option<QuerySemantics>,
    last_workflow: Option<Workflow>,
    contracts: Vec<Contract>,
}

/// Mixes the run seed into a network state's own seed.
fn seeded(state: &NetworkState, seed: u64) -> NetworkState {
    let mut s = state.clone();
    s.rng_seed = derive_seed(seed, &["network", &state.rng_seed.to_string()]);
    s
}

fn to_value<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("engine values serialize")
}

impl Engine {
    pub fn new(scenario: Scenario, config: RunConfig) -> Result<Engine, EngineError> {
        let mut interactive = scenario.interactive_agents();
        if config.mode == RunMode::Scripted {
            if let Some(id) = interactive.iter().next() {
                return Err(EngineError::InteractiveNotAllowed(id.clone()));
            }
        } else {
            // Unscripted humans: the consumer and every expert.
            for r in &scenario.registrations {
                let human = r.kind == AgentKind::Consumer || r.kind.is_expert();
                if human && scenario.policy(&r.agent_id).is_none() {
                    interactive.insert(r.agent_id.clone());
                }
            }
        }
        let mut router = Router::new(seeded(&scenario.network, config.seed))?;
        for change in &scenario.network_changes {
            router.set_network(seeded(&change.state, config.seed), change.at)?;
        }
        let consumer_policy = match scenario.policy(&scenario.request.consumer_id) {
            Some(Policy::Scripted(p)) => p.clone(),
            _ => ScriptedPolicy::default(),
        };
        let mut departures = Vec::new();
        let mut phase_departures = Vec::new();
        for d in &scenario.departures {
            match (d.at, d.at_phase) {
                (Some(at), _) => departures.push((at, d.agent_id.clone())),
                (None, Some(phase)) => phase_departures.push((phase, d.agent_id.clone())),
                _ => {}
            }
        }
        departures.sort();
        let mechanism = MechanismConfig {
            negotiation: scenario.negotiation,
            rounds: scenario.limits.k,
            seed: config.seed,
        };
        let mut book = RequestBook::new();
        book.open(scenario.request.request_id.clone());
        Ok(Engine {
            limits: scenario.limits.identification(),
            registry: scenario.registry(),
            profiles: scenario.profiles(),
            network_log: scenario
                .network_changes
                .iter()
                .map(|c| (c.at, c.state.clone()))
                .collect(),
            abandon_at_tick: consumer_policy.abandon_at_tick,
            abandon_at_phase: consumer_policy.abandon_at_phase,
            scenario,
            config,
            router,
            sequencer: Sequencer::default(),
            book,
            mechanism,
            interactive,
            clock: 0,
            lines: Vec::new(),
            events: Vec::new(),
            retransmits: BTreeMap::new(),
            retransmit_counter: 0,
            departures,
            phase_departures,
            stage: Stage::Done,
            phase: None,
            timer: None,
            prompts: BTreeMap::new(),
            outcome: None,
            last_sem: None,
            last_workflow: None,
            contracts: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn events(&self) -> &[LogLine] {
        &self.events
    }

    pub fn outcome(&self) -> Option<&OutcomeDetail> {
        self.outcome.as_ref()
    }

    pub fn prompts(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts.values()
    }

    pub fn phase(&self) -> Option<Phase> {
        self.phase
    }

    pub fn idle_timeout(&self) -> Option<Tick> {
        self.scenario.limits.interactive_timeout_ticks
    }

    pub fn record(&self) -> RunRecord {
        RunRecord::from_lines(self.lines.clone()).expect("engine writes well-formed records")
    }

    /// JSON view for observers.
    pub fn snapshot(&self) -> Value {
        let status = match (&self.outcome, self.lines.is_empty()) {
            (Some(_), _) => "terminal",
            (None, true) => "created",
            (None, false) if !self.prompts.is_empty() => "parked",
            _ => "running",
        };
        json!({
            "run_id": self.config.run_id,
            "mode": self.config.mode,
            "status": status,
            "phase": self.phase,
            "tick": self.clock,
            "events": self.lines.len(),
            "outcome": self.outcome,
            "prompts": self.prompts.values().collect::<Vec<_>>(),
            "semantics": self.last_sem,
            "workflow": self.last_workflow,
            "contracts": self.contracts,
        })
    }

    fn emit(&mut self, event: &str, envelope: Option<&Envelope>, detail: Option<Value>) {
        debug_assert!(self.outcome.is_none(), "no events after the outcome");
        let line = LogLine {
            tick: self.clock,
            event: event.into(),
            envelope: envelope.cloned(),
            detail,
        };
        self.lines.push(line.to_json());
        self.events.push(line);
    }

    fn request_id(&self) -> &agora_core::RequestId {
        &self.scenario.request.request_id
    }

    fn consumer(&self) -> AgentId {
        self.scenario.request.consumer_id.clone()
    }

    fn policy_of(&self, agent: &AgentId) -> ScriptedPolicy {
        match self.scenario.policy(agent) {
            Some(Policy::Scripted(p)) => p.clone(),
            _ => ScriptedPolicy::default(),
        }
    }

    fn finish(&mut self, outcome: Outcome, task_id: Option<TaskId>, reason: Option<String>) {
        if self.outcome.is_some() {
            return;
        }
        if let Some(sem) = self.last_sem.as_mut() {
            if outcome == Outcome::Abandoned {
                sem.abandon();
            }
        }
        let _ = self.book.close(&self.scenario.request.request_id);
        self.stage = Stage::Done;
        self.prompts.clear();
        self.timer = None;
        let mut metrics = Metrics::from_events(&self.events);
        metrics.wall_ticks = self.clock;
        let detail = OutcomeDetail {
            outcome,
            task_id,
            reason,
            metrics,
        };
        self.emit("outcome", None, Some(to_value(&detail)));
        self.outcome = Some(detail);
    }

    /// Writes the header and starts identification.
    fn start(&mut self) {
        let header = Header {
            run_id: self.config.run_id.clone(),
            scenario_digest: self.scenario.digest(),
            seed: self.config.seed,
            mode: self.config.mode,
            scenario: self.config.scenario_hint.clone(),
        };
        self.emit("run", None, Some(to_value(&header)));
        self.enter_phase(Phase::Identification);
        if self.outcome.is_some() {
            return;
        }
        let request = &self.scenario.request;
        match parse_request(
            request.request_id.clone(),
            &request.text,
            &request.attachments,
            &self.scenario.ontology,
            &self.limits,
        ) {
            Ok(sem) => {
                self.emit("parsed", None, Some(json!({ "semantics": sem })));
                self.last_sem = Some(sem.clone());
                self.stage = Stage::Identification(Identification {
                    sem,
                    experts: Vec::new(),
                    awaiting: BTreeSet::new(),
                    feedbacks: BTreeMap::new(),
                    consumer_input: BTreeMap::new(),
                    confirmed: false,
                });
                self.begin_identification_round();
            }
            Err(e) => self.finish(Outcome::Unresolvable, None, Some(e.to_string())),
        }
    }

    fn enter_phase(&mut self, phase: Phase) {
        self.phase = Some(phase);
        self.emit("phase", None, Some(json!({ "phase": phase })));
        let request = self.request_id().clone();
        let book_phase = match phase {
            Phase::Identification => RequestPhase::Identification,
            Phase::Planning => RequestPhase::Planning,
            Phase::Provisioning => RequestPhase::Provisioning,
            Phase::Execution => RequestPhase::Execution,
        };
        let _ = self.book.advance(&request, book_phase);
        let leaving: Vec<AgentId> = self
            .phase_departures
            .iter()
            .filter(|(p, _)| *p == phase)
            .map(|(_, a)| a.clone())
            .collect();
        for agent in leaving {
            self.depart(&agent);
        }
        if self.abandon_at_phase == Some(phase) {
            self.abandon_at_phase = None;
            self.scripted_abandon();
        }
    }

    fn depart(&mut self, agent: &AgentId) {
        if self.registry.deregister(agent).is_ok() {
            self.emit("departure", None, Some(json!({ "agent_id": agent })));
        }
    }

    // ---- transport ----------------------------------------------------

    fn environment_for(
        &self,
        sender: &AgentId,
        recipient: &AgentId,
    ) -> Option<agora_core::EnvironmentId> {
        let anchor = if is_registrar(sender) {
            recipient
        } else {
            sender
        };
        self.registry.environment_of(anchor).cloned()
    }

    /// Sends on behalf of the request; silently refused once it is closed.
    fn transmit(
        &mut self,
        conversation: ConversationId,
        sender: AgentId,
        recipient: AgentId,
        body: Body,
    ) {
        if self.outcome.is_some() || self.book.guard(self.request_id()).is_err() {
            return;
        }
        self.transmit_unchecked(conversation, sender, recipient, body);
    }

    fn transmit_unchecked(
        &mut self,
        conversation: ConversationId,
        sender: AgentId,
        recipient: AgentId,
        body: Body,
    ) {
        // Departed senders keep their last environment label; the router rejects them.
        let environment = self
            .environment_for(&sender, &recipient)
            .unwrap_or_else(|| agora_core::EnvironmentId::from("unregistered"));
        let seq = self.sequencer.next(&sender);
        let envelope = Envelope::new(conversation, sender, recipient, environment, seq, body);
        self.send_envelope(envelope);
    }

    fn send_envelope(&mut self, envelope: Envelope) {
        match self
            .router
            .send(&self.registry, envelope.clone(), self.clock)
        {
            SendReceipt::Queued {
                deliver_at,
                exemption,
            } => {
                self.emit(
                    "send",
                    Some(&envelope),
                    Some(json!({ "deliver_at": deliver_at, "exemption": exemption })),
                );
            }
            SendReceipt::Dropped { exemption } => {
                let state = self.router.state_at(self.clock);
                let rto = 2 * (state.base_latency + state.jitter) + 1;
                let at = self.clock + rto;
                self.emit(
                    "send",
                    Some(&envelope),
                    Some(json!({ "dropped": true, "retransmit_at": at, "exemption": exemption })),
                );
                self.retransmit_counter += 1;
                self.retransmits
                    .insert((at, self.retransmit_counter), envelope);
            }
            SendReceipt::Rejected(reason) => {
                self.emit("reject", Some(&envelope), Some(json!({ "reason": reason })));
            }
        }
    }

    fn next_tick(&self) -> Option<Tick> {
        let candidates = [
            self.router.next_event_tick(),
            self.retransmits.keys().next().map(|k| k.0),
            self.departures.first().map(|d| d.0),
            self.abandon_at_tick,
            self.timer,
        ];
        candidates
            .into_iter()
            .flatten()
            .map(|t| t.max(self.clock))
            .min()
    }

    fn step_to(&mut self, tick: Tick) {
        self.clock = tick;
        while self.network_log.first().is_some_and(|(at, _)| *at <= tick) {
            let (at, state) = self.network_log.remove(0);
            self.emit(
                "network_change",
                None,
                Some(json!({ "at": at, "state": state })),
            );
        }
        while self.departures.first().is_some_and(|(at, _)| *at <= tick) {
            let (_, agent) = self.departures.remove(0);
            self.depart(&agent);
        }
        if self.abandon_at_tick.is_some_and(|at| at <= tick) {
            self.abandon_at_tick = None;
            self.scripted_abandon();
        }
        while let Some(entry) = self.retransmits.first_entry() {
            if entry.key().0 > tick || self.outcome.is_some() {
                break;
            }
            let envelope = entry.remove();
            if self.book.guard(self.request_id()).is_err() {
                continue;
            }
            let seq = self.sequencer.next(&envelope.sender);
            self.send_envelope(envelope.with_seq(seq));
        }
        for delivery in self.router.advance(tick) {
            if self.outcome.is_some() {
                break;
            }
            self.emit("deliver", Some(&delivery.envelope), None);
            self.on_delivery(delivery.envelope);
        }
        if self.outcome.is_none() && self.timer.is_some_and(|t| t <= tick) {
            self.timer = None;
            self.on_timer();
        }
    }

    /// Runs until the outcome or until only human input can make progress.
    pub fn run_until_blocked(&mut self) -> Status {
        if self.lines.is_empty() {
            self.start();
        }
        loop {
            if let Some(outcome) = &self.outcome {
                return Status::Terminal(outcome.clone());
            }
            match self.next_tick() {
                Some(t) => self.step_to(t),
                None if !self.prompts.is_empty() => return Status::Parked,
                None => self.stall(),
            }
        }
    }

    fn stall(&mut self) {
        let reason = Some(format!(
            "network stall with {} held messages",
            self.router.held_count()
        ));
        match self.phase {
            Some(Phase::Identification) | None => self.finish(Outcome::Unresolvable, None, reason),
            _ => self.finish(Outcome::WorkflowFailed, None, reason),
        }
    }

    // ---- abandonment --------------------------------------------------

    fn abandon(&mut self) -> Result<(), CommandError> {
        let request = self.request_id().clone();
        if self.book.contracts(&request) > 0 {
            return Err(CommandError::conflict(
                "AbandonAfterContract",
                "a binding contract exists for this request",
            ));
        }
        let cancels = self
            .book
            .abandon(&request, &self.registry, &mut self.sequencer)
            .map_err(|e| CommandError::conflict("RequestClosed", e.to_string()))?;
        for cancel in cancels {
            self.send_envelope(cancel);
        }
        self.emit("abandoned", None, Some(json!({ "request_id": request })));
        self.finish(Outcome::Abandoned, None, None);
        Ok(())
    }

    fn scripted_abandon(&mut self) {
        if self.outcome.is_some() {
            return;
        }
        if let Err(CommandError::Conflict { reason, .. }) = self.abandon() {
            self.emit("abandon_rejected", None, Some(json!({ "reason": reason })));
        }
    }

    // ---- deliveries ---------------------------------------------------

    fn on_delivery(&mut self, envelope: Envelope) {
        let recipient = envelope.recipient.clone();
        if is_registrar(&recipient) || self.is_orchestrator(&recipient) {
            self.on_reply(envelope);
            return;
        }
        match envelope.body() {
            Body::Request(RequestBody { subject, payload }) => {
                let kind = match subject.as_str() {
                    "clarify" => PromptKind::Clarify,
                    "feedback" => PromptKind::Feedback,
                    "critique" => PromptKind::Critique,
                    _ => return,
                };
                if self.interactive.contains(&recipient) {
                    let prompt = Prompt {
                        agent_id: recipient,
                        kind,
                        conversation_id: envelope.conversation_id.clone(),
                        payload: payload.clone(),
                    };
                    self.emit("prompt", None, Some(to_value(&prompt)));
                    self.prompts
                        .insert(envelope.conversation_id.clone(), prompt);
                } else {
                    self.scripted_reply(&envelope, kind, payload.clone());
                }
            }
            Body::Award(_) => self.on_award_delivered(&envelope),
            _ => {}
        }
    }

    fn is_orchestrator(&self, agent: &AgentId) -> bool {
        self.registry
            .get(agent)
            .is_some_and(|r| r.kind == AgentKind::Orchestrator)
    }

    fn scripted_reply(&mut self, request: &Envelope, kind: PromptKind, payload: Value) {
        let agent = request.recipient.clone();
        let policy = self.policy_of(&agent);
        let body = match kind {
            PromptKind::Clarify => {
                let missing: BTreeSet<String> = payload
                    .get("missing_info")
                    .and_then(|m| serde_json::from_value(m.clone()).ok())
                    .unwrap_or_default();
                let attributes: BTreeMap<String, String> = policy
                    .attributes
                    .iter()
                    .filter(|(k, _)| missing.contains(*k))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                clarify_reply(attributes, policy.confirm)
            }
            PromptKind::Feedback => {
                let round = payload
                    .get("iteration")
                    .and_then(Value::as_u64)
                    .unwrap_or(0) as usize;
                Body::Feedback(FeedbackBody {
                    verdict: policy.verdict(round),
                    comment: String::new(),
                })
            }
            PromptKind::Critique => {
                let round = payload.get("round").and_then(Value::as_u64).unwrap_or(0) as usize;
                critique_reply(policy.critique(round))
            }
        };
        self.transmit(
            request.conversation_id.clone(),
            agent,
            request.sender.clone(),
            body,
        );
    }

    fn on_reply(&mut self, envelope: Envelope) {
        let stage = std::mem::replace(&mut self.stage, Stage::Done);
        self.stage = match stage {
            Stage::Identification(mut ident) => {
                let done = self.collect_identification_reply(&mut ident, &envelope);
                if done {
                    self.conclude_identification_round(ident);
                    return;
                }
                Stage::Identification(ident)
            }
            Stage::Planning(mut plan) => {
                let done = self.collect_critique_reply(&mut plan, &envelope);
                if done {
                    self.conclude_critique_round(plan);
                    return;
                }
                Stage::Planning(plan)
            }
            other => other,
        };
    }

    // ---- identification -----------------------------------------------

    fn ident_conversation(&self, sem: &QuerySemantics, agent: &AgentId) -> ConversationId {
        if agent == &self.scenario.request.consumer_id {
            ConversationId::new(format!("{}/clarify/{}", sem.request_id, sem.iteration))
        } else {
            agora_core::identification::feedback_conversation(sem, agent)
        }
    }

    fn begin_identification_round(&mut self) {
        let Stage::Identification(mut ident) = std::mem::replace(&mut self.stage, Stage::Done)
        else {
            return;
        };
        let mut query = ident.sem.selected_tags(self.limits.theta);
        if query.is_empty() {
            query = ident.sem.tags.keys().cloned().collect();
        }
        let experts: Vec<AgentId> = if query.is_empty() {
            Vec::new()
        } else {
            self.registry
                .find_experts_of_kind(&query, &self.scenario.ontology, AgentKind::DomainExpert)
                .unwrap_or_default()
                .into_iter()
                .map(|r| r.agent_id)
                .collect()
        };
        if experts.is_empty() {
            let round = RoundInput::default();
            self.emit("no_experts", None, Some(json!({ "tags": query })));
            let next =
                step_identification(&ident.sem, &round, &self.scenario.ontology, &self.limits);
            let reason = match next {
                Ok(_) => "no domain experts for the query".to_string(),
                Err(e) => e.to_string(),
            };
            self.finish(Outcome::Unresolvable, None, Some(reason));
            return;
        }
        let envelopes = match solicit_feedback(
            &mut ident.sem,
            &experts,
            &self.registry,
            &mut self.sequencer,
        ) {
            Ok(e) => e,
            Err(e) => {
                self.finish(Outcome::Unresolvable, None, Some(e.to_string()));
                return;
            }
        };
        let request = self.request_id().clone();
        for envelope in envelopes {
            let _ = self.book.engage(
                &request,
                envelope.conversation_id.clone(),
                envelope.recipient.clone(),
            );
            self.send_envelope(envelope);
        }
        let consumer = self.consumer();
        let conversation = self.ident_conversation(&ident.sem, &consumer);
        let _ = self
            .book
            .engage(&request, conversation.clone(), consumer.clone());
        let payload = json!({
            "iteration": ident.sem.iteration,
            "missing_info": ident.sem.missing_info,
            "tags": ident.sem.tags,
            "attributes": ident.sem.attributes,
        });
        self.transmit(
            conversation,
            registrar_id(),
            consumer.clone(),
            Body::Request(RequestBody {
                subject: "clarify".into(),
                payload,
            }),
        );
        ident.awaiting = experts.iter().cloned().collect();
        ident.awaiting.insert(consumer);
        ident.experts = experts;
        ident.feedbacks.clear();
        ident.consumer_input.clear();
        ident.confirmed = false;
        self.last_sem = Some(ident.sem.clone());
        self.stage = Stage::Identification(ident);
    }

    fn collect_identification_reply(
        &mut self,
        ident: &mut Identification,
        envelope: &Envelope,
    ) -> bool {
        let sender = envelope.sender.clone();
        if !ident.awaiting.contains(&sender)
            || envelope.conversation_id != self.ident_conversation(&ident.sem, &sender)
        {
            return false;
        }
        match envelope.body() {
            Body::Feedback(FeedbackBody { verdict, comment }) => {
                let mut feedback = ExpertFeedback::new(sender.clone(), verdict.clone());
                feedback.comment = comment.clone();
                ident.feedbacks.insert(sender.clone(), feedback);
            }
            Body::Ack(AckBody { subject, payload }) if subject == "clarify" => {
                if let Some(attrs) = payload
                    .get("attributes")
                    .and_then(|a| serde_json::from_value(a.clone()).ok())
                {
                    ident.consumer_input = attrs;
                }
                ident.confirmed = payload
                    .get("confirm")
                    .and_then(Value::as_bool)
                    .unwrap_or(false);
            }
            _ => return false,
        }
        ident.awaiting.remove(&sender);
        let request = self.request_id().clone();
        self.book.disengage(&request, &envelope.conversation_id);
        ident.awaiting.is_empty()
    }

    fn conclude_identification_round(&mut self, ident: Identification) {
        let feedbacks: Vec<ExpertFeedback> = ident
            .experts
            .iter()
            .filter_map(|e| ident.feedbacks.get(e).cloned())
            .collect();
        let round = RoundInput {
            solicited: ident.experts.len(),
            feedbacks,
            consumer_input: ident.consumer_input.clone(),
            consumer_confirmed: ident.confirmed,
        };
        let next =
            match step_identification(&ident.sem, &round, &self.scenario.ontology, &self.limits) {
                Ok(next) => next,
                Err(e) => {
                    self.finish(Outcome::Unresolvable, None, Some(e.to_string()));
                    return;
                }
            };
        self.emit(
            "identification_round",
            None,
            Some(json!({
                "iteration": next.iteration,
                "status": next.status,
                "verdicts": round.feedbacks,
                "consumer_input": round.consumer_input,
                "confirmed": round.consumer_confirmed,
                "tags": next.tags,
                "missing_info": next.missing_info,
            })),
        );
        self.last_sem = Some(next.clone());
        match next.status {
            QueryStatus::Identified => {
                let descriptors = emit_descriptors(
                    &next,
                    &self.scenario.ontology,
                    &self.limits,
                    self.scenario.request.budget,
                    Vec::new(),
                );
                match descriptors {
                    Ok(d) => {
                        self.emit("identified", None, Some(json!({ "descriptors": d })));
                        self.begin_planning(d);
                    }
                    Err(e) => self.finish(Outcome::Unresolvable, None, Some(e.to_string())),
                }
            }
            QueryStatus::Unresolvable => {
                let all_rejected = !round.feedbacks.is_empty()
                    && round
                        .feedbacks
                        .iter()
                        .all(|f| matches!(f.verdict, Verdict::Reject(_)));
                let reason = if all_rejected {
                    "every expert rejected the query"
                } else {
                    "refinement rounds exhausted"
                };
                self.finish(Outcome::Unresolvable, None, Some(reason.into()));
            }
            _ => {
                self.stage = Stage::Identification(Identification {
                    sem: next,
                    experts: Vec::new(),
                    awaiting: BTreeSet::new(),
                    feedbacks: BTreeMap::new(),
                    consumer_input: BTreeMap::new(),
                    confirmed: false,
                });
                self.begin_identification_round();
            }
        }
    }

    // ---- planning -----------------------------------------------------

    fn begin_planning(&mut self, descriptors: DescriptorSet) {
        self.enter_phase(Phase::Planning);
        if self.outcome.is_some() {
            return;
        }
        let workflow = match draft_workflow(&descriptors, &self.scenario.ontology) {
            Ok(w) => w,
            Err(e) => {
                self.finish(Outcome::WorkflowFailed, None, Some(e.to_string()));
                return;
            }
        };
        self.emit_workflow("drafted", &workflow);
        self.stage = Stage::Planning(Planning {
            descriptors,
            workflow,
            round: 0,
            experts: Vec::new(),
            awaiting: BTreeSet::new(),
            edits: BTreeMap::new(),
        });
        self.begin_critique_round();
    }

    fn emit_workflow(&mut self, stage: &str, workflow: &Workflow) {
        self.last_workflow = Some(workflow.clone());
        self.emit(
            "workflow",
            None,
            Some(json!({ "stage": stage, "workflow": workflow })),
        );
    }

    fn critique_conversation(&self, plan: &Planning, expert: &AgentId) -> ConversationId {
        ConversationId::new(format!(
            "{}/critique/{}/{}",
            self.request_id(),
            plan.round,
            expert
        ))
    }

    fn begin_critique_round(&mut self) {
        let Stage::Planning(mut plan) = std::mem::replace(&mut self.stage, Stage::Done) else {
            return;
        };
        if plan.round >= self.scenario.limits.critique_rounds {
            self.finish_planning(plan);
            return;
        }
        let tags = plan.descriptors.final_tags();
        let experts: Vec<AgentId> = self
            .registry
            .find_experts_of_kind(&tags, &self.scenario.ontology, AgentKind::SolutionExpert)
            .unwrap_or_default()
            .into_iter()
            .map(|r| r.agent_id)
            .collect();
        if experts.is_empty() {
            self.finish_planning(plan);
            return;
        }
        self.emit(
            "critique_round",
            None,
            Some(json!({ "round": plan.round, "experts": experts })),
        );
        let request = self.request_id().clone();
        for expert in &experts {
            let conversation = self.critique_conversation(&plan, expert);
            let _ = self
                .book
                .engage(&request, conversation.clone(), expert.clone());
            let payload = json!({ "round": plan.round, "workflow": plan.workflow });
            self.transmit(
                conversation,
                registrar_id(),
                expert.clone(),
                Body::Request(RequestBody {
                    subject: "critique".into(),
                    payload,
                }),
            );
        }
        plan.awaiting = experts.iter().cloned().collect();
        plan.experts = experts;
        plan.edits.clear();
        self.stage = Stage::Planning(plan);
    }

    fn collect_critique_reply(&mut self, plan: &mut Planning, envelope: &Envelope) -> bool {
        let sender = envelope.sender.clone();
        if !plan.awaiting.contains(&sender)
            || envelope.conversation_id != self.critique_conversation(plan, &sender)
        {
            return false;
        }
        let Body::Ack(AckBody { subject, payload }) = envelope.body() else {
            return false;
        };
        if subject != "critique" {
            return false;
        }
        let edits: Vec<EditOp> = payload
            .get("edits")
            .and_then(|e| serde_json::from_value(e.clone()).ok())
            .unwrap_or_default();
        plan.edits.insert(sender.clone(), edits);
        plan.awaiting.remove(&sender);
        let request = self.request_id().clone();
        self.book.disengage(&request, &envelope.conversation_id);
        plan.awaiting.is_empty()
    }

    fn conclude_critique_round(&mut self, mut plan: Planning) {
        let consensus = plan.edits.values().all(Vec::is_empty);
        if consensus {
            self.emit(
                "critique_consensus",
                None,
                Some(json!({ "round": plan.round })),
            );
            self.finish_planning(plan);
            return;
        }
        let approve_rebudget = self.policy_of(&self.consumer()).approve_rebudget;
        for expert in plan.experts.clone() {
            let ops = plan.edits.get(&expert).cloned().unwrap_or_default();
            if ops.is_empty() {
                continue;
            }
            let edits: Vec<ExpertEdit> = ops
                .into_iter()
                .map(|op| ExpertEdit {
                    expert_id: expert.clone(),
                    op,
                })
                .collect();
            match apply_critique(
                &plan.workflow,
                &edits,
                &self.registry,
                &self.scenario.ontology,
                approve_rebudget,
            ) {
                Ok(next) => {
                    self.emit(
                        "critique",
                        None,
                        Some(json!({ "expert_id": expert, "accepted": true, "revision": next.revision })),
                    );
                    plan.workflow = next;
                    let w = plan.workflow.clone();
                    self.emit_workflow("critiqued", &w);
                }
                Err(e) => {
                    self.emit(
                        "critique",
                        None,
                        Some(json!({ "expert_id": expert, "accepted": false, "reason": e.to_string() })),
                    );
                }
            }
        }
        plan.round += 1;
        self.stage = Stage::Planning(plan);
        self.begin_critique_round();
    }

    fn finish_planning(&mut self, plan: Planning) {
        let total = plan.workflow.total_budget();
        let (workflow, expanded) = match decompose_workflow(
            &plan.workflow,
            self.scenario.ontology.templates(),
            &self.registry,
        ) {
            Ok(r) => r,
            Err(e) => {
                let task = match &e {
                    agora_core::planner::PlanError::NoCapableProvider(_) => None,
                    _ => None,
                };
                self.finish(Outcome::WorkflowFailed, task, Some(e.to_string()));
                return;
            }
        };
        let expanded: Vec<Value> = expanded
            .iter()
            .map(|(id, d)| {
                json!({
                    "task_id": id,
                    "leaves": d.leaves.iter().map(|l| &l.task_id).collect::<Vec<_>>(),
                    "depth": d.depth,
                })
            })
            .collect();
        self.emit("decomposed", None, Some(json!({ "expanded": expanded })));
        self.emit_workflow("decomposed", &workflow);
        if let Err(violations) =
            validate_workflow(&workflow, total, &self.registry, &self.scenario.ontology)
        {
            self.emit(
                "invalid_workflow",
                None,
                Some(json!({ "violations": violations })),
            );
            self.finish(
                Outcome::WorkflowFailed,
                None,
                Some("workflow failed validation".into()),
            );
            return;
        }
        self.begin_provisioning(workflow);
    }

    // ---- provisioning -------------------------------------------------

    fn role(&self, kind: AgentKind) -> Option<AgentId> {
        self.registry
            .of_kind(kind)
            .first()
            .map(|r| r.agent_id.clone())
    }

    fn begin_provisioning(&mut self, workflow: Workflow) {
        self.enter_phase(Phase::Provisioning);
        if self.outcome.is_some() {
            return;
        }
        let Some(orchestrator) = self.role(AgentKind::Orchestrator) else {
            self.finish(
                Outcome::WorkflowFailed,
                None,
                Some("no orchestrator registered".into()),
            );
            return;
        };
        let candidates = match map_providers(&workflow, &self.registry) {
            Ok(c) => c,
            Err(e) => {
                let task = match &e {
                    ProvisioningError::UnmappedTask(t) => Some(t.clone()),
                    _ => None,
                };
                self.finish(Outcome::WorkflowFailed, task, Some(e.to_string()));
                return;
            }
        };
        self.emit("mapped", None, Some(json!({ "candidates": candidates })));
        let order = workflow.topological_order().unwrap_or_default();
        self.stage = Stage::Provisioning(Provisioning {
            workflow,
            candidates,
            order,
            index: 0,
            contracts: Vec::new(),
            awaiting_award: None,
            orchestrator,
        });
        self.provision_next_task();
    }

    fn task_conversation(&self, task: &TaskId, provider: &AgentId) -> ConversationId {
        ConversationId::new(format!("{}/{}/{}", self.request_id(), task, provider))
    }

    /// Introduces `orchestrator` to every candidate lacking a token.
    fn introduce_all(&mut self, orchestrator: &AgentId, task: &TaskId, candidates: &[AgentId]) {
        for provider in candidates {
            let conversation = self.task_conversation(task, provider);
            if self
                .registry
                .token_for(&conversation, orchestrator, provider)
                .is_some()
            {
                continue;
            }
            let Ok(token) =
                self.registry
                    .introduce_on(orchestrator, provider, conversation.clone())
            else {
                continue;
            };
            self.emit("introduce", None, Some(to_value(&token)));
            let body = Body::Introduce(IntroduceBody {
                token_id: token.token_id.clone(),
                requester: orchestrator.clone(),
                provider: provider.clone(),
            });
            self.transmit(conversation, registrar_id(), provider.clone(), body);
        }
    }

    /// Runs the task's mechanism and puts its rounds on the wire and in the log.
    fn run_mechanism(
        &mut self,
        orchestrator: &AgentId,
        task_id: &TaskId,
        workflow: &Workflow,
        candidates: &[AgentId],
        attempt: u32,
    ) -> Result<MechanismTrace, ProvisioningError> {
        let task = &workflow.tasks[task_id];
        self.introduce_all(orchestrator, task_id, candidates);
        let trace = award(
            task,
            candidates,
            &self.registry,
            &self.profiles,
            &self.mechanism,
            attempt,
        )?;
        self.emit_trace(orchestrator, task_id, workflow, candidates, &trace)?;
        Ok(trace)
    }

    fn emit_trace(
        &mut self,
        orchestrator: &AgentId,
        task_id: &TaskId,
        workflow: &Workflow,
        candidates: &[AgentId],
        trace: &MechanismTrace,
    ) -> Result<(), ProvisioningError> {
        match trace {
            MechanismTrace::Negotiation(n) if n.trace.is_empty() => {
                // Cooperative: each candidate reveals its true cost.
                let quotes = quotes_for(
                    &workflow.tasks[task_id],
                    candidates,
                    &self.registry,
                    &self.profiles,
                )?;
                for q in quotes {
                    let conversation = self.task_conversation(task_id, &q.provider);
                    let price = if q.free { Rational::ZERO } else { q.cost };
                    self.emit(
                        "offer",
                        None,
                        Some(json!({ "task_id": task_id, "provider": q.provider, "round": 0, "mode": n.mode, "cost": price })),
                    );
                    let body = Body::Offer(OfferBody {
                        task_id: task_id.clone(),
                        round: 0,
                        price,
                    });
                    self.transmit(conversation, q.provider.clone(), orchestrator.clone(), body);
                }
            }
            MechanismTrace::Negotiation(n) => {
                for round in &n.trace {
                    let conversation = self.task_conversation(task_id, &round.provider);
                    self.emit(
                        "offer",
                        None,
                        Some(json!({
                            "task_id": task_id,
                            "provider": round.provider,
                            "round": round.round,
                            "mode": n.mode,
                            "consumer_offer": round.consumer_offer,
                            "provider_ask": round.provider_ask,
                        })),
                    );
                    let offer = Body::Offer(OfferBody {
                        task_id: task_id.clone(),
                        round: round.round,
                        price: round.consumer_offer,
                    });
                    self.transmit(
                        conversation.clone(),
                        orchestrator.clone(),
                        round.provider.clone(),
                        offer,
                    );
                    let ask = Body::Offer(OfferBody {
                        task_id: task_id.clone(),
                        round: round.round,
                        price: round.provider_ask,
                    });
                    self.transmit(
                        conversation,
                        round.provider.clone(),
                        orchestrator.clone(),
                        ask,
                    );
                }
            }
            MechanismTrace::Auction(a) => {
                for bid in &a.bids {
                    let conversation = self.task_conversation(task_id, &bid.bidder);
                    self.emit(
                        "bid",
                        None,
                        Some(json!({
                            "task_id": task_id,
                            "auction_id": a.auction_id,
                            "bidder": bid.bidder,
                            "price": bid.price,
                            "reserve": a.reserve,
                        })),
                    );
                    let body = Body::Bid(BidBody {
                        task_id: task_id.clone(),
                        auction_id: a.auction_id.clone(),
                        price: bid.price,
                    });
                    self.transmit(conversation, bid.bidder.clone(), orchestrator.clone(), body);
                }
            }
        }
        Ok(())
    }

    fn send_award(
        &mut self,
        orchestrator: &AgentId,
        contract: &Contract,
        trace: &MechanismTrace,
    ) -> ConversationId {
        let conversation = self.task_conversation(&contract.task_id, &contract.provider);
        let mechanism = match trace {
            MechanismTrace::Negotiation(n) => to_value(&n.mode),
            MechanismTrace::Auction(_) => json!("auction"),
        };
        let detail = json!({
            "task_id": contract.task_id,
            "provider": contract.provider,
            "price": contract.price,
            "contract_id": contract.contract_id,
            "mechanism": mechanism,
        });
        let mut detail = detail;
        if let MechanismTrace::Auction(a) = trace {
            detail["auction_id"] = json!(a.auction_id);
            detail["bids"] = to_value(&a.bids);
            detail["reserve"] = to_value(&a.reserve);
        }
        self.emit("award", None, Some(detail));
        let body = Body::Award(AwardBody {
            task_id: contract.task_id.clone(),
            contract_id: contract.contract_id.clone(),
            price: contract.price,
        });
        self.transmit(
            conversation.clone(),
            orchestrator.clone(),
            contract.provider.clone(),
            body,
        );
        conversation
    }

    fn provision_next_task(&mut self) {
        let Stage::Provisioning(mut prov) = std::mem::replace(&mut self.stage, Stage::Done) else {
            return;
        };
        let Some(task_id) = prov.order.get(prov.index).cloned() else {
            self.begin_execution(prov);
            return;
        };
        let candidates: Vec<AgentId> = prov.candidates[&task_id]
            .iter()
            .filter(|c| self.registry.is_registered(c))
            .cloned()
            .collect();
        if candidates.is_empty() {
            let e = ProvisioningError::UnmappedTask(task_id.clone());
            self.finish(Outcome::WorkflowFailed, Some(task_id), Some(e.to_string()));
            return;
        }
        let orchestrator = prov.orchestrator.clone();
        let trace =
            match self.run_mechanism(&orchestrator, &task_id, &prov.workflow, &candidates, 0) {
                Ok(t) => t,
                Err(e) => {
                    self.finish(Outcome::WorkflowFailed, Some(task_id), Some(e.to_string()));
                    return;
                }
            };
        let Some((provider, price)) = trace.winner().map(|(p, price)| (p.clone(), price)) else {
            self.emit("no_agreement", None, Some(json!({ "task_id": task_id })));
            self.finish(
                Outcome::WorkflowFailed,
                Some(task_id),
                Some("no provider agreed within the budget".into()),
            );
            return;
        };
        let contract = Contract {
            contract_id: contract_id(&task_id, 0),
            task_id: task_id.clone(),
            provider,
            price,
            formed_at: self.clock,
            binding: true,
            status: ContractStatus::Active,
        };
        let conversation = self.send_award(&orchestrator, &contract, &trace);
        prov.awaiting_award = Some((conversation, contract));
        self.stage = Stage::Provisioning(prov);
    }

    fn on_award_delivered(&mut self, envelope: &Envelope) {
        if !matches!(self.stage, Stage::Provisioning(_)) {
            return;
        }
        let Stage::Provisioning(mut prov) = std::mem::replace(&mut self.stage, Stage::Done) else {
            return;
        };
        let matches = prov.awaiting_award.as_ref().is_some_and(|(conv, c)| {
            conv == &envelope.conversation_id && c.provider == envelope.recipient
        });
        if !matches {
            self.stage = Stage::Provisioning(prov);
            return;
        }
        let (_, mut contract) = prov.awaiting_award.take().expect("checked above");
        contract.formed_at = self.clock;
        let request = self.request_id().clone();
        if self.book.record_contract(&request).is_err() {
            return;
        }
        self.emit("contract", None, Some(json!({ "contract": contract })));
        self.contracts.push(contract.clone());
        prov.contracts.push(contract);
        prov.index += 1;
        self.stage = Stage::Provisioning(prov);
        self.provision_next_task();
    }

    // ---- execution ----------------------------------------------------

    fn begin_execution(&mut self, prov: Provisioning) {
        self.enter_phase(Phase::Execution);
        if self.outcome.is_some() {
            return;
        }
        let Some(dominant) = self.role(AgentKind::Dominant) else {
            self.finish(
                Outcome::WorkflowFailed,
                None,
                Some("no dominant agent registered".into()),
            );
            return;
        };
        let executor = Executor::new(
            prov.workflow.clone(),
            prov.contracts,
            prov.candidates,
            &dominant,
            &self.registry,
            self.mechanism,
        );
        match executor {
            Ok(executor) => {
                self.stage = Stage::Execution(Box::new(Execution {
                    executor,
                    events: Vec::new(),
                    orchestrator: prov.orchestrator,
                    workflow: prov.workflow,
                }));
                self.timer = Some(self.clock + 1);
            }
            Err(e) => self.finish(Outcome::WorkflowFailed, None, Some(e.to_string())),
        }
    }

    fn on_timer(&mut self) {
        if !matches!(self.stage, Stage::Execution(_)) {
            return;
        }
        let Stage::Execution(mut exec) = std::mem::replace(&mut self.stage, Stage::Done) else {
            return;
        };
        let events = match exec
            .executor
            .step(&self.registry, &self.profiles, self.clock)
        {
            Ok(events) => events,
            Err(e) => {
                let task = exec.executor.next_task().cloned();
                self.finish(Outcome::WorkflowFailed, task, Some(e.to_string()));
                return;
            }
        };
        let mut last_trace = None;
        for event in &events {
            self.log_execution_event(&exec, event, &mut last_trace);
        }
        exec.events.extend(events);
        if !exec.executor.is_finished() {
            self.stage = Stage::Execution(exec);
            self.timer = Some(self.clock + 1);
            return;
        }
        let Execution {
            executor, events, ..
        } = *exec;
        match executor.finish(events, &self.profiles, self.scenario.request.budget) {
            Ok(report) => match report.outcome {
                ExecutionOutcome::Completed => {
                    self.contracts = report.contracts.clone();
                    let utilities = report.utilities.clone().unwrap_or_default();
                    self.emit("utilities", None, Some(to_value(&utilities)));
                    self.finish(Outcome::Provisioned, None, None);
                }
                ExecutionOutcome::WorkflowFailed { task_id } => {
                    self.contracts = report.contracts.clone();
                    self.finish(
                        Outcome::WorkflowFailed,
                        Some(task_id),
                        Some("every capable provider failed".into()),
                    );
                }
            },
            Err(e) => self.finish(Outcome::WorkflowFailed, None, Some(e.to_string())),
        }
    }

    fn log_execution_event(
        &mut self,
        exec: &Execution,
        event: &ExecutionEvent,
        last_trace: &mut Option<MechanismTrace>,
    ) {
        match event {
            ExecutionEvent::Started {
                task_id,
                contract_id,
                provider,
            } => self.emit(
                "task_started",
                None,
                Some(
                    json!({ "task_id": task_id, "contract_id": contract_id, "provider": provider }),
                ),
            ),
            ExecutionEvent::Completed {
                task_id,
                contract_id,
            } => self.emit(
                "task_completed",
                None,
                Some(json!({ "task_id": task_id, "contract_id": contract_id })),
            ),
            ExecutionEvent::Failure {
                task_id,
                contract_id,
                provider,
                departed,
            } => self.emit(
                "failure",
                None,
                Some(json!({
                    "task_id": task_id,
                    "contract_id": contract_id,
                    "provider": provider,
                    "departed": departed,
                })),
            ),
            ExecutionEvent::Mechanism {
                task_id,
                candidates,
                trace,
                ..
            } => {
                let orchestrator = exec.orchestrator.clone();
                self.introduce_all(&orchestrator, task_id, candidates);
                let _ = self.emit_trace(&orchestrator, task_id, &exec.workflow, candidates, trace);
                *last_trace = Some(trace.clone());
            }
            ExecutionEvent::Reassigned {
                task_id,
                from,
                contract,
            } => {
                self.emit(
                    "reassign",
                    None,
                    Some(json!({
                        "task_id": task_id,
                        "from": from,
                        "to": contract.contract_id,
                        "provider": contract.provider,
                    })),
                );
                if let Some(trace) = last_trace.take() {
                    self.send_award(&exec.orchestrator, contract, &trace);
                }
                self.emit("contract", None, Some(json!({ "contract": contract })));
            }
            ExecutionEvent::Blocked { task_id } => {
                self.emit("blocked", None, Some(json!({ "task_id": task_id })));
            }
        }
    }

    // ---- commands -----------------------------------------------------

    fn find_prompt(&self, agent: &AgentId, kind: PromptKind) -> Option<ConversationId> {
        self.prompts
            .values()
            .find(|p| &p.agent_id == agent && p.kind == kind)
            .map(|p| p.conversation_id.clone())
    }

    /// Applies human input. Accepted commands are logged; rejected ones
    /// leave the log untouched.
    pub fn apply(&mut self, command: Command) -> Result<(), CommandError> {
        let abandons = matches!(
            command,
            Command::ConsumerInput { abandon: true, .. } | Command::Idle
        );
        if abandons && !self.contracts.is_empty() {
            return Err(CommandError::conflict(
                "AbandonAfterContract",
                "a binding contract exists for this request",
            ));
        }
        if self.outcome.is_some() {
            return Err(CommandError::conflict(
                "RunTerminal",
                "the run has finished",
            ));
        }
        if self.lines.is_empty() {
            self.start();
        }
        match &command {
            Command::ConsumerInput {
                attributes,
                confirm,
                abandon,
            } => {
                if *abandon {
                    if !attributes.is_empty() || confirm.is_some() {
                        return Err(CommandError::Invalid(
                            "abandon cannot be combined with other input".into(),
                        ));
                    }
                    let request = self.request_id().clone();
                    if self.book.contracts(&request) > 0 {
                        return Err(CommandError::conflict(
                            "AbandonAfterContract",
                            "a binding contract exists for this request",
                        ));
                    }
                    self.emit("command", None, Some(json!({ "command": command })));
                    return self.abandon();
                }
                let consumer = self.consumer();
                let conversation = self
                    .find_prompt(&consumer, PromptKind::Clarify)
                    .ok_or_else(|| {
                        CommandError::conflict("NotAwaitingInput", "no clarification is pending")
                    })?;
                if let Stage::Identification(ident) = &self.stage {
                    let feedbacks: Vec<ExpertFeedback> =
                        ident.feedbacks.values().cloned().collect();
                    check_consumer_input(
                        &ident.sem,
                        &feedbacks,
                        attributes,
                        &self.scenario.ontology,
                    )
                    .map_err(|e| CommandError::conflict("UnknownAttribute", e.to_string()))?;
                }
                self.emit("command", None, Some(json!({ "command": command })));
                self.prompts.remove(&conversation);
                let body = clarify_reply(attributes.clone(), confirm.unwrap_or(false));
                self.transmit(conversation, consumer, registrar_id(), body);
            }
            Command::ExpertFeedback {
                expert_id,
                verdict,
                comment,
            } => {
                let conversation = self
                    .find_prompt(expert_id, PromptKind::Feedback)
                    .ok_or_else(|| {
                        CommandError::conflict(
                            "NotAwaitingFeedback",
                            format!("no feedback pending from `{expert_id}`"),
                        )
                    })?;
                match verdict {
                    Verdict::NeedMoreData(names) if names.is_empty() => {
                        return Err(CommandError::Invalid(
                            "need_more_data names no attributes".into(),
                        ));
                    }
                    Verdict::ReferDomain(tags) => {
                        if let Some(t) = tags.iter().find(|t| !self.scenario.ontology.contains(t)) {
                            return Err(CommandError::Invalid(format!("unknown tag `{t}`")));
                        }
                    }
                    _ => {}
                }
                self.emit("command", None, Some(json!({ "command": command })));
                self.prompts.remove(&conversation);
                let body = Body::Feedback(FeedbackBody {
                    verdict: verdict.clone(),
                    comment: comment.clone(),
                });
                self.transmit(conversation, expert_id.clone(), registrar_id(), body);
            }
            Command::WorkflowCritique { expert_id, edits } => {
                let conversation = self
                    .find_prompt(expert_id, PromptKind::Critique)
                    .ok_or_else(|| {
                        CommandError::conflict(
                            "NotAwaitingCritique",
                            format!("no critique pending from `{expert_id}`"),
                        )
                    })?;
                self.emit("command", None, Some(json!({ "command": command })));
                self.prompts.remove(&conversation);
                self.transmit(
                    conversation,
                    expert_id.clone(),
                    registrar_id(),
                    critique_reply(edits.clone()),
                );
            }
            Command::Idle => {
                if self.prompts.is_empty() || self.idle_timeout().is_none() {
                    return Err(CommandError::conflict(
                        "NotParked",
                        "the run is not waiting on input",
                    ));
                }
                let request = self.request_id().clone();
                if self.book.contracts(&request) > 0 {
                    return Err(CommandError::conflict(
                        "AbandonAfterContract",
                        "a binding contract exists for this request",
                    ));
                }
                self.emit("command", None, Some(json!({ "command": command })));
                return self.abandon();
            }
        }
        Ok(())
    }
}

fn clarify_reply(attributes: BTreeMap<String, String>, confirm: bool) -> Body {
    Body::Ack(AckBody {
        subject: "clarify".into(),
        payload: json!({ "attributes": attributes, "confirm": confirm }),
    })
}

fn critique_reply(edits: Vec<EditOp>) -> Body {
    Body::Ack(AckBody {
        subject: "critique".into(),
        payload: json!({ "edits": edits }),
    })
}

/// Headless run of a fully scripted scenario.
pub fn run(scenario: &Scenario, seed: u64, hint: Option<String>) -> Result<RunRecord, EngineError> {
    let config = RunConfig::headless(scenario, seed, hint);
    let mut engine = Engine::new(scenario.clone(), config)?;
    engine.run_until_blocked();
    Ok(engine.record())
}

/// Re-executes a record against its scenario, re-feeding logged commands,
/// and compares the logs line by line.
pub fn replay(
    record: &RunRecord,
    scenario: &Scenario,
) -> Result<RunRecord, crate::record::RecordError> {
    use crate::record::{first_divergence, RecordError};
    if scenario.digest() != record.header.scenario_digest {
        return Err(RecordError::UnknownDigest(
            record.header.scenario_digest.clone(),
        ));
    }
    let config = RunConfig {
        run_id: record.header.run_id.clone(),
        seed: record.header.seed,
        mode: record.header.mode,
        scenario_hint: record.header.scenario.clone(),
    };
    let mut engine =
        Engine::new(scenario.clone(), config).map_err(|e| RecordError::Replay(e.to_string()))?;
    let mut commands = record.commands()?.into_iter();
    loop {
        match engine.run_until_blocked() {
            Status::Terminal(_) => break,
            Status::Parked => match commands.next() {
                Some(command) => {
                    if let Err(e) = engine.apply(command) {
                        let line = engine.lines().len() + 1;
                        return Err(RecordError::ReplayDivergence {
                            line,
                            expected: record.lines.get(line - 1).cloned(),
                            actual: Some(format!("command rejected: {e}")),
                        });
                    }
                }
                None => break,
            },
        }
    }
    let fresh = engine.record();
    if let Some(line) = first_divergence(&record.lines, &fresh.lines) {
        return Err(RecordError::ReplayDivergence {
            line,
            expected: record.lines.get(line - 1).cloned(),
            actual: fresh.lines.get(line - 1).cloned(),
        });
    }
    Ok(fresh)
}
