//! Stage two, part B: map providers to atomic tasks, award each task by
//! negotiation or reverse auction, execute under a dominant agent, and gate
//! abandonment on the first binding contract.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ids::{AgentId, ContractId, ConversationId, RequestId, TaskId, Tick};
use crate::messaging::{Body, CancelBody, Envelope, Sequencer};
use crate::ontology::{CapabilitySet, TaskMode};
use crate::planner::{Task, Workflow};
use crate::rational::Rational;
use crate::registrar::{registrar_id, AgentKind, Registration, Registry};
use crate::rng::DetRng;

fn default_markup() -> Rational {
    Rational::new(1, 2)
}

fn default_concession() -> Rational {
    Rational::ONE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    #[serde(default = "default_markup")]
    pub opening_markup: Rational,
    /// Fraction of the markup conceded by the last round; 1 concedes it all.
    #[serde(default = "default_concession")]
    pub concession_rate: Rational,
}

impl Default for Strategy {
    fn default() -> Self {
        Self {
            opening_markup: default_markup(),
            concession_rate: default_concession(),
        }
    }
}

/// Renders a capability set as a cost-table key: sorted tags joined by `+`.
pub fn cost_key(capabilities: &CapabilitySet) -> String {
    let parts: Vec<&str> = capabilities.iter().map(|c| c.as_str()).collect();
    parts.join("+")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderProfile {
    pub agent_id: AgentId,
    /// True cost keyed by [`cost_key`]. A set without its own entry costs
    /// the sum of its single-capability entries.
    #[serde(default)]
    pub cost: BTreeMap<String, Rational>,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub failure_probability: Rational,
}

impl ProviderProfile {
    /// Profile implied by a registration alone: list prices are true costs.
    pub fn from_registration(registration: &Registration) -> Self {
        let cost = registration
            .capabilities
            .iter()
            .map(|c| {
                let price = registration
                    .price_schedule
                    .get(c)
                    .copied()
                    .unwrap_or(Rational::ZERO);
                (String::from(c.as_str()), price)
            })
            .collect();
        Self {
            agent_id: registration.agent_id.clone(),
            cost,
            strategy: Strategy::default(),
            failure_probability: Rational::ZERO,
        }
    }

    pub fn cost_of(&self, capabilities: &CapabilitySet) -> Option<Rational> {
        if let Some(exact) = self.cost.get(&cost_key(capabilities)) {
            return Some(*exact);
        }
        capabilities
            .iter()
            .map(|c| self.cost.get(c.as_str()).copied())
            .sum::<Option<Rational>>()
    }

    pub fn validate(&self) -> Result<(), ProvisioningError> {
        let bad =
            |what: &str| ProvisioningError::InvalidProfile(self.agent_id.clone(), what.into());
        if self.cost.values().any(Rational::is_negative) {
            return Err(bad("negative cost"));
        }
        if self.strategy.opening_markup.is_negative() {
            return Err(bad("negative opening markup"));
        }
        let rate = self.strategy.concession_rate;
        if rate <= Rational::ZERO || rate > Rational::ONE {
            return Err(bad("concession rate outside (0, 1]"));
        }
        let p = self.failure_probability;
        if p.is_negative() || p > Rational::ONE {
            return Err(bad("failure probability outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractStatus {
    Active,
    Completed,
    Failed,
    Reassigned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contract {
    pub contract_id: ContractId,
    pub task_id: TaskId,
    pub provider: AgentId,
    pub price: Rational,
    pub formed_at: Tick,
    pub binding: bool,
    pub status: ContractStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProvisioningError {
    #[error("task `{0}` has no capable provider")]
    UnmappedTask(TaskId),
    #[error("task `{0}` has no candidates")]
    NoCandidates(TaskId),
    #[error("task `{0}` has no positive budget")]
    NonPositiveBudget(TaskId),
    #[error("no cost profile for provider `{provider}` on task `{task_id}`")]
    MissingProfile { provider: AgentId, task_id: TaskId },
    #[error("invalid profile for `{0}`: {1}")]
    InvalidProfile(AgentId, String),
    #[error("unknown request `{0}`")]
    UnknownRequest(RequestId),
    #[error("request `{0}` already has a binding contract")]
    AbandonAfterContract(RequestId),
    #[error("request `{0}` is closed")]
    RequestClosed(RequestId),
    #[error("`{0}` is not a registered dominant agent")]
    NotDominant(AgentId),
    #[error("task `{0}` lacks an active contract")]
    MissingContract(TaskId),
    #[error("workflow has a dependency cycle")]
    Cyclic,
}

/// Candidate providers per task in registrar order.
pub fn map_providers(
    workflow: &Workflow,
    registry: &Registry,
) -> Result<BTreeMap<TaskId, Vec<AgentId>>, ProvisioningError> {
    let mut out = BTreeMap::new();
    for task in workflow.tasks.values() {
        let found = registry
            .find_providers(&task.required_capabilities)
            .unwrap_or_default();
        if found.is_empty() {
            return Err(ProvisioningError::UnmappedTask(task.task_id.clone()));
        }
        out.insert(task.task_id.clone(), found);
    }
    Ok(out)
}

/// What a provider brings to one task's mechanism.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub provider: AgentId,
    pub cost: Rational,
    pub strategy: Strategy,
    /// No list price on any of the task's capabilities: asks and is paid 0.
    pub free: bool,
}

/// Quotes for `candidates` in the given order.
pub fn quotes_for(
    task: &Task,
    candidates: &[AgentId],
    registry: &Registry,
    profiles: &BTreeMap<AgentId, ProviderProfile>,
) -> Result<Vec<Quote>, ProvisioningError> {
    candidates
        .iter()
        .map(|provider| {
            let missing = || ProvisioningError::MissingProfile {
                provider: provider.clone(),
                task_id: task.task_id.clone(),
            };
            let registration = registry.get(provider).ok_or_else(missing)?;
            let implied;
            let profile = match profiles.get(provider) {
                Some(p) => p,
                None => {
                    implied = ProviderProfile::from_registration(registration);
                    &implied
                }
            };
            Ok(Quote {
                provider: provider.clone(),
                cost: profile
                    .cost_of(&task.required_capabilities)
                    .ok_or_else(missing)?,
                strategy: profile.strategy,
                free: registration.offers_free(&task.required_capabilities),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegotiationMode {
    #[default]
    Cooperative,
    Competitive,
}

/// Consumer offer at round `k` of `rounds`: budget * (1/2 + k / 2K).
pub fn consumer_offer(budget: Rational, round: u32, rounds: u32) -> Rational {
    budget * (Rational::new(1, 2) + Rational::new(i128::from(round), 2 * i128::from(rounds)))
}

/// Provider ask at round `k`: the markup decays linearly, never below cost.
pub fn provider_ask(quote: &Quote, round: u32, rounds: u32) -> Rational {
    if quote.free {
        return Rational::ZERO;
    }
    let progress =
        Rational::new(i128::from(round), i128::from(rounds)) * quote.strategy.concession_rate;
    let ask =
        quote.cost * (Rational::ONE + quote.strategy.opening_markup * (Rational::ONE - progress));
    ask.max(quote.cost)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfferRound {
    pub provider: AgentId,
    pub round: u32,
    pub consumer_offer: Rational,
    pub provider_ask: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agreement {
    pub provider: AgentId,
    pub price: Rational,
    /// Crossing round in competitive mode.
    pub round: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegotiationResult {
    pub mode: NegotiationMode,
    pub agreement: Option<Agreement>,
    pub trace: Vec<OfferRound>,
}

/// Bilateral alternating offers with one provider; the first crossing round
/// and its midpoint price.
pub fn alternating_offers(
    budget: Rational,
    quote: &Quote,
    rounds: u32,
    trace: &mut Vec<OfferRound>,
) -> Option<(u32, Rational)> {
    for k in 0..rounds {
        let bid = consumer_offer(budget, k, rounds);
        let ask = provider_ask(quote, k, rounds);
        trace.push(OfferRound {
            provider: quote.provider.clone(),
            round: k,
            consumer_offer: bid,
            provider_ask: ask,
        });
        if bid >= ask {
            let price = if quote.free {
                Rational::ZERO
            } else {
                (bid + ask) / Rational::integer(2)
            };
            return Some((k, price));
        }
    }
    None
}

/// Quotes must be in registrar order; that order breaks every tie.
pub fn negotiate(
    task: &Task,
    quotes: &[Quote],
    mode: NegotiationMode,
    rounds: u32,
) -> Result<NegotiationResult, ProvisioningError> {
    if quotes.is_empty() {
        return Err(ProvisioningError::NoCandidates(task.task_id.clone()));
    }
    let budget = task.budget();
    if budget <= Rational::ZERO {
        return Err(ProvisioningError::NonPositiveBudget(task.task_id.clone()));
    }
    let mut trace = Vec::new();
    let agreement = match mode {
        NegotiationMode::Cooperative => {
            let mut best: Option<&Quote> = None;
            for q in quotes {
                if best.is_none_or(|b| q.cost < b.cost) {
                    best = Some(q);
                }
            }
            best.filter(|q| q.cost <= budget).map(|q| Agreement {
                provider: q.provider.clone(),
                price: if q.free {
                    Rational::ZERO
                } else {
                    (q.cost + budget) / Rational::integer(2)
                },
                round: None,
            })
        }
        NegotiationMode::Competitive => {
            let mut best: Option<Agreement> = None;
            for q in quotes {
                if let Some((round, price)) = alternating_offers(budget, q, rounds, &mut trace) {
                    if best.as_ref().is_none_or(|b| price < b.price) {
                        best = Some(Agreement {
                            provider: q.provider.clone(),
                            price,
                            round: Some(round),
                        });
                    }
                }
            }
            best
        }
    };
    Ok(NegotiationResult {
        mode,
        agreement,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBid {
    pub bidder: AgentId,
    pub price: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuctionResult {
    pub auction_id: String,
    pub reserve: Rational,
    /// In registrar order.
    pub bids: Vec<SealedBid>,
    pub winner: Option<SealedBid>,
}

/// Sealed bid: cost marked up by a seeded fraction of the opening markup.
pub fn auction_bid(quote: &Quote, seed: u64, auction_id: &str) -> Rational {
    if quote.free {
        return Rational::ZERO;
    }
    let u = DetRng::from_labels(seed, &["auction", auction_id, quote.provider.as_str()]).unit();
    (quote.cost * (Rational::ONE + quote.strategy.opening_markup * u)).max(quote.cost)
}

/// Lowest bid at or under the reserve; earliest in `bids` wins ties.
pub fn auction_winner(bids: &[SealedBid], reserve: Rational) -> Option<SealedBid> {
    let mut best: Option<&SealedBid> = None;
    for bid in bids.iter().filter(|b| b.price <= reserve) {
        if best.is_none_or(|b| bid.price < b.price) {
            best = Some(bid);
        }
    }
    best.cloned()
}

/// Reverse sealed-bid first-price auction with the task budget as reserve.
pub fn run_auction(
    task: &Task,
    quotes: &[Quote],
    seed: u64,
    auction_id: &str,
) -> Result<AuctionResult, ProvisioningError> {
    if quotes.is_empty() {
        return Err(ProvisioningError::NoCandidates(task.task_id.clone()));
    }
    let reserve = task.budget();
    let bids: Vec<SealedBid> = quotes
        .iter()
        .map(|q| SealedBid {
            bidder: q.provider.clone(),
            price: auction_bid(q, seed, auction_id),
        })
        .collect();
    let winner = auction_winner(&bids, reserve);
    Ok(AuctionResult {
        auction_id: auction_id.into(),
        reserve,
        bids,
        winner,
    })
}

/// Knobs shared by every award on a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub negotiation: NegotiationMode,
    pub rounds: u32,
    pub seed: u64,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            negotiation: NegotiationMode::Cooperative,
            rounds: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismTrace {
    Negotiation(NegotiationResult),
    Auction(AuctionResult),
}

impl MechanismTrace {
    pub fn winner(&self) -> Option<(&AgentId, Rational)> {
        match self {
            MechanismTrace::Negotiation(n) => n.agreement.as_ref().map(|a| (&a.provider, a.price)),
            MechanismTrace::Auction(a) => a.winner.as_ref().map(|w| (&w.bidder, w.price)),
        }
    }
}

pub fn auction_id(task: &TaskId, attempt: u32) -> String {
    format!("{task}/auction/{attempt}")
}

/// Runs the task's mechanism over `candidates`.
pub fn award(
    task: &Task,
    candidates: &[AgentId],
    registry: &Registry,
    profiles: &BTreeMap<AgentId, ProviderProfile>,
    config: &MechanismConfig,
    attempt: u32,
) -> Result<MechanismTrace, ProvisioningError> {
    let quotes = quotes_for(task, candidates, registry, profiles)?;
    Ok(match task.constraints.mode {
        TaskMode::Negotiate => MechanismTrace::Negotiation(negotiate(
            task,
            &quotes,
            config.negotiation,
            config.rounds,
        )?),
        TaskMode::Auction => MechanismTrace::Auction(run_auction(
            task,
            &quotes,
            config.seed,
            &auction_id(&task.task_id, attempt),
        )?),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UtilityReport {
    pub providers: BTreeMap<AgentId, Rational>,
    pub consumer: Rational,
    pub valuation: Rational,
    pub total_price: Rational,
    pub total_cost: Rational,
    pub social_welfare: Rational,
}

/// Utilities over the completed contracts. Consumer valuation is the total
/// budget; welfare is the plain sum of every participant's utility.
pub fn compute_utilities(
    contracts: &[Contract],
    workflow: &Workflow,
    profiles: &BTreeMap<AgentId, ProviderProfile>,
    valuation: Rational,
) -> Result<UtilityReport, ProvisioningError> {
    let mut report = UtilityReport {
        valuation,
        ..UtilityReport::default()
    };
    for contract in contracts
        .iter()
        .filter(|c| c.status == ContractStatus::Completed)
    {
        let missing = || ProvisioningError::MissingProfile {
            provider: contract.provider.clone(),
            task_id: contract.task_id.clone(),
        };
        let task = workflow.tasks.get(&contract.task_id).ok_or_else(missing)?;
        let cost = profiles
            .get(&contract.provider)
            .and_then(|p| p.cost_of(&task.required_capabilities))
            .ok_or_else(missing)?;
        *report
            .providers
            .entry(contract.provider.clone())
            .or_default() += contract.price - cost;
        report.total_price += contract.price;
        report.total_cost += cost;
    }
    report.consumer = valuation - report.total_price;
    report.social_welfare = report.providers.values().copied().sum::<Rational>() + report.consumer;
    Ok(report)
}

pub fn contract_id(task: &TaskId, attempt: u32) -> ContractId {
    ContractId::new(format!("c/{task}/{attempt}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecutionEvent {
    Started {
        task_id: TaskId,
        contract_id: ContractId,
        provider: AgentId,
    },
    Completed {
        task_id: TaskId,
        contract_id: ContractId,
    },
    Failure {
        task_id: TaskId,
        contract_id: ContractId,
        provider: AgentId,
        departed: bool,
    },
    Mechanism {
        task_id: TaskId,
        attempt: u32,
        /// Providers the mechanism ran over.
        candidates: Vec<AgentId>,
        trace: MechanismTrace,
    },
    Reassigned {
        task_id: TaskId,
        from: ContractId,
        contract: Contract,
    },
    Blocked {
        task_id: TaskId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ExecutionOutcome {
    Completed,
    WorkflowFailed { task_id: TaskId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub outcome: ExecutionOutcome,
    /// Every contract ever formed, superseded ones included.
    pub contracts: Vec<Contract>,
    pub events: Vec<ExecutionEvent>,
    pub utilities: Option<UtilityReport>,
}

impl ExecutionReport {
    pub fn reassignments(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, ExecutionEvent::Reassigned { .. }))
            .count()
    }
}

/// Dominant-agent execution, one task per [`Executor::step`] so a driver
/// can interleave departures and clock ticks.
#[derive(Debug, Clone)]
pub struct Executor {
    workflow: Workflow,
    order: Vec<TaskId>,
    cursor: usize,
    candidates: BTreeMap<TaskId, Vec<AgentId>>,
    contracts: Vec<Contract>,
    attempts: BTreeMap<TaskId, u32>,
    config: MechanismConfig,
    outcome: Option<ExecutionOutcome>,
}

impl Executor {
    /// `contracts` must hold one Active contract per task.
    pub fn new(
        workflow: Workflow,
        contracts: Vec<Contract>,
        candidates: BTreeMap<TaskId, Vec<AgentId>>,
        dominant: &AgentId,
        registry: &Registry,
        config: MechanismConfig,
    ) -> Result<Self, ProvisioningError> {
        if registry
            .get(dominant)
            .is_none_or(|r| r.kind != AgentKind::Dominant)
        {
            return Err(ProvisioningError::NotDominant(dominant.clone()));
        }
        let order = workflow
            .topological_order()
            .ok_or(ProvisioningError::Cyclic)?;
        for id in &order {
            let active = contracts
                .iter()
                .any(|c| &c.task_id == id && c.status == ContractStatus::Active);
            if !active {
                return Err(ProvisioningError::MissingContract(id.clone()));
            }
        }
        Ok(Self {
            workflow,
            order,
            cursor: 0,
            candidates,
            contracts,
            attempts: BTreeMap::new(),
            config,
            outcome: None,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn next_task(&self) -> Option<&TaskId> {
        if self.outcome.is_some() {
            return None;
        }
        self.order.get(self.cursor)
    }

    pub fn contracts(&self) -> &[Contract] {
        &self.contracts
    }

    fn active_index(&self, task: &TaskId) -> Option<usize> {
        self.contracts
            .iter()
            .position(|c| &c.task_id == task && c.status == ContractStatus::Active)
    }

    /// Runs the next task to completion or exhaustion of its candidates.
    pub fn step(
        &mut self,
        registry: &Registry,
        profiles: &BTreeMap<AgentId, ProviderProfile>,
        now: Tick,
    ) -> Result<Vec<ExecutionEvent>, ProvisioningError> {
        let Some(task_id) = self.next_task().cloned() else {
            return Ok(Vec::new());
        };
        let task = self.workflow.tasks[&task_id].clone();
        let mut events = Vec::new();
        let mut tried: BTreeSet<AgentId> = BTreeSet::new();
        loop {
            let index = self
                .active_index(&task_id)
                .ok_or_else(|| ProvisioningError::MissingContract(task_id.clone()))?;
            let contract = self.contracts[index].clone();
            let attempt = *self.attempts.entry(task_id.clone()).or_insert(0);
            tried.insert(contract.provider.clone());
            events.push(ExecutionEvent::Started {
                task_id: task_id.clone(),
                contract_id: contract.contract_id.clone(),
                provider: contract.provider.clone(),
            });
            let departed = !registry.is_registered(&contract.provider);
            let failed = departed || {
                let p = profiles
                    .get(&contract.provider)
                    .map_or(Rational::ZERO, |p| p.failure_probability);
                let attempt_label = format!("{attempt}");
                DetRng::from_labels(
                    self.config.seed,
                    &[
                        "failure",
                        task_id.as_str(),
                        &attempt_label,
                        contract.provider.as_str(),
                    ],
                )
                .chance(p)
            };
            if !failed {
                self.contracts[index].status = ContractStatus::Completed;
                events.push(ExecutionEvent::Completed {
                    task_id: task_id.clone(),
                    contract_id: contract.contract_id,
                });
                self.cursor += 1;
                if self.cursor == self.order.len() {
                    self.outcome = Some(ExecutionOutcome::Completed);
                }
                return Ok(events);
            }
            events.push(ExecutionEvent::Failure {
                task_id: task_id.clone(),
                contract_id: contract.contract_id.clone(),
                provider: contract.provider.clone(),
                departed,
            });
            self.contracts[index].status = ContractStatus::Failed;
            let remaining: Vec<AgentId> = self
                .candidates
                .get(&task_id)
                .into_iter()
                .flatten()
                .filter(|c| !tried.contains(*c) && registry.is_registered(c))
                .cloned()
                .collect();
            let replacement = if remaining.is_empty() {
                None
            } else {
                let next_attempt = attempt + 1;
                self.attempts.insert(task_id.clone(), next_attempt);
                let trace = award(
                    &task,
                    &remaining,
                    registry,
                    profiles,
                    &self.config,
                    next_attempt,
                )?;
                let winner = trace.winner().map(|(p, price)| (p.clone(), price));
                events.push(ExecutionEvent::Mechanism {
                    task_id: task_id.clone(),
                    attempt: next_attempt,
                    candidates: remaining,
                    trace,
                });
                winner.map(|(provider, price)| Contract {
                    contract_id: contract_id(&task_id, next_attempt),
                    task_id: task_id.clone(),
                    provider,
                    price,
                    formed_at: now,
                    binding: true,
                    status: ContractStatus::Active,
                })
            };
            match replacement {
                Some(next) => {
                    self.contracts[index].status = ContractStatus::Reassigned;
                    events.push(ExecutionEvent::Reassigned {
                        task_id: task_id.clone(),
                        from: contract.contract_id,
                        contract: next.clone(),
                    });
                    self.contracts.push(next);
                }
                None => {
                    events.push(ExecutionEvent::Blocked {
                        task_id: task_id.clone(),
                    });
                    self.outcome = Some(ExecutionOutcome::WorkflowFailed { task_id });
                    return Ok(events);
                }
            }
        }
    }

    pub fn finish(
        self,
        events: Vec<ExecutionEvent>,
        profiles: &BTreeMap<AgentId, ProviderProfile>,
        valuation: Rational,
    ) -> Result<ExecutionReport, ProvisioningError> {
        let outcome = self.outcome.unwrap_or(ExecutionOutcome::Completed);
        let utilities = match outcome {
            ExecutionOutcome::Completed => Some(compute_utilities(
                &self.contracts,
                &self.workflow,
                profiles,
                valuation,
            )?),
            ExecutionOutcome::WorkflowFailed { .. } => None,
        };
        Ok(ExecutionReport {
            outcome,
            contracts: self.contracts,
            events,
            utilities,
        })
    }
}

/// Runs every task in topological order; on failure the dominant agent
/// re-runs the task's mechanism over the remaining candidates.
#[allow(clippy::too_many_arguments)]
pub fn execute(
    workflow: &Workflow,
    contracts: Vec<Contract>,
    candidates: BTreeMap<TaskId, Vec<AgentId>>,
    dominant: &AgentId,
    registry: &Registry,
    profiles: &BTreeMap<AgentId, ProviderProfile>,
    config: MechanismConfig,
    valuation: Rational,
) -> Result<ExecutionReport, ProvisioningError> {
    let mut executor = Executor::new(
        workflow.clone(),
        contracts,
        candidates,
        dominant,
        registry,
        config,
    )?;
    let mut events = Vec::new();
    let mut tick = 0;
    while !executor.is_finished() {
        events.extend(executor.step(registry, profiles, tick)?);
        tick += 1;
    }
    executor.finish(events, profiles, valuation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestPhase {
    Identification,
    Planning,
    Provisioning,
    Execution,
    Abandoned,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct RequestState {
    phase: RequestPhase,
    contracts: usize,
    /// Open conversations and the agent on the other end.
    engaged: BTreeMap<ConversationId, AgentId>,
}

/// Tracks every live request so abandonment can cancel its conversations
/// and gate all later traffic.
#[derive(Debug, Clone, Default)]
pub struct RequestBook {
    requests: BTreeMap<RequestId, RequestState>,
}

impl RequestBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(&mut self, request: RequestId) {
        self.requests.entry(request).or_insert(RequestState {
            phase: RequestPhase::Identification,
            contracts: 0,
            engaged: BTreeMap::new(),
        });
    }

    pub fn phase(&self, request: &RequestId) -> Option<RequestPhase> {
        self.requests.get(request).map(|r| r.phase)
    }

    pub fn contracts(&self, request: &RequestId) -> usize {
        self.requests.get(request).map_or(0, |r| r.contracts)
    }

    fn live(&mut self, request: &RequestId) -> Result<&mut RequestState, ProvisioningError> {
        let state = self
            .requests
            .get_mut(request)
            .ok_or_else(|| ProvisioningError::UnknownRequest(request.clone()))?;
        match state.phase {
            RequestPhase::Abandoned | RequestPhase::Closed => {
                Err(ProvisioningError::RequestClosed(request.clone()))
            }
            _ => Ok(state),
        }
    }

    /// Ok when the request may still emit envelopes.
    pub fn guard(&self, request: &RequestId) -> Result<(), ProvisioningError> {
        match self.phase(request) {
            None => Err(ProvisioningError::UnknownRequest(request.clone())),
            Some(RequestPhase::Abandoned | RequestPhase::Closed) => {
                Err(ProvisioningError::RequestClosed(request.clone()))
            }
            Some(_) => Ok(()),
        }
    }

    pub fn advance(
        &mut self,
        request: &RequestId,
        phase: RequestPhase,
    ) -> Result<(), ProvisioningError> {
        self.live(request)?.phase = phase;
        Ok(())
    }

    pub fn engage(
        &mut self,
        request: &RequestId,
        conversation: ConversationId,
        agent: AgentId,
    ) -> Result<(), ProvisioningError> {
        self.live(request)?.engaged.insert(conversation, agent);
        Ok(())
    }

    pub fn disengage(&mut self, request: &RequestId, conversation: &ConversationId) {
        if let Some(state) = self.requests.get_mut(request) {
            state.engaged.remove(conversation);
        }
    }

    pub fn record_contract(&mut self, request: &RequestId) -> Result<(), ProvisioningError> {
        self.live(request)?.contracts += 1;
        Ok(())
    }

    pub fn close(&mut self, request: &RequestId) -> Result<(), ProvisioningError> {
        self.live(request)?.phase = RequestPhase::Closed;
        Ok(())
    }

    /// Abandons a request with no binding contract. Returns one Cancel per
    /// open conversation, sent by the registrar so it crosses environments.
    pub fn abandon(
        &mut self,
        request: &RequestId,
        registry: &Registry,
        sequencer: &mut Sequencer,
    ) -> Result<Vec<Envelope>, ProvisioningError> {
        let state = self.live(request)?;
        if state.contracts > 0 {
            return Err(ProvisioningError::AbandonAfterContract(request.clone()));
        }
        let registrar = registrar_id();
        let engaged = core::mem::take(&mut state.engaged);
        state.phase = RequestPhase::Abandoned;
        Ok(engaged
            .into_iter()
            .filter_map(|(conversation, agent)| {
                let environment = registry.environment_of(&agent)?.clone();
                Some(Envelope::new(
                    conversation,
                    registrar.clone(),
                    agent,
                    environment,
                    sequencer.next(&registrar),
                    Body::Cancel(CancelBody {
                        reason: String::from("abandoned"),
                    }),
                ))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::TaskMode;
    use crate::planner::{Atomicity, Constraints};
    use alloc::vec;

    fn caps(items: &[&str]) -> CapabilitySet {
        items.iter().map(|c| (*c).into()).collect()
    }

    fn task(id: &str, capability: &str, budget: i128, mode: TaskMode) -> Task {
        Task {
            task_id: id.into(),
            required_capabilities: caps(&[capability]),
            constraints: Constraints {
                budget: Rational::integer(budget),
                deadline: None,
                mode,
            },
            depends_on: BTreeSet::new(),
            atomicity: Atomicity::Atomic,
        }
    }

    fn quote(id: &str, cost: i128) -> Quote {
        Quote {
            provider: id.into(),
            cost: Rational::integer(cost),
            strategy: Strategy::default(),
            free: false,
        }
    }

    fn provider(id: &str, capability: &str, price: i128, at: Tick) -> Registration {
        Registration {
            agent_id: id.into(),
            kind: AgentKind::Provider,
            environment: "provisioning".into(),
            domains: BTreeSet::new(),
            capabilities: caps(&[capability]),
            price_schedule: [(capability.into(), Rational::integer(price))]
                .into_iter()
                .collect(),
            location: String::new(),
            registered_at: at,
        }
    }

    fn dominant() -> Registration {
        Registration {
            agent_id: "monitor".into(),
            kind: AgentKind::Dominant,
            environment: "provisioning".into(),
            domains: BTreeSet::new(),
            capabilities: CapabilitySet::new(),
            price_schedule: BTreeMap::new(),
            location: String::new(),
            registered_at: 0,
        }
    }

    #[test]
    fn cooperative_examples() {
        let t = task("t", "diagnose", 20, TaskMode::Negotiate);
        let r = negotiate(
            &t,
            &[quote("P1", 8), quote("P2", 14)],
            NegotiationMode::Cooperative,
            6,
        )
        .unwrap();
        let a = r.agreement.unwrap();
        assert_eq!(a.provider, AgentId::from("P1"));
        assert_eq!(a.price, 14);
        let r = negotiate(&t, &[quote("P1", 25)], NegotiationMode::Cooperative, 6).unwrap();
        assert!(r.agreement.is_none());
    }

    #[test]
    fn competitive_example_crosses_at_round_one() {
        let t = task("t", "diagnose", 20, TaskMode::Negotiate);
        let r = negotiate(&t, &[quote("P1", 8)], NegotiationMode::Competitive, 6).unwrap();
        let a = r.agreement.unwrap();
        assert_eq!(a.round, Some(1));
        assert_eq!(a.price, Rational::new(23, 2));
        assert_eq!(r.trace[0].consumer_offer, 10);
        assert_eq!(r.trace[0].provider_ask, 12);
        assert_eq!(r.trace[1].consumer_offer, Rational::new(35, 3));
        assert_eq!(r.trace[1].provider_ask, Rational::new(34, 3));
    }

    #[test]
    fn auction_examples() {
        let bids = |items: &[(&str, i128)]| -> Vec<SealedBid> {
            items
                .iter()
                .map(|(b, p)| SealedBid {
                    bidder: (*b).into(),
                    price: Rational::integer(*p),
                })
                .collect()
        };
        let w = auction_winner(
            &bids(&[("P1", 10), ("P2", 12), ("P3", 9)]),
            Rational::integer(11),
        )
        .unwrap();
        assert_eq!((w.bidder.as_str(), w.price), ("P3", Rational::integer(9)));
        assert!(auction_winner(&bids(&[("P1", 12), ("P2", 13)]), Rational::integer(11)).is_none());
        let w = auction_winner(&bids(&[("P1", 10), ("P2", 10)]), Rational::integer(11)).unwrap();
        assert_eq!(w.bidder.as_str(), "P1");
    }

    #[test]
    fn auction_bids_are_rational_and_seeded() {
        let t = task("t", "ride", 100, TaskMode::Auction);
        let quotes = [quote("P1", 10), quote("P2", 12)];
        let a = run_auction(&t, &quotes, 7, "t/auction/0").unwrap();
        let b = run_auction(&t, &quotes, 7, "t/auction/0").unwrap();
        assert_eq!(a, b);
        for (bid, q) in a.bids.iter().zip(&quotes) {
            assert!(bid.price >= q.cost);
            assert!(bid.price <= q.cost * Rational::new(3, 2));
        }
    }

    #[test]
    fn free_provider_is_paid_nothing() {
        let t = task("t", "info", 20, TaskMode::Negotiate);
        let mut q = quote("F", 0);
        q.free = true;
        for mode in [NegotiationMode::Cooperative, NegotiationMode::Competitive] {
            let r = negotiate(&t, core::slice::from_ref(&q), mode, 6).unwrap();
            assert_eq!(r.agreement.unwrap().price, 0);
        }
    }

    #[test]
    fn utilities_and_welfare_identity() {
        let mut w = Workflow {
            workflow_id: "wf".into(),
            request_id: "req".into(),
            tasks: BTreeMap::new(),
            revision: 0,
        };
        let mut profiles = BTreeMap::new();
        let mut contracts = Vec::new();
        for (i, (cost, price)) in [(8, 14), (20, 40), (10, 36)].into_iter().enumerate() {
            let id = format!("t{i}");
            let cap = format!("c{i}");
            let t = task(&id, &cap, 40, TaskMode::Negotiate);
            w.tasks.insert(t.task_id.clone(), t);
            let agent = AgentId::new(format!("P{i}"));
            profiles.insert(
                agent.clone(),
                ProviderProfile {
                    agent_id: agent.clone(),
                    cost: [(cap, Rational::integer(cost))].into_iter().collect(),
                    strategy: Strategy::default(),
                    failure_probability: Rational::ZERO,
                },
            );
            contracts.push(Contract {
                contract_id: contract_id(&id.as_str().into(), 0),
                task_id: id.as_str().into(),
                provider: agent,
                price: Rational::integer(price),
                formed_at: 0,
                binding: true,
                status: ContractStatus::Completed,
            });
        }
        let report = compute_utilities(&contracts, &w, &profiles, Rational::integer(120)).unwrap();
        assert_eq!(report.providers[&AgentId::from("P0")], 6);
        assert_eq!(report.consumer, 30);
        assert_eq!(report.social_welfare, 120 - 8 - 20 - 10);
        profiles.remove(&AgentId::from("P1"));
        assert!(matches!(
            compute_utilities(&contracts, &w, &profiles, Rational::integer(120)),
            Err(ProvisioningError::MissingProfile { .. })
        ));
    }

    #[test]
    fn cost_table_lookup() {
        let profile = ProviderProfile {
            agent_id: "P".into(),
            cost: [
                (String::from("a"), Rational::integer(3)),
                (String::from("b"), Rational::integer(4)),
                (String::from("a+b"), Rational::integer(5)),
            ]
            .into_iter()
            .collect(),
            strategy: Strategy::default(),
            failure_probability: Rational::ZERO,
        };
        assert_eq!(
            profile.cost_of(&caps(&["a", "b"])),
            Some(Rational::integer(5))
        );
        assert_eq!(profile.cost_of(&caps(&["b"])), Some(Rational::integer(4)));
        assert_eq!(profile.cost_of(&caps(&["a", "c"])), None);
    }

    fn three_provider_market(
        fail_first: bool,
    ) -> (Registry, BTreeMap<AgentId, ProviderProfile>, Workflow) {
        let mut reg = Registry::new();
        reg.register(dominant()).unwrap();
        let mut profiles = BTreeMap::new();
        for (i, id) in ["P1", "P2", "P3"].into_iter().enumerate() {
            let r = provider(id, "ride", 10 + i as i128, i as Tick);
            let mut p = ProviderProfile::from_registration(&r);
            if fail_first && id == "P1" {
                p.failure_probability = Rational::ONE;
            }
            profiles.insert(r.agent_id.clone(), p);
            reg.register(r).unwrap();
        }
        let mut w = Workflow {
            workflow_id: "wf".into(),
            request_id: "req".into(),
            tasks: BTreeMap::new(),
            revision: 0,
        };
        let t = task("t1", "ride", 30, TaskMode::Negotiate);
        w.tasks.insert(t.task_id.clone(), t);
        (reg, profiles, w)
    }

    fn initial_contracts(
        w: &Workflow,
        reg: &Registry,
        profiles: &BTreeMap<AgentId, ProviderProfile>,
        config: &MechanismConfig,
    ) -> (Vec<Contract>, BTreeMap<TaskId, Vec<AgentId>>) {
        let candidates = map_providers(w, reg).unwrap();
        let mut contracts = Vec::new();
        for (id, t) in &w.tasks {
            let trace = award(t, &candidates[id], reg, profiles, config, 0).unwrap();
            let (provider, price) = trace.winner().unwrap();
            contracts.push(Contract {
                contract_id: contract_id(id, 0),
                task_id: id.clone(),
                provider: provider.clone(),
                price,
                formed_at: 0,
                binding: true,
                status: ContractStatus::Active,
            });
        }
        (contracts, candidates)
    }

    #[test]
    fn execution_reassigns_on_failure() {
        let config = MechanismConfig::default();
        let (reg, profiles, w) = three_provider_market(true);
        let (contracts, candidates) = initial_contracts(&w, &reg, &profiles, &config);
        assert_eq!(contracts[0].provider, AgentId::from("P1"));
        let report = execute(
            &w,
            contracts,
            candidates,
            &"monitor".into(),
            &reg,
            &profiles,
            config,
            Rational::integer(30),
        )
        .unwrap();
        assert_eq!(report.outcome, ExecutionOutcome::Completed);
        assert_eq!(report.reassignments(), 1);
        let statuses: Vec<(&str, ContractStatus)> = report
            .contracts
            .iter()
            .map(|c| (c.provider.as_str(), c.status))
            .collect();
        assert_eq!(
            statuses,
            vec![
                ("P1", ContractStatus::Reassigned),
                ("P2", ContractStatus::Completed)
            ]
        );
        // Cooperative over {P2, P3}: P2 at (11 + 30) / 2.
        assert_eq!(report.contracts[1].price, Rational::new(41, 2));
    }

    #[test]
    fn execution_fails_when_candidates_run_out() {
        let config = MechanismConfig::default();
        let (reg, mut profiles, w) = three_provider_market(false);
        for p in profiles.values_mut() {
            p.failure_probability = Rational::ONE;
        }
        let (contracts, candidates) = initial_contracts(&w, &reg, &profiles, &config);
        let report = execute(
            &w,
            contracts,
            candidates,
            &"monitor".into(),
            &reg,
            &profiles,
            config,
            Rational::integer(30),
        )
        .unwrap();
        assert_eq!(
            report.outcome,
            ExecutionOutcome::WorkflowFailed {
                task_id: "t1".into()
            }
        );
        assert!(report
            .contracts
            .iter()
            .all(|c| c.status != ContractStatus::Completed));
        assert!(report.utilities.is_none());
    }

    #[test]
    fn departed_provider_counts_as_failure() {
        let config = MechanismConfig::default();
        let (mut reg, profiles, w) = three_provider_market(false);
        let (contracts, candidates) = initial_contracts(&w, &reg, &profiles, &config);
        reg.deregister(&"P1".into()).unwrap();
        let report = execute(
            &w,
            contracts,
            candidates,
            &"monitor".into(),
            &reg,
            &profiles,
            config,
            Rational::integer(30),
        )
        .unwrap();
        assert_eq!(report.outcome, ExecutionOutcome::Completed);
        assert!(report
            .events
            .iter()
            .any(|e| matches!(e, ExecutionEvent::Failure { departed: true, .. })));
        assert_eq!(report.reassignments(), 1);
    }

    #[test]
    fn executor_requires_dominant() {
        let config = MechanismConfig::default();
        let (reg, profiles, w) = three_provider_market(false);
        let (contracts, candidates) = initial_contracts(&w, &reg, &profiles, &config);
        assert!(matches!(
            Executor::new(w, contracts, candidates, &"P1".into(), &reg, config),
            Err(ProvisioningError::NotDominant(_))
        ));
    }

    #[test]
    fn deregistration_before_mapping() {
        let (mut reg, _, w) = three_provider_market(false);
        for id in ["P1", "P2", "P3"] {
            reg.deregister(&id.into()).unwrap();
        }
        assert_eq!(
            map_providers(&w, &reg),
            Err(ProvisioningError::UnmappedTask("t1".into()))
        );
    }

    #[test]
    fn abandonment_gating() {
        let mut reg = Registry::new();
        reg.register(provider("P1", "ride", 10, 0)).unwrap();
        let mut book = RequestBook::new();
        let mut seq = Sequencer::default();
        let req = RequestId::from("req");
        assert_eq!(
            book.abandon(&"nope".into(), &reg, &mut seq),
            Err(ProvisioningError::UnknownRequest("nope".into()))
        );
        book.open(req.clone());
        book.engage(&req, "req/ident/0/P1".into(), "P1".into())
            .unwrap();
        let cancels = book.abandon(&req, &reg, &mut seq).unwrap();
        assert_eq!(cancels.len(), 1);
        assert_eq!(cancels[0].sender.as_str(), "registrar");
        assert_eq!(cancels[0].environment.as_str(), "provisioning");
        assert!(book.guard(&req).is_err());
        assert!(book.engage(&req, "x".into(), "P1".into()).is_err());

        let other = RequestId::from("req2");
        book.open(other.clone());
        book.record_contract(&other).unwrap();
        assert_eq!(
            book.abandon(&other, &reg, &mut seq),
            Err(ProvisioningError::AbandonAfterContract(other.clone()))
        );
        assert_eq!(book.phase(&other), Some(RequestPhase::Identification));
    }
}
