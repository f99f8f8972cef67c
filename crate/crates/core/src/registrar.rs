//! The registrar: static knowledge of every live agent, discovery, the
//! registration security gate and first-contact introductions.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::ids::{AgentId, Capability, ConversationId, EnvironmentId, Tag, Tick};
use crate::ontology::{CapabilitySet, Ontology};
use crate::rational::Rational;

/// Well-known id of the registrar agent. It is always considered registered
/// and is exempt from environment isolation.
pub const REGISTRAR_ID: &str = "registrar";

pub fn registrar_id() -> AgentId {
    AgentId::from(REGISTRAR_ID)
}

pub fn is_registrar(agent: &AgentId) -> bool {
    agent.as_str() == REGISTRAR_ID
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Consumer,
    DomainExpert,
    SolutionExpert,
    Provider,
    Orchestrator,
    Dominant,
}

impl AgentKind {
    pub fn is_expert(self) -> bool {
        matches!(self, AgentKind::DomainExpert | AgentKind::SolutionExpert)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registration {
    pub agent_id: AgentId,
    pub kind: AgentKind,
    pub environment: EnvironmentId,
    #[serde(default)]
    pub domains: BTreeSet<Tag>,
    #[serde(default)]
    pub capabilities: CapabilitySet,
    /// Capability -> list price. Capabilities absent here are offered free.
    #[serde(default)]
    pub price_schedule: BTreeMap<Capability, Rational>,
    #[serde(default)]
    pub location: String,
    #[serde(default)]
    pub registered_at: Tick,
}

impl Registration {
    /// Ordering key used for every discovery tie-break.
    fn order_key(&self) -> (Tick, &AgentId) {
        (self.registered_at, &self.agent_id)
    }

    /// True when none of `capabilities` carries a price.
    pub fn offers_free(&self, capabilities: &CapabilitySet) -> bool {
        capabilities
            .iter()
            .all(|c| !self.price_schedule.contains_key(c))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentHandle {
    pub agent_id: AgentId,
    pub registered_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertRanking {
    pub agent_id: AgentId,
    pub kind: AgentKind,
    /// In `(0, 1]`; 1 means every query tag matched exactly.
    pub match_score: Rational,
    pub matched_tags: BTreeSet<Tag>,
    pub registered_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntroductionToken {
    pub token_id: String,
    pub conversation_id: ConversationId,
    pub requester: AgentId,
    pub provider: AgentId,
}

impl IntroductionToken {
    pub fn authorizes(&self, a: &AgentId, b: &AgentId) -> bool {
        (a == &self.requester && b == &self.provider)
            || (a == &self.provider && b == &self.requester)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistrarError {
    #[error("agent id `{0}` is already registered")]
    DuplicateAgentId(AgentId),
    #[error("provider `{0}` registered without capabilities")]
    EmptyCapabilities(AgentId),
    #[error("expert `{0}` registered without domains")]
    EmptyDomains(AgentId),
    #[error("unknown agent `{0}`")]
    UnknownAgent(AgentId),
    #[error("unknown ontology tag `{0}`")]
    UnknownTag(Tag),
    #[error("discovery query is empty")]
    EmptyQuery,
    #[error("security violation: `{0}` is not registered")]
    SecurityViolation(AgentId),
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    live: BTreeMap<AgentId, Registration>,
    tokens: BTreeMap<ConversationId, IntroductionToken>,
    issued: u64,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, registration: Registration) -> Result<AgentHandle, RegistrarError> {
        let id = &registration.agent_id;
        if is_registrar(id) || self.live.contains_key(id) {
            return Err(RegistrarError::DuplicateAgentId(id.clone()));
        }
        if registration.kind == AgentKind::Provider && registration.capabilities.is_empty() {
            return Err(RegistrarError::EmptyCapabilities(id.clone()));
        }
        if registration.kind.is_expert() && registration.domains.is_empty() {
            return Err(RegistrarError::EmptyDomains(id.clone()));
        }
        let handle = AgentHandle {
            agent_id: id.clone(),
            registered_at: registration.registered_at,
        };
        self.live.insert(id.clone(), registration);
        Ok(handle)
    }

    /// Removes the agent and revokes every introduction it took part in.
    pub fn deregister(&mut self, agent: &AgentId) -> Result<Registration, RegistrarError> {
        let removed = self
            .live
            .remove(agent)
            .ok_or_else(|| RegistrarError::UnknownAgent(agent.clone()))?;
        self.tokens
            .retain(|_, t| &t.requester != agent && &t.provider != agent);
        Ok(removed)
    }

    pub fn get(&self, agent: &AgentId) -> Option<&Registration> {
        self.live.get(agent)
    }

    /// The registrar itself counts as registered.
    pub fn is_registered(&self, agent: &AgentId) -> bool {
        is_registrar(agent) || self.live.contains_key(agent)
    }

    pub fn environment_of(&self, agent: &AgentId) -> Option<&EnvironmentId> {
        self.live.get(agent).map(|r| &r.environment)
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    /// Live registrations in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Registration> {
        let mut all: Vec<&Registration> = self.live.values().collect();
        all.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        all.into_iter()
    }

    pub fn of_kind(&self, kind: AgentKind) -> Vec<&Registration> {
        self.iter().filter(|r| r.kind == kind).collect()
    }

    /// Union of all capabilities advertised by live agents.
    pub fn capability_universe(&self) -> CapabilitySet {
        self.live
            .values()
            .flat_map(|r| r.capabilities.iter().cloned())
            .collect()
    }

    /// Ranks every expert whose domains hit a query tag exactly or through
    /// one of its ancestors. Per query tag the best hit scores 1 (exact) or
    /// `1 / (1 + distance)` (ancestor); the expert's score is the mean over
    /// query tags.
    pub fn find_experts(
        &self,
        tags: &BTreeSet<Tag>,
        ontology: &Ontology,
    ) -> Result<Vec<ExpertRanking>, RegistrarError> {
        if tags.is_empty() {
            return Err(RegistrarError::EmptyQuery);
        }
        if let Some(unknown) = tags.iter().find(|t| !ontology.contains(t)) {
            return Err(RegistrarError::UnknownTag(unknown.clone()));
        }
        let mut out = Vec::new();
        for reg in self.live.values().filter(|r| r.kind.is_expert()) {
            let mut total = Rational::ZERO;
            let mut matched = BTreeSet::new();
            for tag in tags {
                let best = reg
                    .domains
                    .iter()
                    .filter_map(|d| ontology.distance(d, tag))
                    .min()
                    .map(|distance| Rational::new(1, 1 + i128::from(distance)));
                if let Some(weight) = best {
                    total += weight;
                    matched.insert(tag.clone());
                }
            }
            if matched.is_empty() {
                continue;
            }
            out.push(ExpertRanking {
                agent_id: reg.agent_id.clone(),
                kind: reg.kind,
                match_score: total / Rational::from(tags.len()),
                matched_tags: matched,
                registered_at: reg.registered_at,
            });
        }
        out.sort_by(compare_rankings);
        Ok(out)
    }

    pub fn find_experts_of_kind(
        &self,
        tags: &BTreeSet<Tag>,
        ontology: &Ontology,
        kind: AgentKind,
    ) -> Result<Vec<ExpertRanking>, RegistrarError> {
        let mut all = self.find_experts(tags, ontology)?;
        all.retain(|r| r.kind == kind);
        Ok(all)
    }

    /// Providers whose capability set covers `required`, in registration order.
    pub fn find_providers(&self, required: &CapabilitySet) -> Result<Vec<AgentId>, RegistrarError> {
        if required.is_empty() {
            return Err(RegistrarError::EmptyQuery);
        }
        Ok(self
            .iter()
            .filter(|r| r.kind == AgentKind::Provider && required.is_subset(&r.capabilities))
            .map(|r| r.agent_id.clone())
            .collect())
    }

    /// Introduces two registered agents on a fresh conversation.
    pub fn introduce(
        &mut self,
        requester: &AgentId,
        provider: &AgentId,
    ) -> Result<IntroductionToken, RegistrarError> {
        let conversation = ConversationId::new(format!(
            "intro/{}/{}/{}",
            self.issued + 1,
            requester,
            provider
        ));
        self.introduce_on(requester, provider, conversation)
    }

    /// Like [`Registry::introduce`] but on a caller-chosen conversation id.
    pub fn introduce_on(
        &mut self,
        requester: &AgentId,
        provider: &AgentId,
        conversation: ConversationId,
    ) -> Result<IntroductionToken, RegistrarError> {
        for agent in [requester, provider] {
            if !self.live.contains_key(agent) {
                return Err(RegistrarError::SecurityViolation(agent.clone()));
            }
        }
        self.issued += 1;
        let token = IntroductionToken {
            token_id: format!("tok-{}", self.issued),
            conversation_id: conversation.clone(),
            requester: requester.clone(),
            provider: provider.clone(),
        };
        self.tokens.insert(conversation, token.clone());
        Ok(token)
    }

    /// Token covering a direct exchange between `a` and `b` on `conversation`.
    pub fn token_for(
        &self,
        conversation: &ConversationId,
        a: &AgentId,
        b: &AgentId,
    ) -> Option<&IntroductionToken> {
        self.tokens.get(conversation).filter(|t| t.authorizes(a, b))
    }
}

fn compare_rankings(a: &ExpertRanking, b: &ExpertRanking) -> Ordering {
    b.match_score
        .cmp(&a.match_score)
        .then(a.registered_at.cmp(&b.registered_at))
        .then_with(|| a.agent_id.cmp(&b.agent_id))
}
