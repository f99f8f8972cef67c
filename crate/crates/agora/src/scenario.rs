//! Scenario files: strict JSON, defaults applied at load time, content digest
//! over the canonical re-serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use agora_core::identification::{IdentificationLimits, Verdict};
use agora_core::messaging::NetworkState;
use agora_core::ontology::Ontology;
use agora_core::planner::EditOp;
use agora_core::provisioning::{NegotiationMode, ProviderProfile, Strategy};
use agora_core::registrar::{AgentKind, Registration, Registry};
use agora_core::{AgentId, Rational, RequestId, Tick};
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::Phase;

fn default_theta() -> Rational {
    Rational::new(1, 2)
}

fn default_r_max() -> u32 {
    8
}

fn default_k() -> u32 {
    6
}

fn default_critique_rounds() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    #[serde(default = "default_r_max")]
    pub r_max: u32,
    #[serde(default = "default_theta")]
    pub theta: Rational,
    #[serde(default = "default_k")]
    pub k: u32,
    #[serde(default = "default_critique_rounds")]
    pub critique_rounds: u32,
    /// Parked interactive runs idle this long are abandoned.
    #[serde(default)]
    pub interactive_timeout_ticks: Option<Tick>,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            r_max: default_r_max(),
            theta: default_theta(),
            k: default_k(),
            critique_rounds: default_critique_rounds(),
            interactive_timeout_ticks: None,
        }
    }
}

impl Limits {
    pub fn identification(&self) -> IdentificationLimits {
        IdentificationLimits {
            theta: self.theta,
            max_rounds: self.r_max,
        }
    }
}

fn default_request_id() -> RequestId {
    RequestId::from("req-1")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestSpec {
    #[serde(default = "default_request_id")]
    pub request_id: RequestId,
    pub consumer_id: AgentId,
    pub text: String,
    #[serde(default)]
    pub attachments: BTreeMap<String, String>,
    pub budget: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkChange {
    pub at: Tick,
    pub state: NetworkState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Departure {
    pub agent_id: AgentId,
    #[serde(default)]
    pub at: Option<Tick>,
    /// Departs the moment this phase begins.
    #[serde(default)]
    pub at_phase: Option<Phase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    #[serde(default)]
    pub cost: BTreeMap<String, Rational>,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub failure_probability: Rational,
}

fn yes() -> bool {
    true
}

/// Scripted behaviour. Only the fields relevant to the agent's kind are read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedPolicy {
    /// Domain expert: verdict per identification round; the last repeats.
    #[serde(default)]
    pub verdicts: Vec<Verdict>,
    /// Solution expert: edits per critique round; missing rounds approve.
    #[serde(default)]
    pub critiques: Vec<Vec<EditOp>>,
    /// Provider: true costs, strategy, failure knob.
    #[serde(default)]
    pub profile: Option<ProfileSpec>,
    /// Consumer: values handed over when asked for them.
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default = "yes")]
    pub confirm: bool,
    #[serde(default)]
    pub approve_rebudget: bool,
    #[serde(default)]
    pub abandon_at_tick: Option<Tick>,
    #[serde(default)]
    pub abandon_at_phase: Option<Phase>,
}

impl Default for ScriptedPolicy {
    fn default() -> Self {
        Self {
            verdicts: Vec::new(),
            critiques: Vec::new(),
            profile: None,
            attributes: BTreeMap::new(),
            confirm: true,
            approve_rebudget: false,
            abandon_at_tick: None,
            abandon_at_phase: None,
        }
    }
}

impl ScriptedPolicy {
    pub fn verdict(&self, round: usize) -> Verdict {
        self.verdicts
            .get(round)
            .or(self.verdicts.last())
            .cloned()
            .unwrap_or(Verdict::Approve)
    }

    pub fn critique(&self, round: usize) -> Vec<EditOp> {
        self.critiques.get(round).cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[allow(clippy::large_enum_variant)]
pub enum Policy {
    Interactive,
    Scripted(ScriptedPolicy),
}

impl Serialize for Policy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Policy::Interactive => serializer.serialize_str("interactive"),
            Policy::Scripted(p) => p.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PolicyVisitor;

        impl<'de> Visitor<'de> for PolicyVisitor {
            type Value = Policy;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"interactive\" or a scripted policy object")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Policy, E> {
                if v == "interactive" {
                    Ok(Policy::Interactive)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }

            fn visit_map<A: MapAccess<'de>>(self, map: A) -> Result<Policy, A::Error> {
                ScriptedPolicy::deserialize(de::value::MapAccessDeserializer::new(map))
                    .map(Policy::Scripted)
            }
        }

        deserializer.deserialize_any(PolicyVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub ontology: Ontology,
    pub registrations: Vec<Registration>,
    #[serde(default)]
    pub network: NetworkState,
    #[serde(default)]
    pub network_changes: Vec<NetworkChange>,
    #[serde(default)]
    pub departures: Vec<Departure>,
    pub request: RequestSpec,
    #[serde(default)]
    pub policies: BTreeMap<AgentId, Policy>,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub negotiation: NegotiationMode,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse error at line {line}, column {column}, key `{key}`: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    /// Dotted path to the offending key; empty at the document root.
    pub key: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("policy names unregistered agent `{0}`")]
    UnknownPolicyTarget(AgentId),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Strict parse of scenario JSON text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let scenario: Scenario = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        ParseError {
            line: inner.line(),
            column: inner.column(),
            key: if key == "." { String::new() } else { key },
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|e| ParseError {
        line: e.line(),
        column: e.column(),
        key: String::new(),
        message: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        let mut registry = Registry::new();
        for r in &self.registrations {
            if let Err(e) = registry.register(r.clone()) {
                return invalid(e.to_string());
            }
        }
        for target in self.policies.keys() {
            if registry.get(target).is_none() {
                return Err(ScenarioError::UnknownPolicyTarget(target.clone()));
            }
        }
        match registry.get(&self.request.consumer_id) {
            Some(r) if r.kind == AgentKind::Consumer => {}
            _ => {
                return invalid(format!(
                    "consumer `{}` is not a registered consumer",
                    self.request.consumer_id
                ))
            }
        }
        if self.request.budget <= Rational::ZERO {
            return invalid("request budget must be positive".into());
        }
        if self.request.text.trim().is_empty() {
            return invalid("request text is empty".into());
        }
        if let Err(e) = self.network.validate() {
            return invalid(e.to_string());
        }
        let mut last = 0;
        for change in &self.network_changes {
            if let Err(e) = change.state.validate() {
                return invalid(e.to_string());
            }
            if change.at < last {
                return invalid("network changes must be in tick order".into());
            }
            last = change.at;
        }
        for d in &self.departures {
            if registry.get(&d.agent_id).is_none() {
                return Err(ScenarioError::UnknownPolicyTarget(d.agent_id.clone()));
            }
            if d.at.is_some() == d.at_phase.is_some() {
                return invalid(format!(
                    "departure of `{}` needs exactly one of `at`, `at_phase`",
                    d.agent_id
                ));
            }
        }
        for id in self.policies.keys() {
            if let Some(profile) = self.profile_of(id) {
                if let Err(e) = profile.validate() {
                    return invalid(e.to_string());
                }
            }
        }
        let theta = self.limits.theta;
        if theta <= Rational::ZERO || theta > Rational::ONE {
            return invalid("theta must be in (0, 1]".into());
        }
        if self.limits.k == 0 {
            return invalid("k must be at least 1".into());
        }
        Ok(())
    }

    /// Canonical JSON: every default materialized, maps key-sorted.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn registry(&self) -> Registry {
        let mut registry = Registry::new();
        for r in &self.registrations {
            registry.register(r.clone()).expect("validated scenario");
        }
        registry
    }

    pub fn policy(&self, agent: &AgentId) -> Option<&Policy> {
        self.policies.get(agent)
    }

    pub fn interactive_agents(&self) -> BTreeSet<AgentId> {
        self.policies
            .iter()
            .filter(|(_, p)| **p == Policy::Interactive)
            .map(|(id, _)| id.clone())
            .collect()
    }

    fn profile_of(&self, agent: &AgentId) -> Option<ProviderProfile> {
        match self.policies.get(agent) {
            Some(Policy::Scripted(ScriptedPolicy {
                profile: Some(spec),
                ..
            })) => Some(ProviderProfile {
                agent_id: agent.clone(),
                cost: spec.cost.clone(),
                strategy: spec.strategy,
                failure_probability: spec.failure_probability,
            }),
            _ => None,
        }
    }

    /// Cost profile of every provider; list prices stand in for missing ones.
    pub fn profiles(&self) -> BTreeMap<AgentId, ProviderProfile> {
        self.registrations
            .iter()
            .filter(|r| r.kind == AgentKind::Provider)
            .map(|r| {
                let profile = self
                    .profile_of(&r.agent_id)
                    .unwrap_or_else(|| ProviderProfile::from_registration(r));
                (r.agent_id.clone(), profile)
            })
            .collect()
    }
}

/// Finds the scenario file in `dir` whose digest is `digest`.
pub fn find_by_digest(dir: &Path, digest: &str) -> Option<(PathBuf, Scenario)> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    entries.into_iter().find_map(|p| {
        let s = load_scenario(&p).ok()?;
        (s.digest() == digest).then_some((p, s))
    })
}
