//! Stage one: turn a consumer request into primitive semantics and refine it
//! with domain experts and the consumer until it is identified, declared
//! unresolvable, or abandoned.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ids::{AgentId, ConversationId, RequestId, Tag};
use crate::messaging::{Body, Envelope, RequestBody, Sequencer};
use crate::ontology::Ontology;
use crate::rational::Rational;
use crate::registrar::{registrar_id, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentificationLimits {
    /// Tag-acceptance confidence threshold.
    pub theta: Rational,
    /// Maximum number of refinement rounds.
    pub max_rounds: u32,
}

impl Default for IdentificationLimits {
    fn default() -> Self {
        Self {
            theta: Rational::new(1, 2),
            max_rounds: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Parsed,
    UnderReview,
    AwaitingConsumer,
    Identified,
    Unresolvable,
    Abandoned,
}

impl QueryStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            QueryStatus::Identified | QueryStatus::Unresolvable | QueryStatus::Abandoned
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    NeedMoreData(BTreeSet<String>),
    ReferDomain(BTreeSet<Tag>),
    Reject(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertFeedback {
    pub expert_id: AgentId,
    pub verdict: Verdict,
    #[serde(default)]
    pub comment: String,
}

impl ExpertFeedback {
    pub fn new(expert_id: impl Into<AgentId>, verdict: Verdict) -> Self {
        Self {
            expert_id: expert_id.into(),
            verdict,
            comment: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySemantics {
    pub request_id: RequestId,
    pub text: String,
    pub tags: BTreeMap<Tag, Rational>,
    /// Tags added on an expert's referral rather than by keyword matching.
    pub expert_asserted: BTreeSet<Tag>,
    pub attributes: BTreeMap<String, String>,
    pub missing_info: BTreeSet<String>,
    /// Every attribute name that has ever been asked for.
    pub requested: BTreeSet<String>,
    pub iteration: u32,
    pub status: QueryStatus,
}

impl QuerySemantics {
    /// Tags at or above the acceptance threshold.
    pub fn selected_tags(&self, theta: Rational) -> BTreeSet<Tag> {
        self.tags
            .iter()
            .filter(|(_, c)| **c >= theta)
            .map(|(t, _)| t.clone())
            .collect()
    }

    /// Moves the request to `Abandoned`. Terminal states other than
    /// `Abandoned` are left alone.
    pub fn abandon(&mut self) -> bool {
        match self.status {
            QueryStatus::Identified | QueryStatus::Unresolvable => false,
            _ => {
                self.status = QueryStatus::Abandoned;
                true
            }
        }
    }

    fn require_attributes(&mut self, names: impl IntoIterator<Item = String>) {
        for name in names {
            self.requested.insert(name.clone());
            if !self.attributes.contains_key(&name) {
                self.missing_info.insert(name);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdentificationError {
    #[error("request text is empty")]
    EmptyRequest,
    #[error("no experts found for the request tags")]
    NoExpertsFound,
    #[error("operation not allowed while the query is {0:?}")]
    InvalidState(QueryStatus),
    #[error("attribute `{0}` was never requested")]
    UnknownAttribute(String),
    #[error("referred tag `{0}` is not in the ontology")]
    UnknownTag(Tag),
    #[error("need-more-data feedback from `{0}` names no attributes")]
    EmptyDataRequest(AgentId),
    #[error("query is not identified")]
    NotIdentified,
}

/// Number of keyword phrases of `tag` found in `lowered` (case-insensitive
/// substring match; `lowered` must already be lowercase).
fn matched_phrases(lowered: &str, keywords: &BTreeSet<String>) -> usize {
    keywords
        .iter()
        .filter(|k| lowered.contains(k.as_str()))
        .count()
}

/// Builds the primitive semantics of a request by keyword-phrase matching.
pub fn parse_request(
    request_id: RequestId,
    text: &str,
    attachments: &BTreeMap<String, String>,
    ontology: &Ontology,
    limits: &IdentificationLimits,
) -> Result<QuerySemantics, IdentificationError> {
    if text.trim().is_empty() {
        return Err(IdentificationError::EmptyRequest);
    }
    let lowered = text.to_lowercase();
    let mut tags = BTreeMap::new();
    for (tag, entry) in ontology.tags() {
        if entry.keywords.is_empty() {
            continue;
        }
        let hits = matched_phrases(&lowered, &entry.keywords);
        if hits > 0 {
            tags.insert(
                tag.clone(),
                Rational::new(hits as i128, entry.keywords.len() as i128),
            );
        }
    }
    let mut sem = QuerySemantics {
        request_id,
        text: text.into(),
        tags,
        expert_asserted: BTreeSet::new(),
        attributes: attachments.clone(),
        missing_info: BTreeSet::new(),
        requested: BTreeSet::new(),
        iteration: 0,
        status: QueryStatus::Parsed,
    };
    let required: Vec<String> = sem
        .selected_tags(limits.theta)
        .iter()
        .filter_map(|t| ontology.required_attributes(t))
        .flat_map(|names| names.iter().cloned())
        .collect();
    sem.require_attributes(required);
    Ok(sem)
}

pub fn feedback_conversation(sem: &QuerySemantics, expert: &AgentId) -> ConversationId {
    ConversationId::new(format!(
        "{}/ident/{}/{}",
        sem.request_id, sem.iteration, expert
    ))
}

/// Issues one feedback request per expert, sent by the registrar into each
/// expert's environment, and moves the query under review.
pub fn solicit_feedback(
    sem: &mut QuerySemantics,
    experts: &[AgentId],
    registry: &Registry,
    sequencer: &mut Sequencer,
) -> Result<Vec<Envelope>, IdentificationError> {
    if !matches!(
        sem.status,
        QueryStatus::Parsed | QueryStatus::UnderReview | QueryStatus::AwaitingConsumer
    ) {
        return Err(IdentificationError::InvalidState(sem.status));
    }
    if experts.is_empty() {
        return Err(IdentificationError::NoExpertsFound);
    }
    let registrar = registrar_id();
    let payload = serde_json::to_value(&*sem).unwrap_or_default();
    let mut out = Vec::with_capacity(experts.len());
    for expert in experts {
        let environment = registry
            .environment_of(expert)
            .cloned()
            .ok_or(IdentificationError::NoExpertsFound)?;
        out.push(Envelope::new(
            feedback_conversation(sem, expert),
            registrar.clone(),
            expert.clone(),
            environment,
            sequencer.next(&registrar),
            Body::Request(RequestBody {
                subject: "feedback".into(),
                payload: payload.clone(),
            }),
        ));
    }
    sem.status = QueryStatus::UnderReview;
    Ok(out)
}

/// Checks a consumer reply before it is applied.
pub fn check_consumer_input(
    sem: &QuerySemantics,
    feedbacks: &[ExpertFeedback],
    input: &BTreeMap<String, String>,
    ontology: &Ontology,
) -> Result<(), IdentificationError> {
    for name in input.keys() {
        let asked_now = feedbacks.iter().any(|f| match &f.verdict {
            Verdict::NeedMoreData(names) => names.contains(name),
            _ => false,
        });
        let required_somewhere = sem
            .tags
            .keys()
            .filter_map(|t| ontology.required_attributes(t))
            .any(|names| names.contains(name));
        if !(asked_now
            || required_somewhere
            || sem.requested.contains(name)
            || sem.attributes.contains_key(name))
        {
            return Err(IdentificationError::UnknownAttribute(name.clone()));
        }
    }
    Ok(())
}

/// Folds one round of expert feedback and consumer input into the semantics.
pub fn apply_feedback(
    sem: &QuerySemantics,
    feedbacks: &[ExpertFeedback],
    consumer_input: &BTreeMap<String, String>,
    ontology: &Ontology,
    limits: &IdentificationLimits,
) -> Result<QuerySemantics, IdentificationError> {
    if !matches!(
        sem.status,
        QueryStatus::UnderReview | QueryStatus::AwaitingConsumer
    ) {
        return Err(IdentificationError::InvalidState(sem.status));
    }
    for feedback in feedbacks {
        match &feedback.verdict {
            Verdict::ReferDomain(tags) => {
                if let Some(unknown) = tags.iter().find(|t| !ontology.contains(t)) {
                    return Err(IdentificationError::UnknownTag(unknown.clone()));
                }
            }
            Verdict::NeedMoreData(names) if names.is_empty() => {
                return Err(IdentificationError::EmptyDataRequest(
                    feedback.expert_id.clone(),
                ));
            }
            _ => {}
        }
    }
    check_consumer_input(sem, feedbacks, consumer_input, ontology)?;

    let mut next = sem.clone();
    for feedback in feedbacks {
        if let Verdict::ReferDomain(tags) = &feedback.verdict {
            for tag in tags {
                let confidence = next.tags.entry(tag.clone()).or_insert(limits.theta);
                if *confidence < limits.theta {
                    *confidence = limits.theta;
                }
                next.expert_asserted.insert(tag.clone());
                if let Some(required) = ontology.required_attributes(tag) {
                    next.require_attributes(required.iter().cloned());
                }
            }
        }
    }
    for feedback in feedbacks {
        if let Verdict::NeedMoreData(names) = &feedback.verdict {
            next.require_attributes(names.iter().cloned());
        }
    }
    for (name, value) in consumer_input {
        next.missing_info.remove(name);
        next.attributes.insert(name.clone(), value.clone());
    }
    next.iteration += 1;
    Ok(next)
}

/// Everything gathered during one refinement round.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundInput {
    /// Number of experts solicited this round.
    pub solicited: usize,
    pub feedbacks: Vec<ExpertFeedback>,
    pub consumer_input: BTreeMap<String, String>,
    pub consumer_confirmed: bool,
}

/// Advances the refinement loop by one round.
///
/// Identified iff every solicited expert approved, nothing is missing and the
/// consumer confirmed. Unresolvable iff no experts were available, every
/// expert rejected, or the round budget is exhausted.
pub fn step_identification(
    sem: &QuerySemantics,
    round: &RoundInput,
    ontology: &Ontology,
    limits: &IdentificationLimits,
) -> Result<QuerySemantics, IdentificationError> {
    if sem.status.is_terminal() {
        return Err(IdentificationError::InvalidState(sem.status));
    }
    let mut unresolvable = sem.clone();
    unresolvable.status = QueryStatus::Unresolvable;
    if round.solicited == 0 || sem.iteration >= limits.max_rounds {
        return Ok(unresolvable);
    }
    let all_reject = round.feedbacks.len() == round.solicited
        && round
            .feedbacks
            .iter()
            .all(|f| matches!(f.verdict, Verdict::Reject(_)));
    if all_reject {
        return Ok(unresolvable);
    }
    let mut reviewing = sem.clone();
    if reviewing.status == QueryStatus::Parsed {
        reviewing.status = QueryStatus::UnderReview;
    }
    let mut next = apply_feedback(
        &reviewing,
        &round.feedbacks,
        &round.consumer_input,
        ontology,
        limits,
    )?;
    let unanimous = round.feedbacks.len() == round.solicited
        && round
            .feedbacks
            .iter()
            .all(|f| f.verdict == Verdict::Approve);
    let has_tag = next.tags.values().any(|c| *c >= limits.theta);
    next.status =
        if unanimous && next.missing_info.is_empty() && round.consumer_confirmed && has_tag {
            QueryStatus::Identified
        } else if next.iteration >= limits.max_rounds {
            QueryStatus::Unresolvable
        } else if !next.missing_info.is_empty() || !round.consumer_confirmed {
            QueryStatus::AwaitingConsumer
        } else {
            QueryStatus::UnderReview
        };
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDescription {
    pub request_id: RequestId,
    pub text: String,
    pub tags: BTreeMap<Tag, Rational>,
    pub attributes: BTreeMap<String, String>,
    pub budget: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedDocument {
    pub name: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorSet {
    pub problem_description: ProblemDescription,
    pub vocabulary: Ontology,
    pub auxiliary: Vec<NamedDocument>,
}

impl DescriptorSet {
    pub fn final_tags(&self) -> BTreeSet<Tag> {
        self.problem_description.tags.keys().cloned().collect()
    }
}

pub fn emit_descriptors(
    sem: &QuerySemantics,
    ontology: &Ontology,
    limits: &IdentificationLimits,
    budget: Rational,
    auxiliary: Vec<NamedDocument>,
) -> Result<DescriptorSet, IdentificationError> {
    if sem.status != QueryStatus::Identified {
        return Err(IdentificationError::NotIdentified);
    }
    let selected = sem.selected_tags(limits.theta);
    let tags = sem
        .tags
        .iter()
        .filter(|(t, _)| selected.contains(*t))
        .map(|(t, c)| (t.clone(), *c))
        .collect();
    let vocabulary = ontology.restrict(&ontology.ancestor_closure(selected.iter()));
    Ok(DescriptorSet {
        problem_description: ProblemDescription {
            request_id: sem.request_id.clone(),
            text: sem.text.clone(),
            tags,
            attributes: sem.attributes.clone(),
            budget,
        },
        vocabulary,
        auxiliary,
    })
}
