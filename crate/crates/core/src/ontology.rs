//! Local ontology: a forest of dotted tags with keyword phrases, required
//! attributes, service mappings and decomposition templates.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ids::{Capability, Tag, Tick};
use crate::rational::Rational;

pub type CapabilitySet = BTreeSet<Capability>;

/// How a task is allocated during provisioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    Negotiate,
    Auction,
}

/// One service type a tag maps to: the capability set a single task requires.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub capabilities: CapabilitySet,
    #[serde(default)]
    pub mode: TaskMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline: Option<Tick>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<Tag>,
    #[serde(default)]
    pub keywords: BTreeSet<String>,
    #[serde(default)]
    pub required_attributes: BTreeSet<String>,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePart {
    pub capabilities: CapabilitySet,
    /// Indices of earlier parts that must finish first.
    #[serde(default)]
    pub after: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionTemplate {
    pub pattern: CapabilitySet,
    pub parts: Vec<TemplatePart>,
    pub budget_split: Vec<Rational>,
}

impl DecompositionTemplate {
    /// Parts must be nonempty, pairwise disjoint, strictly smaller than the
    /// pattern and cover it exactly; weights must sum to one within 1e-9.
    pub fn validate(&self) -> Result<(), OntologyError> {
        let fail = |reason: &str| {
            Err(OntologyError::InvalidTemplate {
                pattern: self.pattern.iter().map(|c| c.0.clone()).collect(),
                reason: reason.to_string(),
            })
        };
        if self.pattern.len() < 2 {
            return fail("pattern needs at least two capabilities");
        }
        if self.parts.is_empty() {
            return fail("no parts");
        }
        if self.parts.len() != self.budget_split.len() {
            return fail("budget_split length differs from parts");
        }
        let mut covered = CapabilitySet::new();
        for (index, part) in self.parts.iter().enumerate() {
            if part.capabilities.is_empty() {
                return fail("empty part");
            }
            if part.capabilities.len() >= self.pattern.len() {
                return fail("part must be a strict subset of the pattern");
            }
            if part.after.iter().any(|&p| p >= index) {
                return fail("precedence may only reference earlier parts");
            }
            for cap in &part.capabilities {
                if !self.pattern.contains(cap) {
                    return fail("part capability outside pattern");
                }
                if !covered.insert(cap.clone()) {
                    return fail("parts overlap");
                }
            }
        }
        if covered != self.pattern {
            return fail("parts do not cover the pattern");
        }
        if self.budget_split.iter().any(Rational::is_negative) {
            return fail("negative weight");
        }
        let total: Rational = self.budget_split.iter().sum();
        if !total.within(Rational::ONE, Rational::nano()) {
            return fail("weights do not sum to 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OntologyError {
    #[error("tag `{tag}` names unknown parent `{parent}`")]
    UnknownParent { tag: String, parent: String },
    #[error("parent relation has a cycle through `{0}`")]
    ParentCycle(String),
    #[error("tag `{0}` has an empty keyword phrase")]
    EmptyKeyword(String),
    #[error("keyword `{keyword}` of tag `{tag}` is not lowercase")]
    KeywordNotLowercase { tag: String, keyword: String },
    #[error("service of tag `{0}` has no capabilities")]
    EmptyService(String),
    #[error("invalid decomposition template {pattern:?}: {reason}")]
    InvalidTemplate {
        pattern: Vec<String>,
        reason: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OntologyFile {
    tags: BTreeMap<Tag, TagEntry>,
    #[serde(default)]
    templates: Vec<DecompositionTemplate>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "OntologyFile", into = "OntologyFile")]
pub struct Ontology {
    tags: BTreeMap<Tag, TagEntry>,
    templates: Vec<DecompositionTemplate>,
}

impl TryFrom<OntologyFile> for Ontology {
    type Error = OntologyError;

    fn try_from(file: OntologyFile) -> Result<Self, Self::Error> {
        Ontology::new(file.tags, file.templates)
    }
}

impl From<Ontology> for OntologyFile {
    fn from(o: Ontology) -> Self {
        OntologyFile {
            tags: o.tags,
            templates: o.templates,
        }
    }
}

impl Ontology {
    pub fn new(
        tags: BTreeMap<Tag, TagEntry>,
        templates: Vec<DecompositionTemplate>,
    ) -> Result<Self, OntologyError> {
        for (tag, entry) in &tags {
            if let Some(parent) = &entry.parent {
                if !tags.contains_key(parent) {
                    return Err(OntologyError::UnknownParent {
                        tag: tag.0.clone(),
                        parent: parent.0.clone(),
                    });
                }
            }
            for keyword in &entry.keywords {
                if keyword.trim().is_empty() {
                    return Err(OntologyError::EmptyKeyword(tag.0.clone()));
                }
                if keyword.to_lowercase() != *keyword {
                    return Err(OntologyError::KeywordNotLowercase {
                        tag: tag.0.clone(),
                        keyword: keyword.clone(),
                    });
                }
            }
            if entry.services.iter().any(|s| s.capabilities.is_empty()) {
                return Err(OntologyError::EmptyService(tag.0.clone()));
            }
        }
        for tag in tags.keys() {
            let mut seen = BTreeSet::new();
            let mut cursor = Some(tag);
            while let Some(t) = cursor {
                if !seen.insert(t) {
                    return Err(OntologyError::ParentCycle(tag.0.clone()));
                }
                cursor = tags.get(t).and_then(|e| e.parent.as_ref());
            }
        }
        for template in &templates {
            template.validate()?;
        }
        Ok(Self { tags, templates })
    }

    pub fn contains(&self, tag: &Tag) -> bool {
        self.tags.contains_key(tag)
    }

    pub fn tags(&self) -> impl Iterator<Item = (&Tag, &TagEntry)> {
        self.tags.iter()
    }

    pub fn entry(&self, tag: &Tag) -> Option<&TagEntry> {
        self.tags.get(tag)
    }

    pub fn parent(&self, tag: &Tag) -> Option<&Tag> {
        self.tags.get(tag).and_then(|e| e.parent.as_ref())
    }

    /// Strict ancestors of `tag`, nearest first, paired with their distance.
    pub fn ancestors(&self, tag: &Tag) -> Vec<(&Tag, u32)> {
        let mut out = Vec::new();
        let mut distance = 0;
        let mut cursor = self.parent(tag);
        while let Some(p) = cursor {
            distance += 1;
            out.push((p, distance));
            cursor = self.parent(p);
        }
        out
    }

    /// Number of parent links from `descendant` up to `ancestor`, if any.
    pub fn distance(&self, ancestor: &Tag, descendant: &Tag) -> Option<u32> {
        if ancestor == descendant {
            return Some(0);
        }
        self.ancestors(descendant)
            .into_iter()
            .find(|(t, _)| *t == ancestor)
            .map(|(_, d)| d)
    }

    pub fn keywords(&self, tag: &Tag) -> Option<&BTreeSet<String>> {
        self.tags.get(tag).map(|e| &e.keywords)
    }

    pub fn required_attributes(&self, tag: &Tag) -> Option<&BTreeSet<String>> {
        self.tags.get(tag).map(|e| &e.required_attributes)
    }

    pub fn services(&self, tag: &Tag) -> &[ServiceSpec] {
        self.tags
            .get(tag)
            .map(|e| e.services.as_slice())
            .unwrap_or(&[])
    }

    pub fn templates(&self) -> &[DecompositionTemplate] {
        &self.templates
    }

    pub fn template_for(&self, capabilities: &CapabilitySet) -> Option<&DecompositionTemplate> {
        self.templates.iter().find(|t| &t.pattern == capabilities)
    }

    /// Every capability named by a service mapping or a template.
    pub fn capability_universe(&self) -> CapabilitySet {
        let mut out = CapabilitySet::new();
        for entry in self.tags.values() {
            for service in &entry.services {
                out.extend(service.capabilities.iter().cloned());
            }
        }
        for template in &self.templates {
            out.extend(template.pattern.iter().cloned());
        }
        out
    }

    /// Closure of `tags` under parent links.
    pub fn ancestor_closure<'a>(&self, tags: impl IntoIterator<Item = &'a Tag>) -> BTreeSet<Tag> {
        let mut out = BTreeSet::new();
        for tag in tags {
            if !self.contains(tag) {
                continue;
            }
            out.insert(tag.clone());
            for (ancestor, _) in self.ancestors(tag) {
                out.insert(ancestor.clone());
            }
        }
        out
    }

    /// Sub-ontology restricted to `tags` (templates are kept whole).
    pub fn restrict(&self, tags: &BTreeSet<Tag>) -> Ontology {
        let kept = tags
            .iter()
            .filter_map(|t| self.tags.get(t).map(|e| (t.clone(), e.clone())))
            .collect();
        Ontology {
            tags: kept,
            templates: self.templates.clone(),
        }
    }
}
