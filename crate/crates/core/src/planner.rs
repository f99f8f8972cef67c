//! Stage two, part A: draft a workflow from the descriptors, absorb expert
//! critiques, and decompose complex tasks until every leaf is atomic.
//!
//! A task is atomic when a single registered provider covers all of its
//! required capabilities; atomicity is a property of the registry, not of
//! the task's shape.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::identification::DescriptorSet;
use crate::ids::{AgentId, Capability, RequestId, TaskId, Tick};
use crate::ontology::{CapabilitySet, DecompositionTemplate, Ontology, TaskMode};
use crate::rational::Rational;
use crate::registrar::{AgentKind, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Atomicity {
    Atomic,
    Complex,
    #[default]
    Unclassified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraints {
    pub budget: Rational,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline: Option<Tick>,
    #[serde(default)]
    pub mode: TaskMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub task_id: TaskId,
    pub required_capabilities: CapabilitySet,
    pub constraints: Constraints,
    #[serde(default)]
    pub depends_on: BTreeSet<TaskId>,
    #[serde(default)]
    pub atomicity: Atomicity,
}

impl Task {
    pub fn budget(&self) -> Rational {
        self.constraints.budget
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workflow {
    pub workflow_id: String,
    pub request_id: RequestId,
    pub tasks: BTreeMap<TaskId, Task>,
    pub revision: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkflowRepr {
    workflow_id: String,
    request_id: RequestId,
    revision: u32,
    tasks: Vec<Task>,
}

impl Serialize for Workflow {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WorkflowRepr {
            workflow_id: self.workflow_id.clone(),
            request_id: self.request_id.clone(),
            revision: self.revision,
            tasks: self.tasks.values().cloned().collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Workflow {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = WorkflowRepr::deserialize(deserializer)?;
        Ok(Workflow {
            workflow_id: repr.workflow_id,
            request_id: repr.request_id,
            revision: repr.revision,
            tasks: repr
                .tasks
                .into_iter()
                .map(|t| (t.task_id.clone(), t))
                .collect(),
        })
    }
}

impl Workflow {
    pub fn total_budget(&self) -> Rational {
        self.tasks.values().map(Task::budget).sum()
    }

    /// Tasks in dependency order; ties broken by task id. `None` on a cycle
    /// or a dependency on a missing task.
    pub fn topological_order(&self) -> Option<Vec<TaskId>> {
        let mut indegree: BTreeMap<&TaskId, usize> = BTreeMap::new();
        let mut dependents: BTreeMap<&TaskId, Vec<&TaskId>> = BTreeMap::new();
        for task in self.tasks.values() {
            indegree.entry(&task.task_id).or_insert(0);
            for dep in &task.depends_on {
                if !self.tasks.contains_key(dep) {
                    return None;
                }
                *indegree.entry(&task.task_id).or_insert(0) += 1;
                dependents.entry(dep).or_default().push(&task.task_id);
            }
        }
        let mut ready: BTreeSet<&TaskId> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(t, _)| *t)
            .collect();
        let mut order = Vec::with_capacity(self.tasks.len());
        while let Some(next) = ready.pop_first() {
            order.push(next.clone());
            for dependent in dependents.get(next).into_iter().flatten() {
                let slot = indegree.get_mut(dependent)?;
                *slot -= 1;
                if *slot == 0 {
                    ready.insert(dependent);
                }
            }
        }
        (order.len() == self.tasks.len()).then_some(order)
    }

    fn dependents_of(&self, id: &TaskId) -> Vec<TaskId> {
        self.tasks
            .values()
            .filter(|t| t.depends_on.contains(id))
            .map(|t| t.task_id.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("tag `{0}` maps to no service")]
    NoServiceMapping(String),
    #[error("no provider can perform capability `{0}`")]
    NoCapableProvider(Capability),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("task `{0}` is not complex")]
    NotComplex(TaskId),
    #[error("task `{0}` has no required capabilities")]
    EmptyTask(TaskId),
}

/// One tentative task per service mapping of each final tag, chained in tag
/// order, with the consumer's budget split equally.
pub fn draft_workflow(
    descriptors: &DescriptorSet,
    ontology: &Ontology,
) -> Result<Workflow, PlanError> {
    let description = &descriptors.problem_description;
    let mut services = Vec::new();
    for tag in description.tags.keys() {
        let mapped = ontology.services(tag);
        if mapped.is_empty() {
            return Err(PlanError::NoServiceMapping(tag.0.clone()));
        }
        services.extend(mapped.iter());
    }
    if services.is_empty() {
        return Err(PlanError::NoServiceMapping(String::from("<no tags>")));
    }
    let share = description.budget / Rational::from(services.len());
    let mut tasks = BTreeMap::new();
    let mut previous: Option<TaskId> = None;
    for (index, service) in services.iter().enumerate() {
        let task_id = TaskId::new(format!("t{:02}", index + 1));
        let task = Task {
            task_id: task_id.clone(),
            required_capabilities: service.capabilities.clone(),
            constraints: Constraints {
                budget: share,
                deadline: service.deadline,
                mode: service.mode,
            },
            depends_on: previous.iter().cloned().collect(),
            atomicity: Atomicity::Unclassified,
        };
        tasks.insert(task_id.clone(), task);
        previous = Some(task_id);
    }
    Ok(Workflow {
        workflow_id: format!("{}/wf", description.request_id),
        request_id: description.request_id.clone(),
        tasks,
        revision: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EditOp {
    AddTask {
        task: Task,
    },
    RemoveTask {
        task_id: TaskId,
    },
    /// Expands the task by its matching template, or one part per capability.
    SplitTask {
        task_id: TaskId,
    },
    MergeTasks {
        task_ids: Vec<TaskId>,
        into: TaskId,
    },
    /// Replaces the task's dependency set.
    Reorder {
        task_id: TaskId,
        depends_on: BTreeSet<TaskId>,
    },
    Rebudget {
        task_id: TaskId,
        budget: Rational,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertEdit {
    pub expert_id: AgentId,
    pub op: EditOp,
}

fn invalid(reason: impl Into<String>) -> PlanError {
    PlanError::InvalidEdit(reason.into())
}

/// Parts of `task` under `template` (or one part per capability), with
/// intra-part precedence and exact budget shares.
fn expansion_parts(
    task: &Task,
    template: Option<&DecompositionTemplate>,
) -> Vec<(CapabilitySet, Vec<usize>, Rational)> {
    let budget = task.budget();
    match template {
        Some(t) => {
            let mut assigned = Rational::ZERO;
            let last = t.parts.len() - 1;
            t.parts
                .iter()
                .zip(&t.budget_split)
                .enumerate()
                .map(|(i, (part, weight))| {
                    // The last part takes the remainder so the split is exact.
                    let share = if i == last {
                        budget - assigned
                    } else {
                        budget * *weight
                    };
                    assigned += share;
                    (part.capabilities.clone(), part.after.clone(), share)
                })
                .collect()
        }
        None => {
            let n = task.required_capabilities.len();
            let share = budget / Rational::from(n);
            task.required_capabilities
                .iter()
                .map(|c| ([c.clone()].into_iter().collect(), Vec::new(), share))
                .collect()
        }
    }
}

fn child_id(parent: &TaskId, index: usize) -> TaskId {
    TaskId::new(format!("{}.{}", parent, index + 1))
}

/// One level of expansion: sub-tasks (inheriting the parent's dependencies
/// plus template precedence) and the ids of the sub-tasks nothing else in the
/// expansion depends on.
fn expand_once(task: &Task, template: Option<&DecompositionTemplate>) -> (Vec<Task>, Vec<TaskId>) {
    let parts = expansion_parts(task, template);
    let ids: Vec<TaskId> = (0..parts.len())
        .map(|i| child_id(&task.task_id, i))
        .collect();
    let mut has_dependent = alloc::vec![false; parts.len()];
    let mut subtasks = Vec::with_capacity(parts.len());
    for (i, (caps, after, share)) in parts.into_iter().enumerate() {
        let mut depends_on = task.depends_on.clone();
        for &p in &after {
            depends_on.insert(ids[p].clone());
            has_dependent[p] = true;
        }
        subtasks.push(Task {
            task_id: ids[i].clone(),
            required_capabilities: caps,
            constraints: Constraints {
                budget: share,
                ..task.constraints.clone()
            },
            depends_on,
            atomicity: Atomicity::Unclassified,
        });
    }
    let sinks = ids
        .iter()
        .zip(has_dependent)
        .filter(|(_, d)| !d)
        .map(|(id, _)| id.clone())
        .collect();
    (subtasks, sinks)
}

/// Replaces `id` in `workflow` by `subtasks`; dependents of `id` are rewired
/// onto `sinks`.
fn splice(workflow: &mut Workflow, id: &TaskId, subtasks: Vec<Task>, sinks: &[TaskId]) {
    let dependents = workflow.dependents_of(id);
    workflow.tasks.remove(id);
    for dependent in dependents {
        if let Some(t) = workflow.tasks.get_mut(&dependent) {
            t.depends_on.remove(id);
            t.depends_on.extend(sinks.iter().cloned());
        }
    }
    for sub in subtasks {
        workflow.tasks.insert(sub.task_id.clone(), sub);
    }
}

fn apply_op(workflow: &mut Workflow, op: &EditOp, ontology: &Ontology) -> Result<(), PlanError> {
    match op {
        EditOp::AddTask { task } => {
            if workflow.tasks.contains_key(&task.task_id) {
                return Err(invalid(format!("task `{}` already exists", task.task_id)));
            }
            if task.required_capabilities.is_empty() {
                return Err(invalid("added task has no capabilities"));
            }
            workflow.tasks.insert(task.task_id.clone(), task.clone());
        }
        EditOp::RemoveTask { task_id } => {
            if workflow.tasks.remove(task_id).is_none() {
                return Err(invalid(format!("unknown task `{task_id}`")));
            }
        }
        EditOp::SplitTask { task_id } => {
            let task = workflow
                .tasks
                .get(task_id)
                .cloned()
                .ok_or_else(|| invalid(format!("unknown task `{task_id}`")))?;
            if task.required_capabilities.len() < 2 {
                return Err(invalid(format!("task `{task_id}` has a single capability")));
            }
            let (subtasks, sinks) =
                expand_once(&task, ontology.template_for(&task.required_capabilities));
            splice(workflow, task_id, subtasks, &sinks);
        }
        EditOp::MergeTasks { task_ids, into } => {
            if task_ids.len() < 2 {
                return Err(invalid("merge needs at least two tasks"));
            }
            let mut merged: Option<Task> = None;
            for id in task_ids {
                let task = workflow
                    .tasks
                    .get(id)
                    .ok_or_else(|| invalid(format!("unknown task `{id}`")))?;
                merged = Some(match merged {
                    None => Task {
                        task_id: into.clone(),
                        atomicity: Atomicity::Unclassified,
                        ..task.clone()
                    },
                    Some(mut acc) => {
                        acc.required_capabilities
                            .extend(task.required_capabilities.iter().cloned());
                        acc.constraints.budget += task.budget();
                        acc.depends_on.extend(task.depends_on.iter().cloned());
                        acc
                    }
                });
            }
            let mut merged = merged.ok_or_else(|| invalid("empty merge"))?;
            let absorbed: BTreeSet<&TaskId> = task_ids.iter().collect();
            if workflow.tasks.contains_key(into) && !absorbed.contains(into) {
                return Err(invalid(format!("merge target `{into}` already exists")));
            }
            merged.depends_on.retain(|d| !absorbed.contains(d));
            for id in task_ids {
                workflow.tasks.remove(id);
            }
            for task in workflow.tasks.values_mut() {
                if task.depends_on.iter().any(|d| absorbed.contains(d)) {
                    task.depends_on.retain(|d| !absorbed.contains(d));
                    task.depends_on.insert(into.clone());
                }
            }
            workflow.tasks.insert(into.clone(), merged);
        }
        EditOp::Reorder {
            task_id,
            depends_on,
        } => {
            let task = workflow
                .tasks
                .get_mut(task_id)
                .ok_or_else(|| invalid(format!("unknown task `{task_id}`")))?;
            task.depends_on = depends_on.clone();
        }
        EditOp::Rebudget { task_id, budget } => {
            let task = workflow
                .tasks
                .get_mut(task_id)
                .ok_or_else(|| invalid(format!("unknown task `{task_id}`")))?;
            task.constraints.budget = *budget;
        }
    }
    Ok(())
}

/// Applies a solution expert's edits in order, all or nothing. The total
/// budget must be preserved unless the consumer approved a rebudget.
pub fn apply_critique(
    workflow: &Workflow,
    edits: &[ExpertEdit],
    registry: &Registry,
    ontology: &Ontology,
    rebudget_approved: bool,
) -> Result<Workflow, PlanError> {
    let mut next = workflow.clone();
    let mut rebudgeted = false;
    for edit in edits {
        let authorized = registry
            .get(&edit.expert_id)
            .is_some_and(|r| r.kind == AgentKind::SolutionExpert);
        if !authorized {
            return Err(invalid(format!(
                "`{}` is not a registered solution expert",
                edit.expert_id
            )));
        }
        rebudgeted |= matches!(edit.op, EditOp::Rebudget { .. });
        apply_op(&mut next, &edit.op, ontology)?;
    }
    let structural = structural_violations(&next);
    if let Some(first) = structural.first() {
        return Err(invalid(format!("{first:?}")));
    }
    let total_changed = next.total_budget() != workflow.total_budget();
    if total_changed && !(rebudgeted && rebudget_approved) {
        return Err(invalid("total budget changed without an approved rebudget"));
    }
    next.revision = workflow.revision + 1;
    Ok(next)
}

pub fn classify_task(task: &Task, registry: &Registry) -> Atomicity {
    match registry.find_providers(&task.required_capabilities) {
        Ok(found) if !found.is_empty() => Atomicity::Atomic,
        _ => Atomicity::Complex,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decomposition {
    /// Atomic leaves with dependencies already rewired.
    pub leaves: Vec<Task>,
    /// Leaves nothing else in the decomposition depends on.
    pub sinks: Vec<TaskId>,
    pub depth: usize,
}

/// Recursively splits a task until every leaf is atomic. A matching template
/// drives the split; otherwise each capability becomes its own sub-task.
pub fn decompose(
    task: &Task,
    templates: &[DecompositionTemplate],
    registry: &Registry,
) -> Result<Decomposition, PlanError> {
    if task.required_capabilities.is_empty() {
        return Err(PlanError::EmptyTask(task.task_id.clone()));
    }
    if classify_task(task, registry) == Atomicity::Atomic {
        let mut leaf = task.clone();
        leaf.atomicity = Atomicity::Atomic;
        return Ok(Decomposition {
            sinks: alloc::vec![leaf.task_id.clone()],
            leaves: alloc::vec![leaf],
            depth: 0,
        });
    }
    if task.required_capabilities.len() == 1 {
        let capability = task.required_capabilities.iter().next().cloned();
        return Err(PlanError::NoCapableProvider(capability.unwrap_or_default()));
    }
    let template = templates
        .iter()
        .find(|t| t.pattern == task.required_capabilities);
    let (parts, part_sinks) = expand_once(task, template);
    let part_sinks: BTreeSet<TaskId> = part_sinks.into_iter().collect();
    // Part id -> sink leaves of its own decomposition.
    let mut resolved: BTreeMap<TaskId, Vec<TaskId>> = BTreeMap::new();
    let mut leaves = Vec::new();
    let mut sinks = Vec::new();
    let mut depth = 0;
    for mut part in parts {
        let deps: BTreeSet<TaskId> = part
            .depends_on
            .iter()
            .flat_map(|d| match resolved.get(d) {
                Some(s) => s.clone(),
                None => alloc::vec![d.clone()],
            })
            .collect();
        part.depends_on = deps;
        let sub = decompose(&part, templates, registry)?;
        depth = depth.max(sub.depth);
        if part_sinks.contains(&part.task_id) {
            sinks.extend(sub.sinks.iter().cloned());
        }
        resolved.insert(part.task_id.clone(), sub.sinks);
        leaves.extend(sub.leaves);
    }
    Ok(Decomposition {
        leaves,
        sinks,
        depth: depth + 1,
    })
}

/// Classifies every task and replaces complex ones by their decomposition.
pub fn decompose_workflow(
    workflow: &Workflow,
    templates: &[DecompositionTemplate],
    registry: &Registry,
) -> Result<(Workflow, Vec<(TaskId, Decomposition)>), PlanError> {
    let mut next = workflow.clone();
    let mut expanded = Vec::new();
    let order = workflow
        .topological_order()
        .ok_or_else(|| invalid("workflow is not a DAG"))?;
    for id in order {
        let Some(task) = next.tasks.get(&id).cloned() else {
            continue;
        };
        match classify_task(&task, registry) {
            Atomicity::Atomic => {
                if let Some(t) = next.tasks.get_mut(&id) {
                    t.atomicity = Atomicity::Atomic;
                }
            }
            _ => {
                let decomposition = decompose(&task, templates, registry)?;
                splice(
                    &mut next,
                    &id,
                    decomposition.leaves.clone(),
                    &decomposition.sinks,
                );
                expanded.push((id, decomposition));
            }
        }
    }
    Ok((next, expanded))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    CycleDetected,
    DanglingDependency {
        task_id: TaskId,
        missing: TaskId,
    },
    NegativeBudget {
        task_id: TaskId,
    },
    EmptyTask {
        task_id: TaskId,
    },
    NonAtomicTask {
        task_id: TaskId,
    },
    BudgetMismatch {
        expected: Rational,
        actual: Rational,
    },
    UnknownCapability {
        task_id: TaskId,
        capability: Capability,
    },
}

fn structural_violations(workflow: &Workflow) -> Vec<Violation> {
    let mut out = Vec::new();
    for task in workflow.tasks.values() {
        for dep in &task.depends_on {
            if !workflow.tasks.contains_key(dep) {
                out.push(Violation::DanglingDependency {
                    task_id: task.task_id.clone(),
                    missing: dep.clone(),
                });
            }
        }
        if task.budget().is_negative() {
            out.push(Violation::NegativeBudget {
                task_id: task.task_id.clone(),
            });
        }
        if task.required_capabilities.is_empty() {
            out.push(Violation::EmptyTask {
                task_id: task.task_id.clone(),
            });
        }
    }
    let dangling = out
        .iter()
        .any(|v| matches!(v, Violation::DanglingDependency { .. }));
    if !dangling && workflow.topological_order().is_none() {
        out.push(Violation::CycleDetected);
    }
    out
}

/// Full pre-provisioning check: DAG shape, atomic leaves, budget conservation
/// against the consumer total within 1e-9, and known capabilities.
pub fn validate_workflow(
    workflow: &Workflow,
    total_budget: Rational,
    registry: &Registry,
    ontology: &Ontology,
) -> Result<(), Vec<Violation>> {
    let mut out = structural_violations(workflow);
    let actual = workflow.total_budget();
    if !actual.within(total_budget, Rational::nano()) {
        out.push(Violation::BudgetMismatch {
            expected: total_budget,
            actual,
        });
    }
    let mut universe = registry.capability_universe();
    universe.extend(ontology.capability_universe());
    for task in workflow.tasks.values() {
        for capability in &task.required_capabilities {
            if !universe.contains(capability) {
                out.push(Violation::UnknownCapability {
                    task_id: task.task_id.clone(),
                    capability: capability.clone(),
                });
            }
        }
        if classify_task(task, registry) != Atomicity::Atomic {
            out.push(Violation::NonAtomicTask {
                task_id: task.task_id.clone(),
            });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
