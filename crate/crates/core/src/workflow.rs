//! Declarative workflow documents.
//!
//! ```json
//! {
//!   "version": "1.0",
//!   "workflows": {
//!     "tdd_stack": {
//!       "name": "Stack",
//!       "specification": "Implement a Stack class ...",
//!       "action_pairs": {
//!         "g_test": { "prompt": "Write pytest tests ...", "guard": "syntax" },
//!         "g_impl": { "prompt": "... passes:\n{test_code}", "guard": "dynamic_test",
//!                     "requires": ["g_test"] }
//!       }
//!     }
//!   }
//! }
//! ```
//!
//! `steps` is accepted as a synonym for `action_pairs`. Each node's guard id
//! is its node id.
//!
//! Prompt placeholders are `{identifier}`; `{{` and `}}` are literal braces.
//! A placeholder resolves, in order, to the workflow specification
//! (`{specification}`), a dependency artifact (`{<node>_artifact}`), an entry
//! of the node's `bindings` map (`placeholder -> node`), or, when the node
//! requires exactly one other node, that node's artifact.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::guards::{Dependencies, Guard, GuardError, GuardRegistry};
use crate::state::{Context, GuardId, WorkflowState};

pub const DEFAULT_VERSION: &str = "1.0";
pub const SPECIFICATION_PLACEHOLDER: &str = "specification";
pub const DEFAULT_FEEDBACK_BUDGET: usize = 16 * 1024;
pub const FAILURE_HEADER: &str = "Previous attempt failed:";
pub const FAILURE_FOOTER: &str = "Fix the implementation.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkflowError {
    #[error("malformed workflow document at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid workflow document: {0}")]
    Structure(String),
    #[error("workflow `{0}` not found in document")]
    UnknownWorkflow(String),
    #[error("document holds {0} workflows; choose one by id")]
    AmbiguousWorkflow(usize),
    #[error("node `{node}` uses unknown guard type `{guard}`")]
    UnknownGuardType { node: String, guard: String },
    #[error("node `{node}`: guard `{guard}` rejected its configuration: {message}")]
    GuardConfig {
        node: String,
        guard: String,
        message: String,
    },
    #[error("node `{node}` requires unknown node `{dependency}`")]
    UnknownDependency { node: String, dependency: String },
    #[error("cyclic requires: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("node `{node}`: unresolved placeholder `{{{placeholder}}}`")]
    UnresolvedPlaceholder { node: String, placeholder: String },
    #[error("node `{node}`: binding `{placeholder}` names `{target}`, which is not in requires")]
    BadBinding {
        node: String,
        placeholder: String,
        target: String,
    },
    #[error("node `{node}`: no value bound for placeholder `{{{placeholder}}}`")]
    Unbound { node: String, placeholder: String },
}

/// One action pair: prompt template, guard type and DAG edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionPairSpec {
    pub node_id: String,
    pub prompt: String,
    pub guard: String,
    pub guard_config: Value,
    pub requires: Vec<String>,
    pub retry_limit: Option<u32>,
    pub bindings: IndexMap<String, String>,
}

/// Where a placeholder's text comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Slot {
    Specification,
    Artifact(String),
}

impl ActionPairSpec {
    pub fn guard_id(&self) -> GuardId {
        GuardId::new(self.node_id.clone()).expect("node ids are validated non-empty")
    }

    pub fn placeholders(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for piece in scan_template(&self.prompt) {
            if let Piece::Placeholder(name) = piece {
                if !seen.contains(&name) {
                    seen.push(name);
                }
            }
        }
        seen
    }

    pub fn resolve(&self, placeholder: &str) -> Option<Slot> {
        if placeholder == SPECIFICATION_PLACEHOLDER {
            return Some(Slot::Specification);
        }
        if let Some(dep) = placeholder.strip_suffix("_artifact") {
            if self.requires.iter().any(|r| r == dep) {
                return Some(Slot::Artifact(dep.to_string()));
            }
        }
        if let Some(target) = self.bindings.get(placeholder) {
            return Some(Slot::Artifact(target.clone()));
        }
        match self.requires.as_slice() {
            [only] => Some(Slot::Artifact(only.clone())),
            _ => None,
        }
    }

    /// Placeholder values for this node given the committed dependency
    /// artifacts.
    pub fn placeholder_values(
        &self,
        specification: &str,
        deps: &Dependencies,
    ) -> Result<HashMap<String, String>, WorkflowError> {
        let mut values = HashMap::new();
        for name in self.placeholders() {
            let text = match self.resolve(name) {
                Some(Slot::Specification) => specification.to_string(),
                Some(Slot::Artifact(node)) => match deps.get(&node) {
                    Some(content) => content.to_string(),
                    None => {
                        return Err(WorkflowError::Unbound {
                            node: self.node_id.clone(),
                            placeholder: name.to_string(),
                        })
                    }
                },
                None => {
                    return Err(WorkflowError::UnresolvedPlaceholder {
                        node: self.node_id.clone(),
                        placeholder: name.to_string(),
                    })
                }
            };
            values.insert(name.to_string(), text);
        }
        Ok(values)
    }

    fn references_specification(&self) -> bool {
        self.placeholders().contains(&SPECIFICATION_PLACEHOLDER)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowSpec {
    pub version: String,
    pub workflow_id: String,
    pub name: String,
    pub specification: String,
    pub action_pairs: IndexMap<String, ActionPairSpec>,
    topo_order: Vec<usize>,
}

impl WorkflowSpec {
    pub fn node(&self, id: &str) -> Option<&ActionPairSpec> {
        self.action_pairs.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ActionPairSpec> {
        self.action_pairs.values()
    }

    pub fn len(&self) -> usize {
        self.action_pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action_pairs.is_empty()
    }

    /// Node ids in topological order, declaration order breaking ties.
    pub fn topological_order(&self) -> impl Iterator<Item = &str> {
        self.topo_order.iter().map(|&i| self.action_pairs.get_index(i).unwrap().0.as_str())
    }

    /// The all-unsatisfied state over this workflow's guards.
    pub fn initial_state(&self) -> WorkflowState {
        WorkflowState::initial(self.action_pairs.values().map(ActionPairSpec::guard_id))
            .expect("node ids are unique and non-empty")
    }

    /// Nodes whose guard is unsatisfied and whose dependencies are all
    /// satisfied.
    pub fn ready_nodes(&self, state: &WorkflowState) -> Vec<&str> {
        self.topological_order()
            .filter(|id| {
                let node = &self.action_pairs[*id];
                !state.is_satisfied(id) && node.requires.iter().all(|r| state.is_satisfied(r))
            })
            .collect()
    }

    /// Instantiate every node's guard from the registry.
    pub fn build_guards(&self, registry: &GuardRegistry) -> Result<IndexMap<String, Arc<dyn Guard>>, WorkflowError> {
        self.nodes()
            .map(|n| {
                let guard = registry.build(&n.guard, &n.guard_config).map_err(|e| match e {
                    GuardError::UnknownType(t) => WorkflowError::UnknownGuardType {
                        node: n.node_id.clone(),
                        guard: t,
                    },
                    other => WorkflowError::GuardConfig {
                        node: n.node_id.clone(),
                        guard: n.guard.clone(),
                        message: other.to_string(),
                    },
                })?;
                Ok((n.node_id.clone(), guard))
            })
            .collect()
    }

    /// Standalone document holding just this workflow.
    pub fn to_document(&self) -> WorkflowDocument {
        WorkflowDocument {
            version: self.version.clone(),
            workflows: IndexMap::from([(self.workflow_id.clone(), self.clone())]),
        }
    }

    fn validate(&mut self, registry: &GuardRegistry) -> Result<(), WorkflowError> {
        for node in self.action_pairs.values() {
            if !registry.contains(&node.guard) {
                return Err(WorkflowError::UnknownGuardType {
                    node: node.node_id.clone(),
                    guard: node.guard.clone(),
                });
            }
            for dep in &node.requires {
                if !self.action_pairs.contains_key(dep) {
                    return Err(WorkflowError::UnknownDependency {
                        node: node.node_id.clone(),
                        dependency: dep.clone(),
                    });
                }
            }
            for (placeholder, target) in &node.bindings {
                if !node.requires.contains(target) {
                    return Err(WorkflowError::BadBinding {
                        node: node.node_id.clone(),
                        placeholder: placeholder.clone(),
                        target: target.clone(),
                    });
                }
            }
            if let Some(p) = node.placeholders().into_iter().find(|p| node.resolve(p).is_none()) {
                return Err(WorkflowError::UnresolvedPlaceholder {
                    node: node.node_id.clone(),
                    placeholder: p.to_string(),
                });
            }
        }
        if let Some(cycle) = find_cycle(&self.action_pairs) {
            return Err(WorkflowError::Cycle(cycle));
        }
        self.topo_order = topological_order(&self.action_pairs);
        self.build_guards(registry)?;
        Ok(())
    }
}

fn find_cycle(nodes: &IndexMap<String, ActionPairSpec>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    fn visit(
        i: usize,
        nodes: &IndexMap<String, ActionPairSpec>,
        marks: &mut [Mark],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<String>> {
        marks[i] = Mark::Active;
        stack.push(i);
        for dep in &nodes[i].requires {
            let j = nodes.get_index_of(dep).expect("dependencies validated");
            match marks[j] {
                Mark::Active => {
                    let start = stack.iter().position(|&k| k == j).unwrap();
                    let mut cycle: Vec<String> = stack[start..].iter().map(|&k| nodes[k].node_id.clone()).collect();
                    cycle.push(nodes[j].node_id.clone());
                    return Some(cycle);
                }
                Mark::New => {
                    if let Some(c) = visit(j, nodes, marks, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks[i] = Mark::Done;
        None
    }
    let mut marks = vec![Mark::New; nodes.len()];
    (0..nodes.len()).find_map(|i| {
        if marks[i] == Mark::New {
            visit(i, nodes, &mut marks, &mut Vec::new())
        } else {
            None
        }
    })
}

/// Kahn's algorithm, always taking the earliest-declared available node.
fn topological_order(nodes: &IndexMap<String, ActionPairSpec>) -> Vec<usize> {
    let mut indegree: Vec<usize> = nodes.values().map(|n| n.requires.len()).collect();
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.values().enumerate() {
        for dep in &n.requires {
            dependents[nodes.get_index_of(dep).unwrap()].push(i);
        }
    }
    let mut available: std::collections::BTreeSet<usize> =
        (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = available.pop_first() {
        order.push(i);
        for &j in &dependents[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                available.insert(j);
            }
        }
    }
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowDocument {
    pub version: String,
    pub workflows: IndexMap<String, WorkflowSpec>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    #[serde(default = "default_version")]
    version: String,
    workflows: IndexMap<String, RawWorkflow>,
}

fn default_version() -> String {
    DEFAULT_VERSION.to_string()
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawWorkflow {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    name: String,
    #[serde(default)]
    specification: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_pairs: Option<IndexMap<String, RawNode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    steps: Option<IndexMap<String, RawNode>>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    prompt: String,
    guard: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    guard_config: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    requires: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    retry_limit: Option<u32>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    bindings: IndexMap<String, String>,
}

impl WorkflowDocument {
    /// Parse and fully validate a document against `registry`.
    pub fn parse(text: &str, registry: &GuardRegistry) -> Result<Self, WorkflowError> {
        let raw: RawDocument = serde_json::from_str(text).map_err(|e| WorkflowError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let mut workflows = IndexMap::new();
        for (id, wf) in raw.workflows {
            let nodes = match (wf.action_pairs, wf.steps) {
                (Some(_), Some(_)) => {
                    return Err(WorkflowError::Structure(format!(
                        "workflow `{id}` has both `action_pairs` and `steps`"
                    )))
                }
                (Some(n), None) | (None, Some(n)) => n,
                (None, None) => {
                    return Err(WorkflowError::Structure(format!(
                        "workflow `{id}` has neither `action_pairs` nor `steps`"
                    )))
                }
            };
            let action_pairs = nodes
                .into_iter()
                .map(|(node_id, n)| {
                    if node_id.is_empty() {
                        return Err(WorkflowError::Structure(format!("workflow `{id}` has an empty node id")));
                    }
                    let mut seen = HashSet::new();
                    if let Some(dup) = n.requires.iter().find(|r| !seen.insert(*r)) {
                        return Err(WorkflowError::Structure(format!(
                            "node `{node_id}` lists `{dup}` twice in requires"
                        )));
                    }
                    let spec = ActionPairSpec {
                        node_id: node_id.clone(),
                        prompt: n.prompt,
                        guard: n.guard,
                        guard_config: n.guard_config,
                        requires: n.requires,
                        retry_limit: n.retry_limit,
                        bindings: n.bindings,
                    };
                    Ok((node_id, spec))
                })
                .collect::<Result<IndexMap<_, _>, _>>()?;
            let mut spec = WorkflowSpec {
                version: raw.version.clone(),
                workflow_id: id.clone(),
                name: wf.name,
                specification: wf.specification,
                action_pairs,
                topo_order: Vec::new(),
            };
            spec.validate(registry)?;
            workflows.insert(id, spec);
        }
        if workflows.is_empty() {
            return Err(WorkflowError::Structure("document defines no workflows".into()));
        }
        Ok(Self {
            version: raw.version,
            workflows,
        })
    }

    pub fn workflow(&self, id: &str) -> Result<&WorkflowSpec, WorkflowError> {
        self.workflows.get(id).ok_or_else(|| WorkflowError::UnknownWorkflow(id.to_string()))
    }

    /// The document's only workflow.
    pub fn single(&self) -> Result<&WorkflowSpec, WorkflowError> {
        match self.workflows.len() {
            1 => Ok(&self.workflows[0]),
            n => Err(WorkflowError::AmbiguousWorkflow(n)),
        }
    }

    /// Serialize with the `action_pairs` key.
    pub fn to_json(&self) -> String {
        let raw = RawDocument {
            version: self.version.clone(),
            workflows: self
                .workflows
                .iter()
                .map(|(id, wf)| {
                    let nodes = wf
                        .nodes()
                        .map(|n| {
                            (
                                n.node_id.clone(),
                                RawNode {
                                    prompt: n.prompt.clone(),
                                    guard: n.guard.clone(),
                                    guard_config: n.guard_config.clone(),
                                    requires: n.requires.clone(),
                                    retry_limit: n.retry_limit,
                                    bindings: n.bindings.clone(),
                                },
                            )
                        })
                        .collect();
                    (
                        id.clone(),
                        RawWorkflow {
                            name: wf.name.clone(),
                            specification: wf.specification.clone(),
                            action_pairs: Some(nodes),
                            steps: None,
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("document serializes")
    }
}

/// Parse a document and return its single workflow.
pub fn parse(text: &str, registry: &GuardRegistry) -> Result<WorkflowSpec, WorkflowError> {
    WorkflowDocument::parse(text, registry)?.single().cloned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c == '_' || c.is_ascii_alphabetic())
        && chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
}

fn scan_template(template: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let bytes = template.as_bytes();
    let (mut i, mut start) = (0, 0);
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' if bytes.get(i + 1) == Some(&bytes[i]) => {
                pieces.push(Piece::Text(&template[start..=i]));
                i += 2;
                start = i;
            }
            b'{' => {
                let close = template[i + 1..].find(['{', '}']).map(|k| i + 1 + k);
                match close {
                    Some(end) if bytes[end] == b'}' && is_ident(&template[i + 1..end]) => {
                        pieces.push(Piece::Text(&template[start..i]));
                        pieces.push(Piece::Placeholder(&template[i + 1..end]));
                        i = end + 1;
                        start = i;
                    }
                    _ => i += 1,
                }
            }
            _ => i += 1,
        }
    }
    pieces.push(Piece::Text(&template[start..]));
    pieces.retain(|p| !matches!(p, Piece::Text("")));
    pieces
}

/// Substitute placeholder values into a node's template.
pub fn fill_template(node: &ActionPairSpec, values: &HashMap<String, String>) -> Result<String, WorkflowError> {
    let mut out = String::with_capacity(node.prompt.len());
    for piece in scan_template(&node.prompt) {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Placeholder(name) => match values.get(name) {
                Some(v) => out.push_str(v),
                None => {
                    return Err(WorkflowError::Unbound {
                        node: node.node_id.clone(),
                        placeholder: name.to_string(),
                    })
                }
            },
        }
    }
    Ok(out)
}

fn failure_block(feedback: &str) -> String {
    format!("{FAILURE_HEADER}\n{feedback}\n{FAILURE_FOOTER}")
}

/// Build the full prompt for the next attempt at `node`.
///
/// Sections, separated by blank lines: global constraints, the task
/// specification (unless the template already places it), the filled
/// template, then one failure block per feedback entry, oldest first. When
/// the failure blocks exceed `feedback_budget` bytes the oldest are dropped;
/// the latest is always kept.
pub fn render_prompt(
    node: &ActionPairSpec,
    values: &HashMap<String, String>,
    ctx: &Context,
    feedback_budget: usize,
) -> Result<String, WorkflowError> {
    let mut sections: Vec<String> = Vec::new();
    let constraints = &ctx.ambient().global_constraints;
    if !constraints.is_empty() {
        sections.push(constraints.join("\n"));
    }
    if !node.references_specification() && !ctx.spec().is_empty() {
        sections.push(ctx.spec().to_string());
    }
    sections.push(fill_template(node, values)?);

    let blocks: Vec<String> = ctx.feedback().entries().iter().map(|e| failure_block(&e.feedback)).collect();
    let mut keep_from = blocks.len();
    let mut used = 0;
    for (i, block) in blocks.iter().enumerate().rev() {
        let cost = block.len() + 2;
        if keep_from != blocks.len() && used + cost > feedback_budget {
            break;
        }
        used += cost;
        keep_from = i;
    }
    sections.extend(blocks.into_iter().skip(keep_from));
    Ok(sections.join("\n\n"))
}

impl fmt::Display for WorkflowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} nodes:", self.workflow_id, self.len())?;
        for id in self.topological_order() {
            write!(f, " {id}")?;
        }
        write!(f, ")")
    }
}
