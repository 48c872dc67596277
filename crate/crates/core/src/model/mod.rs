//! Workflow description language: parsing, validation, parameter layering, and
//! the functional-only abstract view.

pub mod token;
mod view;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Component, Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use view::{abstract_view, AbstractNodeView, InputDescriptor, OutputDescriptor};

pub use token::Segment;

/// Annotation listing environment variables that count as functional.
pub const FUNCTIONAL_ENV: &str = "functional-env";
/// Annotation listing argument strings a consumer expects its producers to honour.
pub const EXPECTS_ARGS: &str = "expects-args";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid workflow name `{0}`")]
    InvalidWorkflowName(String),
    #[error("invalid node name `{0}`")]
    InvalidNodeName(String),
    #[error("duplicate node name `{0}`")]
    DuplicateNode(String),
    #[error("node `{node}`: duplicate {what} `{name}`")]
    Duplicate {
        node: String,
        what: &'static str,
        name: String,
    },
    #[error("node `{node}`: invalid path `{path}`: {reason}")]
    InvalidPath {
        node: String,
        path: String,
        reason: &'static str,
    },
    #[error("node `{node}`: {error}")]
    MalformedToken { node: String, error: token::TokenError },
    #[error("node `{node}`: reference token not allowed in {field}")]
    MisplacedReference { node: String, field: &'static str },
    #[error("node `{node}`: resources carry token `{fragment}`; resources are non-functional")]
    FunctionalResource { node: String, fragment: String },
    #[error("node `{node}`: unresolved reference to `{target}/{output}`")]
    UnresolvedReference {
        node: String,
        target: String,
        output: String,
    },
    #[error("cycle detected: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("undefined parameter `{key}` used by node `{node}`")]
    UndefinedParameter { key: String, node: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowDescription {
    pub name: String,
    #[serde(default)]
    pub parameters: IndexMap<String, String>,
    pub nodes: Vec<ComponentNode>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    /// Directory that relative literal paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl PartialEq for WorkflowDescription {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.parameters == other.parameters
            && self.nodes == other.nodes
            && self.metadata == other.metadata
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentNode {
    pub name: String,
    pub command: CommandSpec,
    #[serde(default)]
    pub inputs: Vec<InputBinding>,
    #[serde(default)]
    pub outputs: Vec<OutputDecl>,
    #[serde(default)]
    pub resources: BTreeMap<String, Value>,
    #[serde(default)]
    pub annotations: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSpec {
    pub executable: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBinding {
    pub name: String,
    pub source: InputSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InputSource {
    LiteralFile { path: String },
    Parameter { key: String },
    Reference { node: String, output: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputDecl {
    pub name: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterLayer {
    pub name: String,
    pub overrides: IndexMap<String, String>,
}

impl ParameterLayer {
    pub fn new(name: impl Into<String>, overrides: impl IntoIterator<Item = (String, String)>) -> Self {
        ParameterLayer {
            name: name.into(),
            overrides: overrides.into_iter().collect(),
        }
    }

    /// Loads a layer file: a flat JSON object of key → string.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let overrides: IndexMap<String, String> =
            serde_json::from_str(&text).map_err(syntax_error)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(ParameterLayer { name, overrides })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EdgeSlot {
    Binding { name: String },
    Argument { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DependencyEdge {
    pub producer: String,
    pub output: String,
    pub consumer: String,
    pub input: EdgeSlot,
}

impl ComponentNode {
    pub fn output(&self, name: &str) -> Option<&OutputDecl> {
        self.outputs.iter().find(|o| o.name == name)
    }

    pub fn functional_env(&self) -> BTreeSet<String> {
        string_list(self.annotations.get(FUNCTIONAL_ENV))
    }

    pub fn expected_args(&self) -> BTreeSet<String> {
        string_list(self.annotations.get(EXPECTS_ARGS))
    }

    /// Every (producer, output) this node consumes, with the slot it arrives in.
    pub fn references(&self) -> Vec<(EdgeSlot, &str, &str)> {
        let mut out = Vec::new();
        for input in &self.inputs {
            if let InputSource::Reference { node, output } = &input.source {
                out.push((
                    EdgeSlot::Binding {
                        name: input.name.clone(),
                    },
                    node.as_str(),
                    output.as_str(),
                ));
            }
        }
        for (index, arg) in self.command.arguments.iter().enumerate() {
            for (node, output) in token::refs(arg) {
                out.push((EdgeSlot::Argument { index }, node, output));
            }
        }
        out
    }

    /// Distinct producer names this node depends on.
    pub fn producers(&self) -> BTreeSet<&str> {
        self.references().into_iter().map(|(_, n, _)| n).collect()
    }
}

fn string_list(v: Option<&Value>) -> BTreeSet<String> {
    match v {
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(|i| i.as_str().map(str::to_string))
            .collect(),
        Some(Value::String(s)) => s.split(',').map(|s| s.trim().to_string()).collect(),
        _ => BTreeSet::new(),
    }
}

impl WorkflowDescription {
    pub fn node(&self, name: &str) -> Option<&ComponentNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut ComponentNode> {
        self.nodes.iter_mut().find(|n| n.name == name)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect()
    }

    pub fn literal_path(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Predecessor and successor index sets per node. Unknown references are ignored.
    pub fn adjacency(&self) -> (Vec<BTreeSet<usize>>, Vec<BTreeSet<usize>>) {
        let idx = self.index();
        let n = self.nodes.len();
        let mut preds = vec![BTreeSet::new(); n];
        let mut succs = vec![BTreeSet::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for p in node.producers() {
                if let Some(&j) = idx.get(p) {
                    preds[i].insert(j);
                    succs[j].insert(i);
                }
            }
        }
        (preds, succs)
    }

    /// Kahn order, ties broken by declaration order. `None` when cyclic.
    pub fn topo_order(&self) -> Option<Vec<usize>> {
        let (preds, succs) = self.adjacency();
        let mut indeg: Vec<usize> = preds.iter().map(BTreeSet::len).collect();
        let mut ready: BTreeSet<usize> = (0..self.nodes.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &s in &succs[i] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    /// True when no `{{param:` token remains anywhere in the commands.
    pub fn is_resolved(&self) -> bool {
        self.nodes.iter().all(|n| {
            std::iter::once(&n.command.executable)
                .chain(&n.command.arguments)
                .chain(n.command.environment.values())
                .all(|s| !s.contains("{{param:"))
        })
    }

    /// Renames a node and rewrites every reference to it.
    pub fn rename_node(&mut self, old: &str, new: &str) {
        for node in &mut self.nodes {
            if node.name == old {
                node.name = new.to_string();
            }
            for input in &mut node.inputs {
                if let InputSource::Reference { node: target, .. } = &mut input.source {
                    if target == old {
                        *target = new.to_string();
                    }
                }
            }
            for arg in &mut node.command.arguments {
                if let Ok(rewritten) = token::rewrite::<()>(arg, |seg| match seg {
                    Segment::Ref { node: t, output } if *t == old => {
                        Ok(Some(token::ref_token(new, output)))
                    }
                    _ => Ok(None),
                }) {
                    *arg = rewritten;
                }
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("workflow serializes")
    }
}

fn syntax_error(e: serde_json::Error) -> ModelError {
    ModelError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn parse_workflow(text: &str) -> Result<WorkflowDescription, ModelError> {
    let wf: WorkflowDescription = serde_json::from_str(text).map_err(syntax_error)?;
    validate(&wf)?;
    Ok(wf)
}

/// Parses a workflow file; relative literal paths resolve against its directory.
pub fn load_workflow(path: &Path) -> Result<WorkflowDescription, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut wf = parse_workflow(&text)?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty());
    wf.base_dir = Some(base.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")));
    Ok(wf)
}

fn check_relative(node: &str, path: &str) -> Result<(), ModelError> {
    let bad = |reason| ModelError::InvalidPath {
        node: node.to_string(),
        path: path.to_string(),
        reason,
    };
    if path.trim().is_empty() {
        return Err(bad("empty"));
    }
    let p = Path::new(path);
    if p.is_absolute() {
        return Err(bad("must be relative"));
    }
    if p.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(bad("must stay inside the sandbox"));
    }
    if path.contains("{{") {
        return Err(bad("tokens are not allowed in paths"));
    }
    Ok(())
}

fn scan_resources(node: &str, v: &Value) -> Result<(), ModelError> {
    match v {
        Value::String(s) if s.contains("{{ref:") || s.contains("{{param:") => {
            Err(ModelError::FunctionalResource {
                node: node.to_string(),
                fragment: s.clone(),
            })
        }
        Value::Array(items) => items.iter().try_for_each(|i| scan_resources(node, i)),
        Value::Object(map) => map.values().try_for_each(|i| scan_resources(node, i)),
        _ => Ok(()),
    }
}

/// Checks every structural invariant of a workflow description.
pub fn validate(wf: &WorkflowDescription) -> Result<(), ModelError> {
    if wf.name.trim().is_empty() {
        return Err(ModelError::InvalidWorkflowName(wf.name.clone()));
    }
    let mut names = HashMap::new();
    for node in &wf.nodes {
        if !token::is_identifier(&node.name) {
            return Err(ModelError::InvalidNodeName(node.name.clone()));
        }
        if names.insert(node.name.as_str(), node).is_some() {
            return Err(ModelError::DuplicateNode(node.name.clone()));
        }
    }
    for node in &wf.nodes {
        validate_node(node)?;
    }
    for node in &wf.nodes {
        for (_, target, output) in node.references() {
            let ok = names
                .get(target)
                .is_some_and(|t| t.output(output).is_some());
            if !ok {
                return Err(ModelError::UnresolvedReference {
                    node: node.name.clone(),
                    target: target.to_string(),
                    output: output.to_string(),
                });
            }
        }
    }
    if let Some(cycle) = find_cycle(wf) {
        return Err(ModelError::Cycle(cycle));
    }
    Ok(())
}

fn validate_node(node: &ComponentNode) -> Result<(), ModelError> {
    let name = &node.name;
    let malformed = |error| ModelError::MalformedToken {
        node: name.clone(),
        error,
    };
    let mut seen = BTreeSet::new();
    let mut paths = BTreeSet::new();
    for out in &node.outputs {
        if !token::is_identifier(&out.name) {
            return Err(ModelError::InvalidPath {
                node: name.clone(),
                path: out.name.clone(),
                reason: "output names must be identifiers",
            });
        }
        check_relative(name, &out.path)?;
        if !seen.insert(out.name.as_str()) {
            return Err(ModelError::Duplicate {
                node: name.clone(),
                what: "output",
                name: out.name.clone(),
            });
        }
        if !paths.insert(out.path.as_str()) {
            return Err(ModelError::Duplicate {
                node: name.clone(),
                what: "output path",
                name: out.path.clone(),
            });
        }
    }
    let mut bindings = BTreeSet::new();
    for input in &node.inputs {
        check_relative(name, &input.name)?;
        if !bindings.insert(input.name.as_str()) {
            return Err(ModelError::Duplicate {
                node: name.clone(),
                what: "input",
                name: input.name.clone(),
            });
        }
        match &input.source {
            InputSource::LiteralFile { path } if path.trim().is_empty() => {
                return Err(ModelError::InvalidPath {
                    node: name.clone(),
                    path: path.clone(),
                    reason: "empty",
                })
            }
            InputSource::Parameter { key } if !token::is_identifier(key) => {
                return Err(ModelError::UndefinedParameter {
                    key: key.clone(),
                    node: name.clone(),
                })
            }
            _ => {}
        }
    }
    for arg in &node.command.arguments {
        token::parse(arg).map_err(malformed)?;
    }
    let no_refs = |s: &str, field| -> Result<(), ModelError> {
        let segs = token::parse(s).map_err(malformed)?;
        if segs.iter().any(|s| matches!(s, Segment::Ref { .. })) {
            return Err(ModelError::MisplacedReference {
                node: name.clone(),
                field,
            });
        }
        Ok(())
    };
    no_refs(&node.command.executable, "executable")?;
    for v in node.command.environment.values() {
        no_refs(v, "environment")?;
    }
    for v in node.resources.values() {
        scan_resources(name, v)?;
    }
    Ok(())
}

fn find_cycle(wf: &WorkflowDescription) -> Option<Vec<String>> {
    let (preds, _) = wf.adjacency();
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; wf.nodes.len()];
    let mut stack: Vec<usize> = Vec::new();

    fn visit(
        i: usize,
        preds: &[BTreeSet<usize>],
        state: &mut [u8],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<usize>> {
        state[i] = 1;
        stack.push(i);
        for &p in &preds[i] {
            if state[p] == 1 {
                let pos = stack.iter().position(|&s| s == p).unwrap();
                let mut cycle: Vec<usize> = stack[pos..].to_vec();
                // stack follows consumer -> producer; report producer -> consumer
                cycle.reverse();
                return Some(cycle);
            }
            if state[p] == 0 {
                if let Some(c) = visit(p, preds, state, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        state[i] = 2;
        None
    }

    for i in 0..wf.nodes.len() {
        if state[i] == 0 {
            if let Some(c) = visit(i, &preds, &mut state, &mut stack) {
                let mut names: Vec<String> = c.iter().map(|&j| wf.nodes[j].name.clone()).collect();
                names.push(names[0].clone());
                return Some(names);
            }
        }
    }
    None
}

/// One edge per reference binding and per reference token, in node, binding,
/// then argument order.
pub fn dependency_graph(wf: &WorkflowDescription) -> Vec<DependencyEdge> {
    wf.nodes
        .iter()
        .flat_map(|node| {
            node.references()
                .into_iter()
                .map(move |(slot, producer, output)| DependencyEdge {
                    producer: producer.to_string(),
                    output: output.to_string(),
                    consumer: node.name.clone(),
                    input: slot,
                })
        })
        .collect()
}

/// Merges the workflow's own parameters with `layers` (later wins) and
/// substitutes every `{{param:}}` token. Reference tokens are left alone.
pub fn resolve_parameters(
    wf: &WorkflowDescription,
    layers: &[ParameterLayer],
) -> Result<WorkflowDescription, ModelError> {
    let mut params = wf.parameters.clone();
    for layer in layers {
        for (k, v) in &layer.overrides {
            params.insert(k.clone(), v.clone());
        }
    }
    let mut out = wf.clone();
    for node in &mut out.nodes {
        let name = node.name.clone();
        let subst = |s: &str| substitute(s, &params, &name);
        node.command.executable = subst(&node.command.executable)?;
        for arg in &mut node.command.arguments {
            *arg = subst(arg)?;
        }
        for v in node.command.environment.values_mut() {
            *v = subst(v)?;
        }
        for input in &node.inputs {
            if let InputSource::Parameter { key } = &input.source {
                if !params.contains_key(key) {
                    return Err(ModelError::UndefinedParameter {
                        key: key.clone(),
                        node: name.clone(),
                    });
                }
            }
        }
    }
    out.parameters = params;
    Ok(out)
}

pub(crate) fn substitute(
    s: &str,
    params: &IndexMap<String, String>,
    node: &str,
) -> Result<String, ModelError> {
    token::rewrite(s, |seg| match seg {
        Segment::Param(k) => params
            .get(*k)
            .cloned()
            .map(Some)
            .ok_or_else(|| ModelError::UndefinedParameter {
                key: k.to_string(),
                node: node.to_string(),
            }),
        _ => Ok(None),
    })
    .map_err(|e| match e {
        token::RewriteError::Token(error) => ModelError::MalformedToken {
            node: node.to_string(),
            error,
        },
        token::RewriteError::Inner(e) => e,
    })
}
