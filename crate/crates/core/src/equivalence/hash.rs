use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{descriptor, EquivalenceError};
use crate::canon::{self, DIGEST_ALGORITHM};
use crate::model::{abstract_view, AbstractNodeView, EdgeSlot, InputSource, WorkflowDescription};
use crate::par::{par_map, Parallelism};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InterfaceHash {
    pub digest: String,
    pub algorithm: String,
}

impl InterfaceHash {
    fn sha256(digest: String) -> Self {
        InterfaceHash {
            digest,
            algorithm: DIGEST_ALGORITHM.to_string(),
        }
    }
}

impl fmt::Display for InterfaceHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.digest)
    }
}

/// Where literal-file content digests come from.
#[derive(Clone, Copy)]
pub enum Literals<'a> {
    Digests(&'a BTreeMap<String, String>),
    /// Every external input stands in as its descriptor; used for block-local hashes.
    Placeholder,
}

#[derive(Serialize)]
struct Preimage<'a> {
    view: &'a AbstractNodeView,
    literals: Vec<(String, String)>,
    producers: Vec<(String, String, String)>,
}

fn slot_key(slot: &EdgeSlot) -> String {
    match slot {
        EdgeSlot::Binding { name } => format!("input:{name}"),
        EdgeSlot::Argument { index } => format!("arg:{index}"),
    }
}

fn placeholder(desc: &str) -> String {
    canon::sha256_hex(format!("boundary:{desc}"))
}

/// Canonical preimage of one node given its producers' digests.
fn node_preimage(
    wf: &WorkflowDescription,
    node: &str,
    literals: Literals<'_>,
    members: Option<&BTreeSet<String>>,
    producer_digest: &mut dyn FnMut(&str) -> Result<String, EquivalenceError>,
) -> Result<String, EquivalenceError> {
    let view = abstract_view(wf, node)?;
    let n = wf.node(node).expect("abstract_view checked the node");
    let mut lits = Vec::new();
    for input in &n.inputs {
        if let InputSource::LiteralFile { path } = &input.source {
            let digest = match literals {
                Literals::Digests(map) => map.get(path).cloned().ok_or_else(|| {
                    EquivalenceError::MissingLiteral {
                        node: node.to_string(),
                        path: path.clone(),
                    }
                })?,
                Literals::Placeholder => placeholder(&descriptor(path)),
            };
            lits.push((input.name.clone(), digest));
        }
    }
    lits.sort();
    let mut producers = Vec::new();
    for (slot, target, output) in n.references() {
        let path = wf
            .node(target)
            .and_then(|t| t.output(output))
            .map(|o| o.path.clone())
            .unwrap_or_default();
        let inside = members.is_none_or(|m| m.contains(target));
        let digest = if inside {
            producer_digest(target)?
        } else {
            placeholder(&descriptor(&path))
        };
        producers.push((slot_key(&slot), digest, path));
    }
    producers.sort();
    Ok(canon::canonical_string(&Preimage {
        view: &view,
        literals: lits,
        producers,
    }))
}

struct Recursive<'a> {
    wf: &'a WorkflowDescription,
    literals: Literals<'a>,
    members: Option<&'a BTreeSet<String>>,
    memo: HashMap<String, String>,
}

impl Recursive<'_> {
    fn digest(&mut self, node: &str) -> Result<String, EquivalenceError> {
        if let Some(d) = self.memo.get(node) {
            return Ok(d.clone());
        }
        let (wf, literals, members) = (self.wf, self.literals, self.members);
        let pre = node_preimage(wf, node, literals, members, &mut |p| self.digest(p))?;
        let d = canon::sha256_hex(pre);
        self.memo.insert(node.to_string(), d.clone());
        Ok(d)
    }
}

/// Digest over the node's abstract view, its literal-input digests and its
/// producers' interface hashes, recursively.
pub fn interface_hash(
    wf: &WorkflowDescription,
    node: &str,
    literal_digests: &BTreeMap<String, String>,
) -> Result<InterfaceHash, EquivalenceError> {
    if wf.node(node).is_none() {
        return Err(EquivalenceError::UnknownNode(node.to_string()));
    }
    let mut r = Recursive {
        wf,
        literals: Literals::Digests(literal_digests),
        members: None,
        memo: HashMap::new(),
    };
    r.digest(node).map(InterfaceHash::sha256)
}

/// The canonical text whose digest is `interface_hash(wf, node, ..)`.
pub fn hash_preimage(
    wf: &WorkflowDescription,
    node: &str,
    literal_digests: &BTreeMap<String, String>,
) -> Result<String, EquivalenceError> {
    let mut r = Recursive {
        wf,
        literals: Literals::Digests(literal_digests),
        members: None,
        memo: HashMap::new(),
    };
    node_preimage(wf, node, Literals::Digests(literal_digests), None, &mut |p| r.digest(p))
}

/// Hashes every node, level by level in dependency order; nodes within a level
/// are independent and hashed concurrently.
pub fn interface_hashes(
    wf: &WorkflowDescription,
    literal_digests: &BTreeMap<String, String>,
    mode: Parallelism,
) -> Result<BTreeMap<String, InterfaceHash>, EquivalenceError> {
    scoped_hashes(wf, None, Literals::Digests(literal_digests), mode)
}

/// Hashes of `members` with everything outside the set, literal inputs
/// included, replaced by descriptor placeholders. Independent of upstream
/// history and input data.
pub fn local_hashes(
    wf: &WorkflowDescription,
    members: &BTreeSet<String>,
) -> Result<BTreeMap<String, InterfaceHash>, EquivalenceError> {
    scoped_hashes(wf, Some(members), Literals::Placeholder, Parallelism::Sequential)
}

fn scoped_hashes(
    wf: &WorkflowDescription,
    members: Option<&BTreeSet<String>>,
    literals: Literals<'_>,
    mode: Parallelism,
) -> Result<BTreeMap<String, InterfaceHash>, EquivalenceError> {
    let levels = levels(wf);
    let mut done: BTreeMap<String, String> = BTreeMap::new();
    for level in levels {
        let names: Vec<&str> = level
            .iter()
            .map(|&i| wf.nodes[i].name.as_str())
            .filter(|n| members.is_none_or(|m| m.contains(*n)))
            .collect();
        let computed = par_map(&names, mode, |name| {
            let pre = node_preimage(wf, name, literals, members, &mut |p| {
                done.get(p)
                    .cloned()
                    .ok_or_else(|| EquivalenceError::UnknownNode(p.to_string()))
            })?;
            Ok::<_, EquivalenceError>(canon::sha256_hex(pre))
        });
        for (name, d) in names.iter().zip(computed) {
            done.insert(name.to_string(), d?);
        }
    }
    Ok(done
        .into_iter()
        .map(|(k, v)| (k, InterfaceHash::sha256(v)))
        .collect())
}

/// Nodes grouped by longest distance from a source.
fn levels(wf: &WorkflowDescription) -> Vec<Vec<usize>> {
    let (preds, _) = wf.adjacency();
    let order = wf.topo_order().expect("validated workflows are acyclic");
    let mut depth = vec![0usize; wf.nodes.len()];
    for &i in &order {
        depth[i] = preds[i].iter().map(|&p| depth[p] + 1).max().unwrap_or(0);
    }
    let max = depth.iter().copied().max().map_or(0, |d| d + 1);
    let mut out = vec![Vec::new(); max];
    for &i in &order {
        out[depth[i]].push(i);
    }
    out
}

/// Reads and digests every literal input the workflow mentions, keyed by the
/// path as written.
pub fn literal_digests(
    wf: &WorkflowDescription,
    mode: Parallelism,
) -> Result<BTreeMap<String, String>, EquivalenceError> {
    let paths: Vec<String> = wf
        .nodes
        .iter()
        .flat_map(|n| &n.inputs)
        .filter_map(|i| match &i.source {
            InputSource::LiteralFile { path } => Some(path.clone()),
            _ => None,
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let digests = par_map(&paths, mode, |p| {
        let full = wf.literal_path(p);
        canon::digest_file(&full).map_err(|source| EquivalenceError::Io { path: full, source })
    });
    paths
        .into_iter()
        .zip(digests)
        .map(|(p, d)| d.map(|d| (p, d)))
        .collect()
}
