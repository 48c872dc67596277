use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::canon;
use crate::factoring::{block_of, extract_block_workflow};
use crate::equivalence::{
    local_hashes, wl_labels, DescriptorSet, EquivalenceError, LabelMode, SubGraph, WlConfig,
    WlLabels,
};

/// Functional fingerprint of a sub-graph: block-local interface hashes, WL
/// labels in both modes, and its boundary descriptor sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Representation {
    pub interface_hashes: Vec<String>,
    pub wl: BTreeMap<LabelMode, WlLabels>,
    pub domain: DescriptorSet,
    pub codomain: DescriptorSet,
}

impl Representation {
    /// Computed on the extracted block, so an external input looks the same
    /// whether it arrives by reference or as a literal file.
    pub fn of(sub: &SubGraph<'_>, iterations: usize) -> Result<Self, EquivalenceError> {
        let block = block_of(sub.wf, sub.members.clone());
        let (standalone, _) = extract_block_workflow(sub.wf, &block);
        let sub = &SubGraph::whole(&standalone);
        let mut interface_hashes: Vec<String> = local_hashes(sub.wf, &sub.members)?
            .into_values()
            .map(|h| h.digest)
            .collect();
        interface_hashes.sort();
        let mut wl = BTreeMap::new();
        for mode in [LabelMode::Name, LabelMode::Command] {
            wl.insert(mode, wl_labels(sub, &WlConfig { iterations, mode })?);
        }
        Ok(Representation {
            interface_hashes,
            wl,
            domain: sub.domain(),
            codomain: sub.codomain(),
        })
    }

    pub fn id(&self) -> String {
        canon::digest_of(self)
    }

    pub fn wl_digest(&self, mode: LabelMode) -> Option<&str> {
        self.wl.get(&mode).map(|l| l.digest.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// A factoring unit of some workflow.
    Unit,
    /// A whole registered workflow.
    Workflow,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceRef {
    pub workflow: String,
    pub workflow_digest: String,
    pub nodes: BTreeSet<String>,
    /// Full interface hashes of the members in their host workflow, when the
    /// literal inputs were readable at registration.
    #[serde(default)]
    pub instance_hashes: BTreeMap<String, String>,
    /// Directory relative literal paths of the stored description resolve against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbNodeEntry {
    pub id: String,
    pub representation: Representation,
    pub scopes: BTreeSet<Scope>,
    pub sources: Vec<SourceRef>,
    pub registered_at: f64,
}

impl KbNodeEntry {
    pub fn new(representation: Representation, scope: Scope, source: SourceRef) -> Self {
        KbNodeEntry {
            id: representation.id(),
            representation,
            scopes: BTreeSet::from([scope]),
            sources: vec![source],
            registered_at: now(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    Equivalence,
    ProducerConsumer,
    SubgraphOf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeStatus {
    Known,
    Hypothesized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub d: f64,
    pub c: f64,
    pub f: f64,
}

impl Triple {
    pub fn max(&self) -> f64 {
        self.d.max(self.c).max(self.f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEdge {
    pub kind: EdgeKind,
    pub from: String,
    pub to: String,
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triple: Option<Triple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<EdgeStatus>,
}

pub type EdgeKey = (EdgeKind, String, String, String);

impl KbEdge {
    pub fn key(&self) -> EdgeKey {
        (self.kind, self.from.clone(), self.to.clone(), self.metric.clone())
    }

    /// Equivalence edges are undirected; endpoints are stored in sorted order.
    pub fn equivalence(a: &str, b: &str, metric: &str, triple: Triple) -> Self {
        let (from, to) = if a <= b { (a, b) } else { (b, a) };
        KbEdge {
            kind: EdgeKind::Equivalence,
            from: from.into(),
            to: to.into(),
            metric: metric.into(),
            triple: Some(triple),
            weight: None,
            status: None,
        }
    }

    pub fn producer_consumer(from: &str, to: &str, weight: f64, status: EdgeStatus, metric: &str) -> Self {
        KbEdge {
            kind: EdgeKind::ProducerConsumer,
            from: from.into(),
            to: to.into(),
            metric: metric.into(),
            triple: None,
            weight: Some(weight),
            status: Some(status),
        }
    }

    pub fn subgraph_of(part: &str, whole: &str) -> Self {
        KbEdge {
            kind: EdgeKind::SubgraphOf,
            from: part.into(),
            to: whole.into(),
            metric: "structural".into(),
            triple: None,
            weight: Some(1.0),
            status: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredOutput {
    pub path: String,
    pub digest: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub hash: String,
    pub workflow: String,
    pub node: String,
    pub started: f64,
    pub ended: f64,
    pub exit_code: i32,
    /// output name → stored file.
    pub outputs: BTreeMap<String, StoredOutput>,
    pub platform: String,
    pub memoized: bool,
    pub wall_seconds: f64,
}

impl ExecutionRecord {
    pub fn succeeded(&self) -> bool {
        self.exit_code == 0
    }

    /// Stable id used as the substituting record reference in run provenance.
    pub fn record_id(&self) -> String {
        let mut d = canon::digest_of(self);
        d.truncate(16);
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySample {
    pub binding: String,
    pub physical_hash: String,
    pub surrogate_hash: String,
    pub error: f64,
    pub comparator: String,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyStats {
    pub count: usize,
    /// `None` when there are no samples.
    pub mean: Option<f64>,
    pub max: Option<f64>,
}

pub fn now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}
