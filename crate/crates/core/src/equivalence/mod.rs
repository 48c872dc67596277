//! Interface hashing, sub-graph similarity, WL hashing and composability.

mod hash;
mod wl;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InputSource, ModelError, WorkflowDescription};

pub use hash::{
    hash_preimage, interface_hash, interface_hashes, literal_digests, local_hashes, InterfaceHash,
};
pub use wl::{function_similarity, multiset_jaccard, wl_hash, wl_labels, LabelMode, WlConfig, WlLabels};

#[derive(Debug, Error)]
pub enum EquivalenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{node}`: no digest for literal input `{path}`")]
    MissingLiteral { node: String, path: String },
    #[error("cannot read literal input {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty sub-graph")]
    EmptySubgraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Domain,
    Codomain,
    Function,
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "d" | "domain" => Ok(Metric::Domain),
            "c" | "codomain" => Ok(Metric::Codomain),
            "f" | "function" => Ok(Metric::Function),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub value: f64,
    pub metric: Metric,
}

impl SimilarityScore {
    pub fn new(value: f64, metric: Metric) -> Self {
        SimilarityScore { value, metric }
    }
}

/// Lowercased file name of a path.
pub fn descriptor(path: &str) -> String {
    Path::new(path)
        .file_name()
        .map(|f| f.to_string_lossy().to_lowercase())
        .unwrap_or_else(|| path.to_lowercase())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DescriptorSet(pub BTreeSet<String>);

impl DescriptorSet {
    pub fn from_paths<'a>(paths: impl IntoIterator<Item = &'a str>) -> Self {
        DescriptorSet(paths.into_iter().map(descriptor).collect())
    }

    pub fn contains(&self, d: &str) -> bool {
        self.0.contains(d)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// |A ∩ B| / |A ∪ B|; two empty sets score 1.0.
pub fn jaccard(a: &DescriptorSet, b: &DescriptorSet) -> f64 {
    let union = a.0.union(&b.0).count();
    if union == 0 {
        return 1.0;
    }
    a.0.intersection(&b.0).count() as f64 / union as f64
}

pub fn domain_similarity(a: &DescriptorSet, b: &DescriptorSet) -> SimilarityScore {
    SimilarityScore::new(jaccard(a, b), Metric::Domain)
}

pub fn codomain_similarity(a: &DescriptorSet, b: &DescriptorSet) -> SimilarityScore {
    SimilarityScore::new(jaccard(a, b), Metric::Codomain)
}

/// A set of nodes within a workflow.
#[derive(Debug, Clone)]
pub struct SubGraph<'a> {
    pub wf: &'a WorkflowDescription,
    pub members: BTreeSet<String>,
}

impl<'a> SubGraph<'a> {
    pub fn whole(wf: &'a WorkflowDescription) -> Self {
        SubGraph {
            wf,
            members: wf.nodes.iter().map(|n| n.name.clone()).collect(),
        }
    }

    pub fn new<S: Into<String>>(
        wf: &'a WorkflowDescription,
        members: impl IntoIterator<Item = S>,
    ) -> Result<Self, EquivalenceError> {
        let members: BTreeSet<String> = members.into_iter().map(Into::into).collect();
        if let Some(m) = members.iter().find(|m| wf.node(m).is_none()) {
            return Err(EquivalenceError::UnknownNode(m.clone()));
        }
        Ok(SubGraph { wf, members })
    }

    fn member_nodes(&self) -> impl Iterator<Item = &'a crate::model::ComponentNode> + '_ {
        self.wf.nodes.iter().filter(|n| self.members.contains(&n.name))
    }

    fn output_path(&self, node: &str, output: &str) -> String {
        self.wf
            .node(node)
            .and_then(|n| n.output(output))
            .map_or_else(|| output.to_string(), |o| o.path.clone())
    }

    /// Descriptors consumed from outside: literal files and references that cross
    /// the boundary.
    pub fn domain(&self) -> DescriptorSet {
        let mut out = BTreeSet::new();
        for node in self.member_nodes() {
            for input in &node.inputs {
                if let InputSource::LiteralFile { path } = &input.source {
                    out.insert(descriptor(path));
                }
            }
            for (_, target, output) in node.references() {
                if !self.members.contains(target) {
                    out.insert(descriptor(&self.output_path(target, output)));
                }
            }
        }
        DescriptorSet(out)
    }

    /// Every output declared by a member.
    pub fn codomain(&self) -> DescriptorSet {
        DescriptorSet(
            self.member_nodes()
                .flat_map(|n| &n.outputs)
                .map(|o| descriptor(&o.path))
                .collect(),
        )
    }

    /// Co-domain rebuilt only from the reference tokens other nodes hold on
    /// members, without reading the members' own declarations.
    pub fn codomain_from_consumers(&self) -> DescriptorSet {
        let mut out = BTreeSet::new();
        for node in &self.wf.nodes {
            if self.members.contains(&node.name) {
                continue;
            }
            for (_, target, output) in node.references() {
                if self.members.contains(target) {
                    out.insert(descriptor(output));
                }
            }
        }
        DescriptorSet(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Upstream,
    Downstream,
}

/// Known producer/consumer relationships between registered sub-graphs.
pub trait KnownRelations {
    /// Co-domains of sub-graphs known to feed `consumer`.
    fn producer_codomains(&self, consumer: &str) -> Vec<DescriptorSet>;
    /// Domains of sub-graphs known to consume from `producer`.
    fn consumer_domains(&self, producer: &str) -> Vec<DescriptorSet>;
}

/// The parts of a sub-graph composability looks at.
#[derive(Debug, Clone, Copy)]
pub struct Endpoint<'a> {
    pub id: &'a str,
    pub domain: &'a DescriptorSet,
    pub codomain: &'a DescriptorSet,
}

/// Upstream: is A like the producers of B. Downstream: is B like the consumers of A.
pub fn composability(
    a: Endpoint<'_>,
    b: Endpoint<'_>,
    direction: Direction,
    kb: &dyn KnownRelations,
) -> SimilarityScore {
    match direction {
        Direction::Upstream => {
            let best = kb
                .producer_codomains(b.id)
                .iter()
                .map(|p| jaccard(a.codomain, p))
                .fold(0.0, f64::max);
            SimilarityScore::new(best, Metric::Codomain)
        }
        Direction::Downstream => {
            let best = kb
                .consumer_domains(a.id)
                .iter()
                .map(|c| jaccard(b.domain, c))
                .fold(0.0, f64::max);
            SimilarityScore::new(best, Metric::Domain)
        }
    }
}

#[cfg(test)]
mod tests;
