//! Patches: extraction, splice-point identification, application with conflict
//! flagging, and enumeration of new compositions from a factored library.

mod apply;
mod compose;
mod iso;
mod patch;
mod splice;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equivalence::DescriptorSet;
use crate::model::{ComponentNode, EdgeSlot, ModelError};

pub use apply::apply_patch;
pub use compose::{enumerate_compositions, CandidateKind, CompositionCandidate, LibraryEntry};
pub use iso::isomorphic;
pub use patch::extract_patch;
pub use splice::identify_splice_points;

/// Shared by splice matching and the KB hypothesized-edge threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum SubstitutionError {
    #[error("missing payload file {path}: {source}")]
    MissingPayload {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid patch document: {0}")]
    Format(String),
    #[error("patched workflow is invalid: {0}")]
    Invalid(#[source] ModelError),
    #[error("unknown node `{0}` in block")]
    UnknownNode(String),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> SubstitutionError + '_ {
    move |source| SubstitutionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Nodes of a patch; references to nodes outside the patch stay unresolved
/// until the patch is spliced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PatchGraph {
    #[serde(default)]
    pub parameters: IndexMap<String, String>,
    pub nodes: Vec<ComponentNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchInput {
    /// `producer/output` in the source workflow.
    pub id: String,
    pub descriptor: String,
    pub producer: String,
    pub output: String,
    /// Outputs of the original producer.
    pub producer_codomain: DescriptorSet,
    /// Patch nodes that read it.
    pub consumers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchOutput {
    pub descriptor: String,
    pub node: String,
    pub output: String,
    pub consumers: Vec<String>,
    pub consumer_domains: Vec<DescriptorSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadFile {
    pub digest: String,
    /// Location inside the patch directory's `payload/`, once saved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stored: Option<String>,
    /// Absolute location the file was read from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Instruction {
    Remove {
        node: String,
    },
    Modify {
        node: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arguments: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        environment: BTreeMap<String, String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub workflow: String,
    pub workflow_digest: String,
    pub block: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub graph: PatchGraph,
    /// literal path as written in the patch graph → file.
    pub payload: BTreeMap<String, PayloadFile>,
    pub input_schema: Vec<PatchInput>,
    pub output_schema: Vec<PatchOutput>,
    pub instructions: Vec<Instruction>,
    pub provenance: Provenance,
    /// Directory the patch was loaded from.
    #[serde(skip)]
    pub dir: Option<PathBuf>,
}

impl Patch {
    pub fn empty() -> Self {
        Patch {
            graph: PatchGraph::default(),
            payload: BTreeMap::new(),
            input_schema: Vec::new(),
            output_schema: Vec::new(),
            instructions: Vec::new(),
            provenance: Provenance {
                workflow: String::new(),
                workflow_digest: String::new(),
                block: String::new(),
            },
            dir: None,
        }
    }

    pub fn node_names(&self) -> BTreeSet<String> {
        self.graph.nodes.iter().map(|n| n.name.clone()).collect()
    }

    pub fn removals(&self) -> Vec<&str> {
        self.instructions
            .iter()
            .filter_map(|i| match i {
                Instruction::Remove { node } => Some(node.as_str()),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConflictKind {
    UnmappedInput,
    AmbiguousSplice,
    ArgumentExpectation,
    DanglingConsumer,
}

impl fmt::Display for ConflictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConflictKind::UnmappedInput => "unmapped-input",
            ConflictKind::AmbiguousSplice => "ambiguous-splice",
            ConflictKind::ArgumentExpectation => "argument-expectation",
            ConflictKind::DanglingConsumer => "dangling-consumer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub kind: ConflictKind,
    pub locus: String,
    pub detail: String,
}

impl fmt::Display for Conflict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}: {}", self.kind, self.locus, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSplice {
    pub node: String,
    pub output: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSplice {
    pub consumer: String,
    pub slot: EdgeSlot,
    pub removed_node: String,
    pub removed_output: String,
    pub patch_node: String,
    pub patch_output: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpliceMap {
    /// patch input id → G node and output feeding it.
    pub inputs: BTreeMap<String, InputSplice>,
    pub outputs: Vec<OutputSplice>,
    pub removal: BTreeSet<String>,
    #[serde(default)]
    pub conflicts: Vec<Conflict>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[cfg(test)]
mod tests;
