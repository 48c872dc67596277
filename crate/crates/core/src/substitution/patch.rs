use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{
    io_err, Instruction, Patch, PatchGraph, PatchInput, PatchOutput, PayloadFile, Provenance,
    SubstitutionError,
};
use crate::canon;
use crate::equivalence::{descriptor, DescriptorSet, SubGraph};
use crate::factoring::Block;
use crate::kb::workflow_digest;
use crate::model::{InputSource, WorkflowDescription};

pub const PATCH_FILE: &str = "patch.json";
pub const PAYLOAD_DIR: &str = "payload";

/// Lifts `block` out of `wf`. References leaving the block become the input
/// schema; member outputs read by other nodes become the output schema.
pub fn extract_patch(wf: &WorkflowDescription, block: &Block) -> Result<Patch, SubstitutionError> {
    let members = &block.members;
    if let Some(m) = members.iter().find(|m| wf.node(m).is_none()) {
        return Err(SubstitutionError::UnknownNode(m.clone()));
    }
    let nodes: Vec<_> = wf
        .nodes
        .iter()
        .filter(|n| members.contains(&n.name))
        .cloned()
        .collect();

    let mut inputs: Vec<PatchInput> = Vec::new();
    for node in &nodes {
        for (_, producer, output) in node.references() {
            if members.contains(producer) {
                continue;
            }
            let id = format!("{producer}/{output}");
            if let Some(existing) = inputs.iter_mut().find(|i| i.id == id) {
                if !existing.consumers.contains(&node.name) {
                    existing.consumers.push(node.name.clone());
                }
                continue;
            }
            let p = wf.node(producer).expect("validated reference");
            let path = p.output(output).map_or(output, |o| o.path.as_str());
            inputs.push(PatchInput {
                id,
                descriptor: descriptor(path),
                producer: producer.to_string(),
                output: output.to_string(),
                producer_codomain: DescriptorSet::from_paths(p.outputs.iter().map(|o| o.path.as_str())),
                consumers: vec![node.name.clone()],
            });
        }
    }

    let mut outputs = Vec::new();
    for node in &nodes {
        for out in &node.outputs {
            let consumers: Vec<String> = wf
                .nodes
                .iter()
                .filter(|c| !members.contains(&c.name))
                .filter(|c| {
                    c.references()
                        .iter()
                        .any(|(_, p, o)| *p == node.name && *o == out.name)
                })
                .map(|c| c.name.clone())
                .collect();
            if consumers.is_empty() {
                continue;
            }
            let consumer_domains = consumers
                .iter()
                .map(|c| SubGraph::new(wf, [c.as_str()]).expect("known node").domain())
                .collect();
            outputs.push(PatchOutput {
                descriptor: descriptor(&out.path),
                node: node.name.clone(),
                output: out.name.clone(),
                consumers,
                consumer_domains,
            });
        }
    }

    let mut payload = BTreeMap::new();
    for node in &nodes {
        for input in &node.inputs {
            if let InputSource::LiteralFile { path } = &input.source {
                if payload.contains_key(path) {
                    continue;
                }
                let full = wf.literal_path(path);
                let digest = canon::digest_file(&full).map_err(|source| SubstitutionError::MissingPayload {
                    path: full.clone(),
                    source,
                })?;
                let origin = fs::canonicalize(&full).unwrap_or(full);
                payload.insert(
                    path.clone(),
                    PayloadFile {
                        digest,
                        stored: None,
                        origin: Some(origin.to_string_lossy().into_owned()),
                    },
                );
            }
        }
    }

    Ok(Patch {
        instructions: nodes
            .iter()
            .map(|n| Instruction::Remove { node: n.name.clone() })
            .collect(),
        graph: PatchGraph {
            parameters: wf.parameters.clone(),
            nodes,
        },
        payload,
        input_schema: inputs,
        output_schema: outputs,
        provenance: Provenance {
            workflow: wf.name.clone(),
            workflow_digest: workflow_digest(wf),
            block: block.id.clone(),
        },
        dir: None,
    })
}

impl Patch {
    /// Where a payload file can be read from right now.
    pub fn payload_path(&self, literal: &str) -> Option<PathBuf> {
        let f = self.payload.get(literal)?;
        match (&f.stored, &self.dir) {
            (Some(stored), Some(dir)) => Some(dir.join(PAYLOAD_DIR).join(stored)),
            _ => f.origin.as_ref().map(PathBuf::from),
        }
    }

    /// Writes `patch.json` and copies payload files under `payload/`.
    pub fn save(&self, dir: &Path) -> Result<Patch, SubstitutionError> {
        let payload_dir = dir.join(PAYLOAD_DIR);
        fs::create_dir_all(&payload_dir).map_err(io_err(&payload_dir))?;
        let mut saved = self.clone();
        for (i, (literal, file)) in saved.payload.iter_mut().enumerate() {
            let src = self
                .payload_path(literal)
                .ok_or_else(|| SubstitutionError::Format(format!("payload `{literal}` has no source")))?;
            let name = format!("{i:03}-{}", descriptor(literal));
            let dest = payload_dir.join(&name);
            if src != dest {
                fs::copy(&src, &dest).map_err(|source| SubstitutionError::MissingPayload {
                    path: src.clone(),
                    source,
                })?;
            }
            file.stored = Some(name);
            file.origin = None;
        }
        saved.dir = Some(dir.to_path_buf());
        let path = dir.join(PATCH_FILE);
        let text = serde_json::to_string_pretty(&saved).expect("patch serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(saved)
    }

    pub fn load(dir: &Path) -> Result<Patch, SubstitutionError> {
        let path = dir.join(PATCH_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut p: Patch =
            serde_json::from_str(&text).map_err(|e| SubstitutionError::Format(e.to_string()))?;
        p.dir = Some(dir.to_path_buf());
        Ok(p)
    }
}
