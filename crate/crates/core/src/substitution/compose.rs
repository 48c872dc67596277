use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::equivalence::{descriptor, wl_hash, LabelMode, SubGraph, WlConfig};
use crate::factoring::{extract_block_workflow, units, Block};
use crate::kb::{Kb, KbError};
use crate::model::{validate, ComponentNode, InputSource, WorkflowDescription};

#[derive(Debug, Clone)]
pub struct LibraryEntry {
    pub workflow: WorkflowDescription,
    pub blocks: Vec<Block>,
}

impl LibraryEntry {
    /// Library entry over the factoring units of `wf`.
    pub fn new(workflow: WorkflowDescription) -> Self {
        let (blocks, _) = units(&workflow);
        LibraryEntry { workflow, blocks }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateKind {
    Recombination,
    Standalone,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompositionCandidate {
    pub name: String,
    pub kind: CandidateKind,
    /// KB entry ids, one per template slot.
    pub units: Vec<String>,
    pub wl_digest: String,
    pub workflow: WorkflowDescription,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Template {
    slots: usize,
    edges: Vec<(usize, usize)>,
}

struct Unit<'a> {
    entry: &'a LibraryEntry,
    block: &'a Block,
}

fn template_of(entry: &LibraryEntry) -> Template {
    let pos: BTreeMap<&str, usize> = entry
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(i, b)| b.members.iter().map(move |m| (m.as_str(), i)))
        .collect();
    let mut edges = BTreeSet::new();
    for node in &entry.workflow.nodes {
        let Some(&c) = pos.get(node.name.as_str()) else { continue };
        for p in node.producers() {
            if let Some(&p) = pos.get(p) {
                if p != c {
                    edges.insert((p, c));
                }
            }
        }
    }
    Template {
        slots: entry.blocks.len(),
        edges: edges.into_iter().collect(),
    }
}

fn fresh_name(name: &str, taken: &BTreeSet<String>) -> String {
    if !taken.contains(name) {
        return name.to_string();
    }
    (2..)
        .map(|k| format!("{name}-{k}"))
        .find(|n| !taken.contains(n))
        .unwrap()
}

/// Joins the extracted units along the template edges. Literal inputs of a
/// downstream slot are rewired to an upstream output with the same
/// descriptor; `None` when some template edge ends up with no wire.
fn compose(units: &[&Unit<'_>], template: &Template) -> Option<WorkflowDescription> {
    let mut nodes: Vec<ComponentNode> = Vec::new();
    let mut slot_outputs: Vec<Vec<(String, String, String)>> = Vec::new();
    let mut slot_nodes: Vec<Vec<usize>> = Vec::new();
    let mut parameters = indexmap::IndexMap::new();
    for unit in units {
        let (mut wf, _) = extract_block_workflow(&unit.entry.workflow, unit.block);
        wf.base_dir = unit.entry.workflow.base_dir.clone();
        let taken: BTreeSet<String> = nodes.iter().map(|n| n.name.clone()).collect();
        let names: Vec<String> = wf.nodes.iter().map(|n| n.name.clone()).collect();
        let mut claimed = taken.clone();
        claimed.extend(names.iter().cloned());
        for name in names {
            if taken.contains(&name) {
                let fresh = fresh_name(&name, &claimed);
                claimed.insert(fresh.clone());
                wf.rename_node(&name, &fresh);
            }
        }
        for node in &mut wf.nodes {
            for input in &mut node.inputs {
                if let InputSource::LiteralFile { path } = &mut input.source {
                    *path = wf.base_dir.as_ref().map_or_else(
                        || path.clone(),
                        |b| {
                            let p = b.join(&*path);
                            std::fs::canonicalize(&p).unwrap_or(p).to_string_lossy().into_owned()
                        },
                    );
                }
            }
        }
        for (k, v) in &wf.parameters {
            parameters.entry(k.clone()).or_insert_with(|| v.clone());
        }
        slot_outputs.push(
            wf.nodes
                .iter()
                .flat_map(|n| {
                    n.outputs
                        .iter()
                        .map(|o| (descriptor(&o.path), n.name.clone(), o.name.clone()))
                })
                .collect(),
        );
        let start = nodes.len();
        nodes.extend(wf.nodes);
        slot_nodes.push((start..nodes.len()).collect());
    }

    for &(up, down) in &template.edges {
        let mut wired = false;
        for &ni in &slot_nodes[down] {
            for input in &mut nodes[ni].inputs {
                let InputSource::LiteralFile { path } = &input.source else { continue };
                let d = descriptor(path);
                let mut matches = slot_outputs[up].iter().filter(|(od, _, _)| *od == d);
                if let (Some((_, node, output)), None) = (matches.next(), matches.next()) {
                    input.source = InputSource::Reference {
                        node: node.clone(),
                        output: output.clone(),
                    };
                    wired = true;
                }
            }
        }
        if !wired {
            return None;
        }
    }
    Some(WorkflowDescription {
        name: String::new(),
        parameters,
        nodes,
        metadata: BTreeMap::new(),
        base_dir: None,
    })
}

/// New workflows built from library units: every template shape in the
/// library (plus the single unit) filled with units whose adjacent pairs are
/// composable at `threshold`. Results matching a library workflow, or each
/// other, under the command-mode WL digest are dropped.
pub fn enumerate_compositions(
    library: &[LibraryEntry],
    kb: &Kb,
    threshold: f64,
) -> Result<Vec<CompositionCandidate>, KbError> {
    let wl = WlConfig {
        iterations: kb.config().wl_iterations,
        mode: LabelMode::Command,
    };
    let digest = |wf: &WorkflowDescription| -> Result<String, KbError> {
        Ok(wl_hash(&SubGraph::whole(wf), &wl)?)
    };

    let mut catalog: BTreeMap<String, (usize, Unit<'_>)> = BTreeMap::new();
    for entry in library {
        for block in &entry.blocks {
            let sub = SubGraph {
                wf: &entry.workflow,
                members: block.members.clone(),
            };
            let id = kb.representation(&sub)?.id();
            let (_, schema) = extract_block_workflow(&entry.workflow, block);
            let lifted = schema.inputs.len();
            if catalog.get(&id).is_none_or(|(l, _)| lifted < *l) {
                catalog.insert(id, (lifted, Unit { entry, block }));
            }
        }
    }
    let ids: Vec<&String> = catalog.keys().collect();

    let mut templates: BTreeSet<Template> = library.iter().map(template_of).collect();
    templates.insert(Template {
        slots: 1,
        edges: Vec::new(),
    });

    let mut seen: BTreeSet<String> = BTreeSet::new();
    for entry in library {
        seen.insert(digest(&entry.workflow)?);
    }

    let mut out = Vec::new();
    for template in &templates {
        let mut choice: Vec<usize> = Vec::with_capacity(template.slots);
        let mut fills: Vec<Vec<usize>> = Vec::new();
        fill(template, &ids, kb, threshold, &mut choice, &mut fills);
        for fill in fills {
            let chosen: Vec<&Unit<'_>> = fill.iter().map(|&i| &catalog[ids[i]].1).collect();
            let Some(mut wf) = compose(&chosen, template) else { continue };
            let d = digest(&wf)?;
            if !seen.insert(d.clone()) {
                continue;
            }
            let units: Vec<String> = fill.iter().map(|&i| ids[i].clone()).collect();
            wf.name = format!("cand-{}", &d[..12]);
            wf.metadata.insert("composed-from".into(), units.join(","));
            if let Err(e) = validate(&wf) {
                log::warn!("dropping candidate {}: {e}", wf.name);
                continue;
            }
            out.push(CompositionCandidate {
                name: wf.name.clone(),
                kind: if template.slots == 1 {
                    CandidateKind::Standalone
                } else {
                    CandidateKind::Recombination
                },
                units,
                wl_digest: d,
                workflow: wf,
            });
        }
    }
    out.sort_by(|a, b| a.kind.cmp(&b.kind).then_with(|| a.name.cmp(&b.name)));
    Ok(out)
}

fn fill(
    template: &Template,
    ids: &[&String],
    kb: &Kb,
    threshold: f64,
    choice: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    let slot = choice.len();
    if slot == template.slots {
        out.push(choice.clone());
        return;
    }
    for u in 0..ids.len() {
        let ok = template
            .edges
            .iter()
            .filter(|(a, b)| (*a == slot && *b < slot) || (*b == slot && *a < slot) || (*a == slot && *b == slot))
            .all(|&(a, b)| {
                let pick = |s: usize| if s == slot { u } else { choice[s] };
                kb.composability_score(ids[pick(a)], ids[pick(b)]) >= threshold
            });
        if ok {
            choice.push(u);
            fill(template, ids, kb, threshold, choice, out);
            choice.pop();
        }
    }
}
