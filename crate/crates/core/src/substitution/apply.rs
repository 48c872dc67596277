use std::collections::{BTreeMap, BTreeSet};

use super::{Conflict, Instruction, Patch, SpliceMap, SubstitutionError};
use crate::canon;
use crate::model::{token, validate, ComponentNode, EdgeSlot, InputSource, Segment, WorkflowDescription};

fn rewrite_refs(node: &mut ComponentNode, slot: Option<&EdgeSlot>, from: (&str, &str), to: (&str, &str)) {
    for input in &mut node.inputs {
        if let Some(EdgeSlot::Binding { name }) = slot {
            if &input.name != name {
                continue;
            }
        } else if slot.is_some() {
            continue;
        }
        if let InputSource::Reference { node: n, output } = &mut input.source {
            if n == from.0 && output == from.1 {
                *n = to.0.to_string();
                *output = to.1.to_string();
            }
        }
    }
    for (index, arg) in node.command.arguments.iter_mut().enumerate() {
        match slot {
            Some(EdgeSlot::Argument { index: i }) if *i != index => continue,
            Some(EdgeSlot::Binding { .. }) => continue,
            _ => {}
        }
        if let Ok(r) = token::rewrite::<()>(arg, |seg| match seg {
            Segment::Ref { node: n, output } if *n == from.0 && *output == from.1 => {
                Ok(Some(token::ref_token(to.0, to.1)))
            }
            _ => Ok(None),
        }) {
            *arg = r;
        }
    }
}

/// Removes the splice map's removal set from `g`, inserts the patch nodes and
/// rewires both sides. With conflicts and no `force`, `g` comes back unchanged
/// next to the conflicts. An invalid result is always an error.
pub fn apply_patch(
    g: &WorkflowDescription,
    patch: &Patch,
    splice: &SpliceMap,
    force: bool,
) -> Result<(WorkflowDescription, Vec<Conflict>), SubstitutionError> {
    let conflicts = splice.conflicts.clone();
    if !conflicts.is_empty() && !force {
        return Ok((g.clone(), conflicts));
    }

    let retained: Vec<ComponentNode> = g
        .nodes
        .iter()
        .filter(|n| !splice.removal.contains(&n.name))
        .cloned()
        .collect();
    let mut taken: BTreeSet<String> = retained.iter().map(|n| n.name.clone()).collect();
    taken.extend(patch.graph.nodes.iter().map(|n| n.name.clone()));

    let mut inserted = WorkflowDescription {
        name: String::new(),
        parameters: Default::default(),
        nodes: patch.graph.nodes.clone(),
        metadata: Default::default(),
        base_dir: None,
    };
    let mut renames: BTreeMap<String, String> = BTreeMap::new();
    for name in patch.graph.nodes.iter().map(|n| n.name.clone()) {
        if retained.iter().any(|r| r.name == name) {
            let mut k = 1;
            let fresh = loop {
                let candidate = if k == 1 { format!("{name}-p") } else { format!("{name}-p{k}") };
                if !taken.contains(&candidate) {
                    break candidate;
                }
                k += 1;
            };
            taken.insert(fresh.clone());
            inserted.rename_node(&name, &fresh);
            renames.insert(name, fresh);
        }
    }
    let renamed = |n: &str| renames.get(n).cloned().unwrap_or_else(|| n.to_string());

    for input in &patch.input_schema {
        let Some(target) = splice.inputs.get(&input.id) else { continue };
        for consumer in &input.consumers {
            if let Some(node) = inserted.node_mut(&renamed(consumer)) {
                rewrite_refs(
                    node,
                    None,
                    (&input.producer, &input.output),
                    (&target.node, &target.output),
                );
            }
        }
    }

    for node in &mut inserted.nodes {
        for input in &mut node.inputs {
            if let InputSource::LiteralFile { path } = &mut input.source {
                let Some(file) = patch.payload.get(path.as_str()) else { continue };
                let local_ok = canon::digest_file(&g.literal_path(path)).is_ok_and(|d| d == file.digest);
                if !local_ok {
                    if let Some(p) = patch.payload_path(path) {
                        *path = std::fs::canonicalize(&p).unwrap_or(p).to_string_lossy().into_owned();
                    }
                }
            }
        }
    }

    let mut nodes = retained;
    for s in &splice.outputs {
        if let Some(node) = nodes.iter_mut().find(|n| n.name == s.consumer) {
            let target = renamed(&s.patch_node);
            rewrite_refs(
                node,
                Some(&s.slot),
                (&s.removed_node, &s.removed_output),
                (&target, &s.patch_output),
            );
        }
    }

    let anchor = g
        .nodes
        .iter()
        .position(|n| splice.removal.contains(&n.name))
        .map(|pos| {
            g.nodes[..pos]
                .iter()
                .filter(|n| !splice.removal.contains(&n.name))
                .count()
        })
        .unwrap_or(nodes.len());
    let tail = nodes.split_off(anchor);
    nodes.extend(inserted.nodes);
    nodes.extend(tail);

    for instr in &patch.instructions {
        if let Instruction::Modify {
            node,
            arguments,
            environment,
        } = instr
        {
            if let Some(n) = nodes.iter_mut().find(|n| n.name == renamed(node)) {
                if let Some(args) = arguments {
                    n.command.arguments = args.clone();
                }
                n.command
                    .environment
                    .extend(environment.iter().map(|(k, v)| (k.clone(), v.clone())));
            }
        }
    }

    let mut parameters = g.parameters.clone();
    for (k, v) in &patch.graph.parameters {
        parameters.entry(k.clone()).or_insert_with(|| v.clone());
    }
    let out = WorkflowDescription {
        name: g.name.clone(),
        parameters,
        nodes,
        metadata: g.metadata.clone(),
        base_dir: g.base_dir.clone(),
    };
    validate(&out).map_err(SubstitutionError::Invalid)?;
    Ok((out, conflicts))
}
