use std::collections::{BTreeMap, BTreeSet};

use super::{Conflict, ConflictKind, InputSplice, OutputSplice, Patch, SpliceMap};
use crate::equivalence::{descriptor, jaccard, DescriptorSet, SubGraph};
use crate::model::{EdgeSlot, WorkflowDescription};

fn codomain_of(wf: &WorkflowDescription, node: &str) -> DescriptorSet {
    wf.node(node).map_or_else(DescriptorSet::default, |n| {
        DescriptorSet::from_paths(n.outputs.iter().map(|o| o.path.as_str()))
    })
}

fn reachable(wf: &WorkflowDescription, from: &BTreeSet<String>, forward: bool) -> BTreeSet<String> {
    let (preds, succs) = wf.adjacency();
    let idx = wf.index();
    let next = if forward { &succs } else { &preds };
    let mut seen = BTreeSet::new();
    let mut stack: Vec<usize> = from.iter().filter_map(|n| idx.get(n.as_str()).copied()).collect();
    while let Some(i) = stack.pop() {
        for &j in &next[i] {
            if seen.insert(wf.nodes[j].name.clone()) {
                stack.push(j);
            }
        }
    }
    seen
}

fn slot_text(slot: &EdgeSlot) -> String {
    match slot {
        EdgeSlot::Binding { name } => format!("input `{name}`"),
        EdgeSlot::Argument { index } => format!("argument {index}"),
    }
}

/// Finds where `patch` attaches to `g`. Inputs are matched against G nodes by
/// single-node co-domain similarity to the original producer; retained nodes
/// reading removed outputs are matched to patch outputs by descriptor, then by
/// domain similarity. Ties are conflicts unless `force` is set, in which case
/// the first candidate by name is taken and a warning recorded.
pub fn identify_splice_points(
    g: &WorkflowDescription,
    patch: &Patch,
    threshold: f64,
    force: bool,
) -> SpliceMap {
    let mut map = SpliceMap::default();
    let directed: BTreeSet<String> = patch
        .removals()
        .into_iter()
        .filter(|n| g.node(n).is_some())
        .map(str::to_string)
        .collect();

    for input in &patch.input_schema {
        let mut scored: Vec<(f64, &str, &str)> = g
            .nodes
            .iter()
            .filter(|n| !directed.contains(&n.name))
            .filter_map(|n| {
                let out = n.outputs.iter().find(|o| descriptor(&o.path) == input.descriptor)?;
                let score = jaccard(&codomain_of(g, &n.name), &input.producer_codomain);
                (score >= threshold).then_some((score, n.name.as_str(), out.name.as_str()))
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        match scored.as_slice() {
            [] => map.conflicts.push(Conflict {
                kind: ConflictKind::UnmappedInput,
                locus: input.id.clone(),
                detail: format!("no node of the target exports `{}` at similarity >= {threshold}", input.descriptor),
            }),
            [first, second, ..] if first.0 == second.0 && !force => map.conflicts.push(Conflict {
                kind: ConflictKind::AmbiguousSplice,
                locus: input.id.clone(),
                detail: format!(
                    "`{}` and `{}` both export `{}` at similarity {:.4}",
                    first.1, second.1, input.descriptor, first.0
                ),
            }),
            [first, rest @ ..] => {
                if rest.first().is_some_and(|s| s.0 == first.0) {
                    map.warnings.push(format!(
                        "forced splice of `{}` onto `{}` among tied candidates",
                        input.id, first.1
                    ));
                }
                map.inputs.insert(
                    input.id.clone(),
                    InputSplice {
                        node: first.1.to_string(),
                        output: first.2.to_string(),
                        score: first.0,
                    },
                );
            }
        }
    }

    let provided: BTreeSet<String> = patch
        .graph
        .nodes
        .iter()
        .flat_map(|n| n.outputs.iter().map(|o| descriptor(&o.path)))
        .collect();
    map.removal = if !directed.is_empty() || patch.input_schema.is_empty() {
        directed
    } else {
        // no directive names a node of G: remove what lies between the splice points
        let sources: BTreeSet<String> = map.inputs.values().map(|s| s.node.clone()).collect();
        let below = reachable(g, &sources, true);
        let consumers: BTreeSet<String> = g
            .nodes
            .iter()
            .filter(|n| below.contains(&n.name) && !sources.contains(&n.name))
            .filter(|n| {
                n.references().iter().any(|(_, p, o)| {
                    let path = g.node(p).and_then(|x| x.output(o)).map_or(*o, |x| x.path.as_str());
                    provided.contains(&descriptor(path)) && !sources.contains(*p)
                })
            })
            .map(|n| n.name.clone())
            .collect();
        let above = reachable(g, &consumers, false);
        let mut spanned: BTreeSet<String> = below.intersection(&above).cloned().collect();
        // a node is only removed if some consumer actually reads from the span
        spanned.retain(|n| !sources.contains(n) && !consumers.contains(n));
        spanned
    };

    let mut spliced_to: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for node in g.nodes.iter().filter(|n| !map.removal.contains(&n.name)) {
        for (slot, producer, output) in node.references() {
            if !map.removal.contains(producer) {
                continue;
            }
            let path = g
                .node(producer)
                .and_then(|p| p.output(output))
                .map_or(output, |o| o.path.as_str());
            let d = descriptor(path);
            let locus = format!("{}:{}", node.name, slot_text(&slot));
            if patch.graph.nodes.is_empty() {
                map.conflicts.push(Conflict {
                    kind: ConflictKind::DanglingConsumer,
                    locus,
                    detail: format!("reads `{d}` from removed `{producer}` and the patch inserts nothing"),
                });
                continue;
            }
            let consumer_domain = SubGraph::new(g, [node.name.as_str()]).expect("known node").domain();
            let mut candidates: Vec<(f64, String, String)> = Vec::new();
            for pn in &patch.graph.nodes {
                for o in pn.outputs.iter().filter(|o| descriptor(&o.path) == d) {
                    let score = patch
                        .output_schema
                        .iter()
                        .filter(|s| s.node == pn.name && s.output == o.name)
                        .flat_map(|s| s.consumer_domains.iter())
                        .map(|dom| jaccard(&consumer_domain, dom))
                        .fold(0.0, f64::max);
                    candidates.push((score, pn.name.clone(), o.name.clone()));
                }
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            match candidates.as_slice() {
                [] => map.conflicts.push(Conflict {
                    kind: ConflictKind::ArgumentExpectation,
                    locus,
                    detail: format!("expects `{d}` from `{producer}`; the patch does not produce it"),
                }),
                [first, second, ..] if first.0 == second.0 && !force => map.conflicts.push(Conflict {
                    kind: ConflictKind::AmbiguousSplice,
                    locus,
                    detail: format!("patch nodes `{}` and `{}` both produce `{d}`", first.1, second.1),
                }),
                [first, rest @ ..] => {
                    if rest.first().is_some_and(|s| s.0 == first.0) {
                        map.warnings.push(format!("forced output splice of `{d}` onto `{}`", first.1));
                    }
                    spliced_to
                        .entry(node.name.clone())
                        .or_default()
                        .insert(first.1.clone());
                    map.outputs.push(OutputSplice {
                        consumer: node.name.clone(),
                        slot,
                        removed_node: producer.to_string(),
                        removed_output: output.to_string(),
                        patch_node: first.1.clone(),
                        patch_output: first.2.clone(),
                    });
                }
            }
        }
    }

    for (consumer, targets) in &spliced_to {
        let expected = g.node(consumer).expect("known node").expected_args();
        for e in expected {
            let honoured = patch
                .graph
                .nodes
                .iter()
                .filter(|n| targets.contains(&n.name))
                .any(|n| n.command.arguments.iter().any(|a| a.contains(&e)));
            if !honoured {
                map.conflicts.push(Conflict {
                    kind: ConflictKind::ArgumentExpectation,
                    locus: consumer.clone(),
                    detail: format!("expects its producer to be run with `{e}`"),
                });
            }
        }
    }
    map
}
