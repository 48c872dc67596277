//! Quotient-graph factoring by shared leaf membership.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::canon;
use crate::equivalence::{DescriptorSet, SubGraph};
use crate::model::{token, InputBinding, InputSource, Segment, WorkflowDescription};

/// node → leaves reachable from it.
pub type LeafSignatures = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub id: String,
    pub members: BTreeSet<String>,
    pub inputs: DescriptorSet,
    pub outputs: DescriptorSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QuotientGraph {
    pub blocks: Vec<String>,
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryInput {
    pub node: String,
    pub binding: String,
    pub producer: String,
    pub output: String,
    pub path: String,
    pub descriptor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryOutput {
    pub node: String,
    pub output: String,
    pub path: String,
    pub descriptor: String,
    pub consumers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySchema {
    pub block: String,
    pub inputs: Vec<BoundaryInput>,
    pub outputs: Vec<BoundaryOutput>,
}

pub fn block_id(members: &BTreeSet<String>) -> String {
    let mut d = canon::digest_of(members);
    d.truncate(16);
    d
}

pub fn leaf_signatures(wf: &WorkflowDescription) -> LeafSignatures {
    let (_, succs) = wf.adjacency();
    let order = wf.topo_order().expect("validated workflows are acyclic");
    let mut sig: Vec<BTreeSet<String>> = vec![BTreeSet::new(); wf.nodes.len()];
    for &i in order.iter().rev() {
        if succs[i].is_empty() {
            sig[i].insert(wf.nodes[i].name.clone());
        } else {
            let mut acc = BTreeSet::new();
            for &s in &succs[i] {
                acc.extend(sig[s].iter().cloned());
            }
            sig[i] = acc;
        }
    }
    wf.nodes
        .iter()
        .map(|n| n.name.clone())
        .zip(sig)
        .collect()
}

pub fn block_of(wf: &WorkflowDescription, members: BTreeSet<String>) -> Block {
    let sub = SubGraph {
        wf,
        members: members.clone(),
    };
    Block {
        id: block_id(&members),
        inputs: sub.domain(),
        outputs: sub.codomain(),
        members,
    }
}

fn quotient(wf: &WorkflowDescription, blocks: &[Block]) -> QuotientGraph {
    let owner: BTreeMap<&str, &str> = blocks
        .iter()
        .flat_map(|b| b.members.iter().map(move |m| (m.as_str(), b.id.as_str())))
        .collect();
    let mut edges = BTreeSet::new();
    for node in &wf.nodes {
        for p in node.producers() {
            let (from, to) = (owner[p], owner[node.name.as_str()]);
            if from != to {
                edges.insert((from.to_string(), to.to_string()));
            }
        }
    }
    QuotientGraph {
        blocks: blocks.iter().map(|b| b.id.clone()).collect(),
        edges: edges.into_iter().collect(),
    }
}

fn ordered(wf: &WorkflowDescription, groups: Vec<BTreeSet<String>>) -> Vec<Block> {
    let order = wf.topo_order().expect("validated workflows are acyclic");
    let rank: BTreeMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(r, &i)| (wf.nodes[i].name.as_str(), r))
        .collect();
    let mut groups = groups;
    groups.sort_by_key(|g| g.iter().map(|m| rank[m.as_str()]).min());
    groups.into_iter().map(|g| block_of(wf, g)).collect()
}

/// Nodes share a block iff their leaf signatures are equal.
pub fn factor(wf: &WorkflowDescription) -> (Vec<Block>, QuotientGraph) {
    let mut by_sig: BTreeMap<BTreeSet<String>, BTreeSet<String>> = BTreeMap::new();
    for (node, sig) in leaf_signatures(wf) {
        by_sig.entry(sig).or_default().insert(node);
    }
    let blocks = ordered(wf, by_sig.into_values().collect());
    let q = quotient(wf, &blocks);
    (blocks, q)
}

/// Factoring blocks with every single-node leaf block folded into the block of
/// its producers, when those producers all sit in one block.
pub fn units(wf: &WorkflowDescription) -> (Vec<Block>, QuotientGraph) {
    let (blocks, _) = factor(wf);
    let (_, succs) = wf.adjacency();
    let idx = wf.index();
    let owner: BTreeMap<&str, usize> = blocks
        .iter()
        .enumerate()
        .flat_map(|(b, blk)| blk.members.iter().map(move |m| (m.as_str(), b)))
        .collect();
    let mut groups: Vec<BTreeSet<String>> = blocks.iter().map(|b| b.members.clone()).collect();
    let mut absorbed = vec![false; blocks.len()];
    for (b, blk) in blocks.iter().enumerate() {
        if blk.members.len() != 1 {
            continue;
        }
        let name = blk.members.iter().next().unwrap();
        let node = wf.node(name).unwrap();
        if !succs[idx[name.as_str()]].is_empty() {
            continue;
        }
        let hosts: BTreeSet<usize> = node.producers().iter().map(|p| owner[p]).collect();
        if hosts.len() == 1 {
            let host = *hosts.iter().next().unwrap();
            if !absorbed[host] && host != b {
                groups[host].insert(name.clone());
                absorbed[b] = true;
            }
        }
    }
    let groups = groups
        .into_iter()
        .zip(absorbed)
        .filter(|(_, a)| !a)
        .map(|(g, _)| g)
        .collect();
    let units = ordered(wf, groups);
    let q = quotient(wf, &units);
    (units, q)
}

/// Path a lifted boundary input is read from, relative to the block workflow.
pub fn lifted_path(producer: &str, output_path: &str) -> String {
    format!("inputs/{producer}/{output_path}")
}

/// The block as a standalone workflow. References that leave the block become
/// literal-file inputs, recorded in the returned schema.
pub fn extract_block_workflow(
    wf: &WorkflowDescription,
    block: &Block,
) -> (WorkflowDescription, BoundarySchema) {
    let members = &block.members;
    let out_path = |n: &str, o: &str| {
        wf.node(n)
            .and_then(|x| x.output(o))
            .map(|x| x.path.clone())
            .unwrap_or_else(|| o.to_string())
    };
    let mut inputs = Vec::new();
    let mut nodes = Vec::new();
    for node in wf.nodes.iter().filter(|n| members.contains(&n.name)) {
        let mut node = node.clone();
        for input in &mut node.inputs {
            if let InputSource::Reference { node: p, output } = &input.source {
                if !members.contains(p) {
                    let path = out_path(p, output);
                    inputs.push(BoundaryInput {
                        node: node.name.clone(),
                        binding: input.name.clone(),
                        producer: p.clone(),
                        output: output.clone(),
                        descriptor: crate::equivalence::descriptor(&path),
                        path: lifted_path(p, &path),
                    });
                    input.source = InputSource::LiteralFile {
                        path: lifted_path(p, &path),
                    };
                }
            }
        }
        let mut extra: Vec<InputBinding> = Vec::new();
        for arg in &mut node.command.arguments {
            let rewritten = token::rewrite::<()>(arg, |seg| match seg {
                Segment::Ref { node: p, output } if !members.contains(*p) => {
                    let path = out_path(p, output);
                    let lifted = InputSource::LiteralFile {
                        path: lifted_path(p, &path),
                    };
                    let exists = node.inputs.iter().chain(&extra).any(|i| i.name == path);
                    if !exists {
                        extra.push(InputBinding {
                            name: path.clone(),
                            source: lifted.clone(),
                        });
                        inputs.push(BoundaryInput {
                            node: node.name.clone(),
                            binding: path.clone(),
                            producer: p.to_string(),
                            output: output.to_string(),
                            descriptor: crate::equivalence::descriptor(&path),
                            path: lifted_path(p, &path),
                        });
                    }
                    Ok(Some(path))
                }
                _ => Ok(None),
            });
            if let Ok(r) = rewritten {
                *arg = r;
            }
        }
        node.inputs.extend(extra);
        nodes.push(node);
    }

    let mut outputs = Vec::new();
    for node in wf.nodes.iter().filter(|n| members.contains(&n.name)) {
        for o in &node.outputs {
            let consumers: Vec<String> = wf
                .nodes
                .iter()
                .filter(|c| !members.contains(&c.name))
                .filter(|c| {
                    c.references()
                        .iter()
                        .any(|(_, p, out)| *p == node.name && *out == o.name)
                })
                .map(|c| c.name.clone())
                .collect();
            outputs.push(BoundaryOutput {
                node: node.name.clone(),
                output: o.name.clone(),
                path: o.path.clone(),
                descriptor: crate::equivalence::descriptor(&o.path),
                consumers,
            });
        }
    }

    let mut metadata = wf.metadata.clone();
    metadata.insert("extracted-from".into(), wf.name.clone());
    metadata.insert("block".into(), block.id.clone());
    let out = WorkflowDescription {
        name: format!("{}.{}", wf.name, block.id),
        parameters: wf.parameters.clone(),
        nodes,
        metadata,
        base_dir: wf.base_dir.clone(),
    };
    (
        out,
        BoundarySchema {
            block: block.id.clone(),
            inputs,
            outputs,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_workflow, validate};
    use serde_json::json;

    fn wf(edges: &[(&str, &str)], nodes: &[&str]) -> WorkflowDescription {
        let nodes: Vec<_> = nodes
            .iter()
            .map(|n| {
                let refs: Vec<_> = edges
                    .iter()
                    .filter(|(_, c)| c == n)
                    .map(|(p, _)| json!({"name": format!("{p}.out"), "source": {"kind": "reference", "node": p, "output": "out"}}))
                    .collect();
                json!({"name": n, "command": {"executable": n}, "inputs": refs,
                       "outputs": [{"name": "out", "path": format!("{n}.out")}]})
            })
            .collect();
        parse_workflow(&json!({"name": "t", "nodes": nodes}).to_string()).unwrap()
    }

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn chain_has_one_leaf() {
        let w = wf(&[("A", "B"), ("B", "C")], &["A", "B", "C"]);
        let s = leaf_signatures(&w);
        assert!(s.values().all(|v| *v == set(&["C"])));
        assert_eq!(factor(&w).0.len(), 1);
    }

    #[test]
    fn fork_signatures() {
        let w = wf(&[("A", "B"), ("A", "C")], &["A", "B", "C"]);
        let s = leaf_signatures(&w);
        assert_eq!(s["A"], set(&["B", "C"]));
        assert_eq!(s["B"], set(&["B"]));
        assert_eq!(s["C"], set(&["C"]));
        assert_eq!(factor(&w).0.len(), 3);
    }

    #[test]
    fn diamond_single_block() {
        let w = wf(&[("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")], &["A", "B", "C", "D"]);
        assert!(leaf_signatures(&w).values().all(|v| *v == set(&["D"])));
        let (blocks, q) = factor(&w);
        assert_eq!(blocks.len(), 1);
        assert!(q.edges.is_empty());
    }

    #[test]
    fn two_stage_with_per_stage_leaves() {
        // x1 -> x2 -> xA (leaf), x2 -> y1 -> y2 (leaf)
        let w = wf(
            &[("x1", "x2"), ("x2", "xA"), ("x2", "y1"), ("y1", "y2")],
            &["x1", "x2", "xA", "y1", "y2"],
        );
        let (blocks, q) = factor(&w);
        let parts: Vec<_> = blocks.iter().map(|b| b.members.clone()).collect();
        assert_eq!(parts, vec![set(&["x1", "x2"]), set(&["xA"]), set(&["y1", "y2"])]);
        assert_eq!(q.edges.len(), 2);
        let (u, uq) = units(&w);
        let parts: Vec<_> = u.iter().map(|b| b.members.clone()).collect();
        assert_eq!(parts, vec![set(&["x1", "x2", "xA"]), set(&["y1", "y2"])]);
        assert_eq!(uq.edges, vec![(u[0].id.clone(), u[1].id.clone())]);
    }

    #[test]
    fn block_ids_ignore_order() {
        let a = wf(&[("A", "B")], &["A", "B"]);
        let b = wf(&[("A", "B")], &["B", "A"]);
        assert_eq!(factor(&a).0, factor(&b).0);
        assert_eq!(factor(&a).0[0].id.len(), 16);
    }

    #[test]
    fn extract_downstream_block() {
        let w = wf(
            &[("x1", "x2"), ("x2", "xA"), ("x2", "y1"), ("y1", "y2")],
            &["x1", "x2", "xA", "y1", "y2"],
        );
        let (u, _) = units(&w);
        let (bw, schema) = extract_block_workflow(&w, &u[1]);
        validate(&bw).unwrap();
        assert_eq!(bw.nodes.len(), 2);
        assert_eq!(schema.inputs.len(), 1);
        assert_eq!(schema.inputs[0].producer, "x2");
        assert_eq!(schema.inputs[0].descriptor, "x2.out");
        let up = extract_block_workflow(&w, &u[0]).1;
        let exported: Vec<_> = up.outputs.iter().filter(|o| !o.consumers.is_empty()).collect();
        assert_eq!(exported.len(), 1);
        assert_eq!(exported[0].consumers, vec!["y1".to_string()]);
    }

    #[test]
    fn whole_workflow_block_is_identity() {
        let w = wf(&[("A", "B")], &["A", "B"]);
        let (blocks, _) = factor(&w);
        let (bw, schema) = extract_block_workflow(&w, &blocks[0]);
        assert_eq!(bw.nodes, w.nodes);
        assert!(schema.inputs.is_empty());
    }

    #[test]
    fn argument_refs_are_lifted() {
        let w = parse_workflow(
            &json!({"name": "a", "nodes": [
                {"name": "p", "command": {"executable": "p"}, "outputs": [{"name": "o", "path": "o.dat"}]},
                {"name": "q", "command": {"executable": "q"}},
                {"name": "c", "command": {"executable": "c", "arguments": ["--in={{ref:p/o}}"]}},
            ]})
            .to_string(),
        )
        .unwrap();
        let block = block_of(&w, set(&["c"]));
        let (bw, schema) = extract_block_workflow(&w, &block);
        validate(&bw).unwrap();
        assert_eq!(bw.nodes[0].command.arguments[0], "--in=o.dat");
        assert_eq!(bw.nodes[0].inputs[0].name, "o.dat");
        assert_eq!(schema.inputs.len(), 1);
    }
}
