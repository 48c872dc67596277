use std::collections::{BTreeMap, BTreeSet};

use crate::canon;
use crate::model::{abstract_view, EdgeSlot, WorkflowDescription};

type Edge = (usize, String, usize, EdgeSlot);

fn labelled(wf: &WorkflowDescription) -> Option<(Vec<String>, BTreeSet<Edge>)> {
    let idx = wf.index();
    let mut labels = Vec::with_capacity(wf.nodes.len());
    for n in &wf.nodes {
        let view = abstract_view(wf, &n.name).ok()?;
        labels.push(canon::canonical_string(&view));
    }
    let mut edges = BTreeSet::new();
    for (ci, n) in wf.nodes.iter().enumerate() {
        for (slot, target, output) in n.references() {
            let pi = *idx.get(target)?;
            let path = wf.nodes[pi].output(output)?.path.clone();
            edges.insert((pi, path, ci, slot));
        }
    }
    Some((labels, edges))
}

/// Label-preserving graph isomorphism. Node labels are the abstract views, so
/// node names do not matter; edges carry the output path and consumer slot.
pub fn isomorphic(a: &WorkflowDescription, b: &WorkflowDescription) -> bool {
    if a.nodes.len() != b.nodes.len() {
        return false;
    }
    let (Some((la, ea)), Some((lb, eb))) = (labelled(a), labelled(b)) else {
        return false;
    };
    if ea.len() != eb.len() {
        return false;
    }
    let mut count: BTreeMap<&str, isize> = BTreeMap::new();
    for l in &la {
        *count.entry(l).or_default() += 1;
    }
    for l in &lb {
        *count.entry(l).or_default() -= 1;
    }
    if count.values().any(|&c| c != 0) {
        return false;
    }

    let n = la.len();
    let mut adj_a: Vec<Vec<&Edge>> = vec![Vec::new(); n];
    for e in &ea {
        adj_a[e.0].push(e);
        if e.2 != e.0 {
            adj_a[e.2].push(e);
        }
    }
    let degree = |edges: &BTreeSet<Edge>| {
        let mut d = vec![(0usize, 0usize); n];
        for e in edges {
            d[e.0].1 += 1;
            d[e.2].0 += 1;
        }
        d
    };
    let (da, db) = (degree(&ea), degree(&eb));

    let mut map: Vec<Option<usize>> = vec![None; n];
    let mut used = vec![false; n];
    search(0, &la, &lb, &da, &db, &adj_a, &eb, &mut map, &mut used)
}

#[allow(clippy::too_many_arguments)]
fn search(
    i: usize,
    la: &[String],
    lb: &[String],
    da: &[(usize, usize)],
    db: &[(usize, usize)],
    adj_a: &[Vec<&Edge>],
    eb: &BTreeSet<Edge>,
    map: &mut Vec<Option<usize>>,
    used: &mut Vec<bool>,
) -> bool {
    if i == la.len() {
        return true;
    }
    for j in 0..lb.len() {
        if used[j] || lb[j] != la[i] || db[j] != da[i] {
            continue;
        }
        map[i] = Some(j);
        let consistent = adj_a[i].iter().all(|(p, path, c, slot)| {
            match (map[*p], map[*c]) {
                (Some(mp), Some(mc)) => eb.contains(&(mp, path.clone(), mc, slot.clone())),
                _ => true,
            }
        });
        if consistent {
            used[j] = true;
            if search(i + 1, la, lb, da, db, adj_a, eb, map, used) {
                return true;
            }
            used[j] = false;
        }
        map[i] = None;
    }
    false
}
