use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{EdgeKind, EdgeStatus, Kb, KbEdge, KbError, KbNodeEntry, Representation, Scope, SourceRef, Triple};
use crate::canon;
use crate::equivalence::{
    composability, interface_hashes, jaccard, multiset_jaccard, DescriptorSet, Direction, Endpoint,
    KnownRelations, LabelMode, Metric, SubGraph, WlConfig,
};
use crate::factoring::{units, Block};
use crate::model::WorkflowDescription;
use crate::par::{par_map, Parallelism};

/// Hypothesized producer-consumer weights stay strictly below a known edge's 1.0.
pub const HYPOTHESIS_CEILING: f64 = 1.0 - 1e-9;

pub const DECLARED: &str = "declared";
pub const COMPOSABILITY: &str = "jaccard-composability";

#[derive(Debug, Clone, Serialize)]
pub struct RegisteredWorkflow {
    pub workflow: String,
    pub units: Vec<(Block, String)>,
    pub workflow_entry: Option<String>,
}

pub fn workflow_digest(wf: &WorkflowDescription) -> String {
    canon::digest_of(wf)
}

impl Kb {
    pub fn representation(&self, sub: &SubGraph<'_>) -> Result<Representation, KbError> {
        Ok(Representation::of(sub, self.manifest.config.wl_iterations)?)
    }

    /// Registers each factoring unit of `wf`, the whole workflow when it has
    /// more than one unit, known producer-consumer edges along the unit
    /// quotient, and sub-graph-of edges.
    pub fn register_workflow(
        &mut self,
        wf: &WorkflowDescription,
        literal_digests: Option<&BTreeMap<String, String>>,
    ) -> Result<RegisteredWorkflow, KbError> {
        let instance = match literal_digests {
            Some(l) => Some(interface_hashes(wf, l, Parallelism::Sequential)?),
            None => None,
        };
        let wf_digest = workflow_digest(wf);
        self.put_bytes(canon::canonical_string(wf).into_bytes())?;
        let base_dir = wf
            .base_dir
            .as_ref()
            .map(|d| std::fs::canonicalize(d).unwrap_or_else(|_| d.clone()).to_string_lossy().into_owned());
        let source = |members: &BTreeSet<String>| SourceRef {
            workflow: wf.name.clone(),
            workflow_digest: wf_digest.clone(),
            nodes: members.clone(),
            instance_hashes: instance
                .as_ref()
                .map(|h| {
                    members
                        .iter()
                        .filter_map(|m| h.get(m).map(|x| (m.clone(), x.digest.clone())))
                        .collect()
                })
                .unwrap_or_default(),
            base_dir: base_dir.clone(),
        };
        let (blocks, quotient) = units(wf);
        let mut ids: BTreeMap<String, String> = BTreeMap::new();
        let mut out = Vec::new();
        for block in blocks {
            let sub = SubGraph {
                wf,
                members: block.members.clone(),
            };
            let rep = self.representation(&sub)?;
            let id = self.register_subgraph(KbNodeEntry::new(rep, Scope::Unit, source(&block.members)))?;
            ids.insert(block.id.clone(), id.clone());
            out.push((block, id));
        }
        for (from, to) in &quotient.edges {
            let (a, b) = (&ids[from], &ids[to]);
            if a != b {
                self.upsert_edge(KbEdge::producer_consumer(a, b, 1.0, EdgeStatus::Known, DECLARED))?;
            }
        }
        let mut workflow_entry = None;
        if out.len() > 1 {
            let whole = SubGraph::whole(wf);
            let rep = self.representation(&whole)?;
            let wid = self.register_subgraph(KbNodeEntry::new(rep, Scope::Workflow, source(&whole.members)))?;
            for (_, id) in &out {
                self.upsert_edge(KbEdge::subgraph_of(id, &wid))?;
            }
            workflow_entry = Some(wid);
        }
        Ok(RegisteredWorkflow {
            workflow: wf.name.clone(),
            units: out,
            workflow_entry,
        })
    }

    /// The registered description a source was taken from.
    pub fn source_workflow(&self, source: &SourceRef) -> Result<WorkflowDescription, KbError> {
        let bytes = self.read_blob(&source.workflow_digest)?;
        let text = String::from_utf8(bytes).map_err(|e| KbError::Corrupt {
            file: source.workflow_digest.clone(),
            detail: e.to_string(),
        })?;
        let mut wf = crate::model::parse_workflow(&text).map_err(|e| KbError::Corrupt {
            file: source.workflow_digest.clone(),
            detail: e.to_string(),
        })?;
        wf.base_dir = source.base_dir.as_ref().map(std::path::PathBuf::from);
        Ok(wf)
    }

    fn endpoint<'a>(&'a self, id: &'a str) -> Option<Endpoint<'a>> {
        self.entry(id).map(|e| Endpoint {
            id: &e.id,
            domain: &e.representation.domain,
            codomain: &e.representation.codomain,
        })
    }

    /// max(upstream, downstream) composability of `a` feeding `b`.
    pub fn composability_score(&self, a: &str, b: &str) -> f64 {
        match (self.endpoint(a), self.endpoint(b)) {
            (Some(ea), Some(eb)) => composability(ea, eb, Direction::Upstream, self)
                .value
                .max(composability(ea, eb, Direction::Downstream, self).value),
            _ => 0.0,
        }
    }

    pub fn has_known_edge(&self, from: &str, to: &str) -> bool {
        self.state.edges.contains_key(&(
            EdgeKind::ProducerConsumer,
            from.to_string(),
            to.to_string(),
            DECLARED.to_string(),
        ))
    }

    /// Pairwise equivalence edges (one per WL label mode) above the floor, and
    /// hypothesized producer-consumer edges where composability exceeds the
    /// threshold. Returns the number of edges written.
    pub fn compute_edges(&mut self, subset: Option<&[String]>, mode: Parallelism) -> Result<usize, KbError> {
        let mut ids: Vec<String> = match subset {
            Some(s) => {
                if let Some(bad) = s.iter().find(|i| self.entry(i).is_none()) {
                    return Err(KbError::UnknownEntry(bad.clone()));
                }
                s.to_vec()
            }
            None => self.state.entries.keys().cloned().collect(),
        };
        ids.sort();
        ids.dedup();
        let pairs: Vec<(usize, usize)> = (0..ids.len())
            .flat_map(|i| (i + 1..ids.len()).map(move |j| (i, j)))
            .collect();
        let iterations = self.manifest.config.wl_iterations;
        let floor = self.manifest.config.edge_floor;
        let threshold = self.manifest.config.hypothesis_threshold;

        let equivalences: Vec<Vec<KbEdge>> = par_map(&pairs, mode, |&(i, j)| {
            let a = &self.state.entries[&ids[i]].representation;
            let b = &self.state.entries[&ids[j]].representation;
            let d = jaccard(&a.domain, &b.domain);
            let c = jaccard(&a.codomain, &b.codomain);
            [LabelMode::Name, LabelMode::Command]
                .into_iter()
                .filter_map(|m| {
                    let f = multiset_jaccard(&a.wl[&m].multiset, &b.wl[&m].multiset);
                    let t = Triple { d, c, f };
                    let tag = WlConfig { iterations, mode: m }.metric_tag();
                    (t.max() >= floor).then(|| KbEdge::equivalence(&ids[i], &ids[j], &tag, t))
                })
                .collect()
        });

        let ordered: Vec<(usize, usize)> = (0..ids.len())
            .flat_map(|i| (0..ids.len()).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        let hypotheses: Vec<Option<KbEdge>> = par_map(&ordered, mode, |&(i, j)| {
            let (a, b) = (&ids[i], &ids[j]);
            if self.has_known_edge(a, b) {
                return None;
            }
            let w = self.composability_score(a, b);
            (w > threshold).then(|| {
                KbEdge::producer_consumer(a, b, w.min(HYPOTHESIS_CEILING), EdgeStatus::Hypothesized, COMPOSABILITY)
            })
        });

        let mut written = 0;
        for e in equivalences.into_iter().flatten().chain(hypotheses.into_iter().flatten()) {
            if self.upsert_edge(e)? {
                written += 1;
            }
        }
        Ok(written)
    }

    /// The stored (d, c, f) triple between two entries under a WL label mode.
    pub fn equivalence(&self, a: &str, b: &str, mode: LabelMode) -> Option<Triple> {
        if a == b {
            return self.entry(a).map(|_| Triple { d: 1.0, c: 1.0, f: 1.0 });
        }
        let (from, to) = if a <= b { (a, b) } else { (b, a) };
        let tag = WlConfig {
            iterations: self.manifest.config.wl_iterations,
            mode,
        }
        .metric_tag();
        self.state
            .edges
            .get(&(EdgeKind::Equivalence, from.to_string(), to.to_string(), tag))
            .and_then(|e| e.triple)
    }

    /// Entries at or above `threshold` under `metric`, best first, ties by id.
    pub fn find_equivalents(
        &self,
        id: &str,
        metric: Metric,
        threshold: f64,
        mode: LabelMode,
        include_self: bool,
    ) -> Result<Vec<(String, f64)>, KbError> {
        if self.entry(id).is_none() {
            return Err(KbError::UnknownEntry(id.to_string()));
        }
        let tag = WlConfig {
            iterations: self.manifest.config.wl_iterations,
            mode,
        }
        .metric_tag();
        let mut out: Vec<(String, f64)> = Vec::new();
        if include_self && threshold <= 1.0 {
            out.push((id.to_string(), 1.0));
        }
        for e in self.state.edges.values() {
            if e.kind != EdgeKind::Equivalence || e.metric != tag {
                continue;
            }
            let other = if e.from == id {
                &e.to
            } else if e.to == id {
                &e.from
            } else {
                continue;
            };
            let t = e.triple.expect("equivalence edges carry a triple");
            let score = match metric {
                Metric::Domain => t.d,
                Metric::Codomain => t.c,
                Metric::Function => t.f,
            };
            if score >= threshold {
                out.push((other.clone(), score));
            }
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(out)
    }

    fn known_neighbours(&self, id: &str, incoming: bool) -> Vec<&KbNodeEntry> {
        self.state
            .edges
            .values()
            .filter(|e| e.kind == EdgeKind::ProducerConsumer && e.status == Some(EdgeStatus::Known))
            .filter_map(|e| {
                let (this, other) = if incoming { (&e.to, &e.from) } else { (&e.from, &e.to) };
                (this == id).then(|| self.entry(other)).flatten()
            })
            .collect()
    }
}

impl KnownRelations for Kb {
    fn producer_codomains(&self, consumer: &str) -> Vec<DescriptorSet> {
        self.known_neighbours(consumer, true)
            .into_iter()
            .map(|e| e.representation.codomain.clone())
            .collect()
    }

    fn consumer_domains(&self, producer: &str) -> Vec<DescriptorSet> {
        self.known_neighbours(producer, false)
            .into_iter()
            .map(|e| e.representation.domain.clone())
            .collect()
    }
}
