use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use super::{CostFunction, Objective, PlannedSubstitution, PolicyError, SubstitutionPlan};
use crate::equivalence::{interface_hashes, literal_digests, SubGraph};
use crate::factoring::units;
use crate::kb::Kb;
use crate::model::WorkflowDescription;
use crate::par::Parallelism;
use crate::substitution::{apply_patch, identify_splice_points, DEFAULT_THRESHOLD};

/// Applies each substitution in order. Splice points are recomputed against
/// the workflow as it stands before each step.
pub fn apply_plan(
    wf: &WorkflowDescription,
    plan: &SubstitutionPlan,
    force: bool,
) -> Result<WorkflowDescription, PolicyError> {
    if let Some(n) = plan.overlap() {
        return Err(PolicyError::Overlap(n));
    }
    let mut current = wf.clone();
    for s in &plan.substitutions {
        let splice = identify_splice_points(&current, &s.patch, DEFAULT_THRESHOLD, force);
        let (next, conflicts) = apply_patch(&current, &s.patch, &splice, force)?;
        if !conflicts.is_empty() && !force {
            return Err(PolicyError::Conflicts {
                target: s.target.iter().cloned().collect::<Vec<_>>().join(","),
                conflicts,
            });
        }
        current = next;
    }
    Ok(current)
}

/// Raw objective values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Costing {
    /// Predicted seconds, summed over blocks.
    pub runtime: f64,
    pub accuracy_risk: f64,
    pub monetary: f64,
    pub total: f64,
}

/// Prices plans against one workflow. Block wall time comes from execution
/// records of the exact node hashes when present, else from the mean over the
/// KB sources of the block's entry.
pub struct Evaluator<'a> {
    wf: &'a WorkflowDescription,
    kb: &'a Kb,
    cost: &'a CostFunction,
    times: HashMap<&'a str, (f64, usize)>,
    baseline: Option<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(wf: &'a WorkflowDescription, kb: &'a Kb, cost: &'a CostFunction) -> Result<Self, PolicyError> {
        cost.validate()?;
        let mut times: HashMap<&str, (f64, usize)> = HashMap::new();
        for r in kb.executions() {
            if r.succeeded() && !r.memoized {
                let t = times.entry(r.hash.as_str()).or_default();
                t.0 += r.wall_seconds;
                t.1 += 1;
            }
        }
        let mut ev = Evaluator {
            wf,
            kb,
            cost,
            times,
            baseline: None,
        };
        if ev.timed() {
            ev.baseline = Some(ev.workflow_time(wf)?);
        }
        Ok(ev)
    }

    fn timed(&self) -> bool {
        self.cost.runtime > 0.0 || self.cost.monetary > 0.0
    }

    fn node_time(&self, hash: &str) -> Option<f64> {
        self.times.get(hash).map(|(s, n)| s / *n as f64)
    }

    /// Mean over the entry's sources of the summed member times.
    pub fn entry_time(&self, id: &str) -> Option<f64> {
        let entry = self.kb.entry(id)?;
        let per_source: Vec<f64> = entry
            .sources
            .iter()
            .filter(|s| !s.instance_hashes.is_empty() && s.instance_hashes.len() == s.nodes.len())
            .filter_map(|s| s.instance_hashes.values().map(|h| self.node_time(h)).sum::<Option<f64>>())
            .collect();
        (!per_source.is_empty()).then(|| per_source.iter().sum::<f64>() / per_source.len() as f64)
    }

    pub fn block_time(
        &self,
        w: &WorkflowDescription,
        hashes: Option<&BTreeMap<String, String>>,
        members: &BTreeSet<String>,
    ) -> Result<f64, PolicyError> {
        if let Some(h) = hashes {
            let direct: Option<f64> = members
                .iter()
                .map(|m| h.get(m).and_then(|x| self.node_time(x)))
                .sum();
            if let Some(t) = direct {
                return Ok(t);
            }
        }
        let sub = SubGraph {
            wf: w,
            members: members.clone(),
        };
        let id = self.kb.representation(&sub)?.id();
        self.entry_time(&id).ok_or_else(|| PolicyError::NoData {
            objective: Objective::Runtime,
            locus: members.iter().cloned().collect::<Vec<_>>().join(","),
        })
    }

    /// Interface hashes of `w`, when its literal inputs are readable.
    pub fn hashes(&self, w: &WorkflowDescription) -> Option<BTreeMap<String, String>> {
        literal_digests(w, Parallelism::Sequential)
            .ok()
            .and_then(|l| interface_hashes(w, &l, Parallelism::Sequential).ok())
            .map(|h| h.into_iter().map(|(k, v)| (k, v.digest)).collect())
    }

    /// Sum of block times over the factoring units of `w`.
    pub fn workflow_time(&self, w: &WorkflowDescription) -> Result<f64, PolicyError> {
        let hashes = self.hashes(w);
        units(w)
            .0
            .iter()
            .map(|u| self.block_time(w, hashes.as_ref(), &u.members))
            .sum()
    }

    pub fn baseline_time(&self) -> Option<f64> {
        self.baseline
    }

    pub fn risk(&self, s: &PlannedSubstitution) -> Result<f64, PolicyError> {
        let measured = s.sample_key().and_then(|k| self.kb.accuracy_stats(k).mean);
        measured.or(self.cost.risk_default).ok_or_else(|| PolicyError::NoData {
            objective: Objective::AccuracyRisk,
            locus: s.sample_key().unwrap_or("substitution").to_string(),
        })
    }

    pub fn costing(&self, plan: &SubstitutionPlan) -> Result<Costing, PolicyError> {
        let c = self.cost;
        let (runtime, normalized) = match self.baseline {
            Some(base) => {
                let t = if plan.substitutions.is_empty() {
                    base
                } else {
                    self.workflow_time(&apply_plan(self.wf, plan, false)?)?
                };
                (t, if base > 0.0 { t / base } else { 1.0 })
            }
            None => (0.0, 0.0),
        };
        let accuracy_risk = if c.accuracy_risk > 0.0 {
            plan.substitutions
                .iter()
                .map(|s| self.risk(s))
                .sum::<Result<f64, _>>()?
        } else {
            plan.substitutions
                .iter()
                .map(|s| self.risk(s).unwrap_or(0.0))
                .sum()
        };
        let monetary = runtime * c.unit_cost;
        let total = c.runtime * normalized + c.accuracy_risk * accuracy_risk / c.tolerance + c.monetary * monetary;
        Ok(Costing {
            runtime,
            accuracy_risk,
            monetary,
            total,
        })
    }

    pub fn cost(&self, plan: &SubstitutionPlan) -> Result<f64, PolicyError> {
        self.costing(plan).map(|c| c.total)
    }

    /// Plan minus baseline, per objective.
    pub fn deltas(&self, plan: &SubstitutionPlan) -> BTreeMap<Objective, f64> {
        let (Ok(p), Ok(b)) = (self.costing(plan), self.costing(&SubstitutionPlan::baseline())) else {
            return BTreeMap::new();
        };
        let mut out = BTreeMap::from([(Objective::AccuracyRisk, p.accuracy_risk - b.accuracy_risk)]);
        if self.baseline.is_some() {
            out.insert(Objective::Runtime, p.runtime - b.runtime);
            out.insert(Objective::Monetary, p.monetary - b.monetary);
        }
        out
    }
}

pub fn evaluate_plan(
    plan: &SubstitutionPlan,
    wf: &WorkflowDescription,
    kb: &Kb,
    cost: &CostFunction,
) -> Result<f64, PolicyError> {
    Evaluator::new(wf, kb, cost)?.cost(plan)
}
