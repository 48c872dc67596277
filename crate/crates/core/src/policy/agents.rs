use std::collections::BTreeSet;

use super::{
    inline_patch, prior_adjudicate, retarget, AdjudicationRule, Evaluator, PlannedSubstitution,
    SubstitutionPlan, SurrogateBinding,
};
use crate::equivalence::{multiset_jaccard, LabelMode, SubGraph};
use crate::factoring::{block_of, units, Block};
use crate::kb::{Kb, Scope};
use crate::model::WorkflowDescription;
use crate::substitution::{extract_patch, identify_splice_points, Patch, DEFAULT_THRESHOLD};

/// Read-only view agents work from.
pub struct AgentContext<'a> {
    pub wf: &'a WorkflowDescription,
    pub kb: &'a Kb,
    pub evaluator: &'a Evaluator<'a>,
    pub bindings: &'a [SurrogateBinding],
    pub rule: AdjudicationRule,
    /// Minimum name-mode function similarity for an alternate.
    pub threshold: f64,
}

pub trait Agent {
    fn name(&self) -> &str;
    fn propose(&self, ctx: &AgentContext<'_>) -> Vec<SubstitutionPlan>;
}

fn substitution(
    ctx: &AgentContext<'_>,
    target: &BTreeSet<String>,
    patch: Patch,
    replacement: Option<String>,
    binding: Option<String>,
) -> Option<PlannedSubstitution> {
    let patch = inline_patch(&retarget(&patch, target));
    let splice = identify_splice_points(ctx.wf, &patch, DEFAULT_THRESHOLD, false);
    if !splice.conflicts.is_empty() {
        log::debug!("skipping substitution of {target:?}: {:?}", splice.conflicts);
        return None;
    }
    Some(PlannedSubstitution {
        target: target.clone(),
        replacement,
        binding,
        patch,
        splice,
    })
}

fn plan(ctx: &AgentContext<'_>, id: String, agent: &str, s: PlannedSubstitution) -> SubstitutionPlan {
    let mut p = SubstitutionPlan {
        id,
        substitutions: vec![s],
        expected_deltas: Default::default(),
        agent: agent.to_string(),
    };
    p.expected_deltas = ctx.evaluator.deltas(&p);
    p
}

/// Per block, the fastest KB entry that is function-equivalent under name
/// labels and faster than the block as it stands.
pub struct PerformanceAgent;

impl PerformanceAgent {
    fn alternates(ctx: &AgentContext<'_>, block: &Block) -> Vec<(f64, String)> {
        let sub = SubGraph {
            wf: ctx.wf,
            members: block.members.clone(),
        };
        let Ok(rep) = ctx.kb.representation(&sub) else { return Vec::new() };
        let own = rep.id();
        let Some(labels) = rep.wl.get(&LabelMode::Name) else { return Vec::new() };
        let mut out: Vec<(f64, String)> = ctx
            .kb
            .entries()
            .filter(|e| e.id != own && e.scopes.contains(&Scope::Unit))
            .filter(|e| {
                e.representation
                    .wl
                    .get(&LabelMode::Name)
                    .is_some_and(|l| multiset_jaccard(&labels.multiset, &l.multiset) >= ctx.threshold)
            })
            .filter_map(|e| ctx.evaluator.entry_time(&e.id).map(|t| (t, e.id.clone())))
            .collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        out
    }

    fn patch_for(kb: &Kb, id: &str) -> Option<Patch> {
        let entry = kb.entry(id)?;
        entry.sources.iter().find_map(|s| {
            let src = kb.source_workflow(s).ok()?;
            extract_patch(&src, &block_of(&src, s.nodes.clone())).ok()
        })
    }
}

impl Agent for PerformanceAgent {
    fn name(&self) -> &str {
        "performance"
    }

    fn propose(&self, ctx: &AgentContext<'_>) -> Vec<SubstitutionPlan> {
        let mut out = Vec::new();
        let hashes = ctx.evaluator.hashes(ctx.wf);
        for block in units(ctx.wf).0 {
            let Ok(current) = ctx.evaluator.block_time(ctx.wf, hashes.as_ref(), &block.members) else {
                continue;
            };
            for (t, id) in Self::alternates(ctx, &block) {
                if t >= current {
                    break;
                }
                let Some(patch) = Self::patch_for(ctx.kb, &id) else { continue };
                if let Some(s) = substitution(ctx, &block.members, patch, Some(id), None) {
                    out.push(plan(ctx, format!("performance-{}", block.id), self.name(), s));
                    break;
                }
            }
        }
        out
    }
}

/// Surrogates whose bindings pass the prior adjudication rule.
pub struct AccuracyAgent;

impl Agent for AccuracyAgent {
    fn name(&self) -> &str {
        "accuracy"
    }

    fn propose(&self, ctx: &AgentContext<'_>) -> Vec<SubstitutionPlan> {
        let mut out = Vec::new();
        for b in ctx.bindings {
            if !prior_adjudicate(&b.id, ctx.kb, &ctx.rule).approved() {
                continue;
            }
            let patch = match b.load_patch() {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("binding {}: {e}", b.id);
                    continue;
                }
            };
            if let Some(s) = substitution(ctx, &b.physical, patch, None, Some(b.id.clone())) {
                out.push(plan(ctx, format!("accuracy-{}", b.id), self.name(), s));
            }
        }
        out
    }
}

/// Proposals from every agent, sorted by plan id.
pub fn run_agents(ctx: &AgentContext<'_>, agents: &[&dyn Agent]) -> Vec<SubstitutionPlan> {
    let mut out: Vec<SubstitutionPlan> = agents.iter().flat_map(|a| a.propose(ctx)).collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}
