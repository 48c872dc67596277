use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Evaluator, PlannedSubstitution, PolicyError, SubstitutionPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Pick,
    Mix,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pick" => Ok(Mode::Pick),
            "mix" => Ok(Mode::Mix),
            other => Err(format!("unknown mode `{other}` (expected pick or mix)")),
        }
    }
}

fn better(a: &(f64, String), b: &(f64, String)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// The cheapest of the proposals and the baseline. In mix mode, the cheapest
/// substitution per target block is combined when that beats the pick.
/// Proposals that cannot be priced are skipped.
pub fn superintend(
    proposals: &[SubstitutionPlan],
    evaluator: &Evaluator<'_>,
    mode: Mode,
) -> Result<(SubstitutionPlan, f64), PolicyError> {
    let baseline = SubstitutionPlan::baseline();
    let base_cost = evaluator.cost(&baseline)?;
    let mut best = (base_cost, baseline.id.clone());
    let mut chosen = baseline;
    let mut priced: Vec<(f64, &SubstitutionPlan)> = Vec::new();
    for p in proposals {
        if p.overlap().is_some() {
            log::warn!("proposal {} has overlapping substitutions", p.id);
            continue;
        }
        match evaluator.cost(p) {
            Ok(c) => {
                priced.push((c, p));
                let key = (c, p.id.clone());
                if better(&key, &best) {
                    best = key;
                    chosen = p.clone();
                }
            }
            Err(e) => log::warn!("proposal {} not priced: {e}", p.id),
        }
    }
    if mode == Mode::Pick {
        return Ok((chosen, best.0));
    }

    // cheapest single substitution per target block
    let mut per_block: BTreeMap<BTreeSet<String>, (f64, String, &PlannedSubstitution)> = BTreeMap::new();
    for (_, p) in &priced {
        for s in &p.substitutions {
            let single = SubstitutionPlan {
                id: p.id.clone(),
                substitutions: vec![s.clone()],
                expected_deltas: BTreeMap::new(),
                agent: p.agent.clone(),
            };
            let Ok(c) = evaluator.cost(&single) else { continue };
            let marginal = c - base_cost;
            let slot = per_block.entry(s.target.clone()).or_insert((f64::INFINITY, String::new(), s));
            if better(&(marginal, p.id.clone()), &(slot.0, slot.1.clone())) {
                *slot = (marginal, p.id.clone(), s);
            }
        }
    }
    let mut taken: BTreeSet<String> = BTreeSet::new();
    let mut subs = Vec::new();
    let mut sources = BTreeSet::new();
    for (target, (marginal, id, s)) in per_block {
        if marginal >= 0.0 || target.iter().any(|n| taken.contains(n)) {
            continue;
        }
        taken.extend(target);
        subs.push(s.clone());
        sources.insert(id);
    }
    if subs.len() < 2 {
        return Ok((chosen, best.0));
    }
    let mut mixed = SubstitutionPlan {
        id: format!("mix:{}", sources.into_iter().collect::<Vec<_>>().join("+")),
        substitutions: subs,
        expected_deltas: BTreeMap::new(),
        agent: "superintendent".into(),
    };
    match evaluator.cost(&mixed) {
        Ok(c) if c < best.0 => {
            mixed.expected_deltas = evaluator.deltas(&mixed);
            Ok((mixed, c))
        }
        _ => Ok((chosen, best.0)),
    }
}
