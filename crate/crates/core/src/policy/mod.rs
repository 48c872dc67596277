//! Substitution policy: cost function, proposal agents, superintendent, and
//! the prior adjudication rule for surrogate bindings.

mod agents;
mod cost;
mod superintend;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{Kb, KbError};
use crate::substitution::{Conflict, Instruction, Patch, SpliceMap, SubstitutionError};

pub use agents::{run_agents, AccuracyAgent, Agent, AgentContext, PerformanceAgent};
pub use cost::{apply_plan, evaluate_plan, Costing, Evaluator};
pub use superintend::{superintend, Mode};

pub const BASELINE: &str = "baseline";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Substitution(#[from] SubstitutionError),
    #[error("no {objective} data for {locus} and no default")]
    NoData { objective: Objective, locus: String },
    #[error("invalid cost function: {0}")]
    InvalidCost(String),
    #[error("substitution for {target} conflicts: {conflicts:?}")]
    Conflicts { target: String, conflicts: Vec<Conflict> },
    #[error("plan substitutions overlap on `{0}`")]
    Overlap(String),
    #[error("{path}: {detail}")]
    File { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Runtime,
    AccuracyRisk,
    Monetary,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Runtime => "runtime",
            Objective::AccuracyRisk => "accuracy-risk",
            Objective::Monetary => "monetary",
        })
    }
}

fn default_unit_cost() -> f64 {
    1.0
}

fn default_tolerance() -> f64 {
    0.05
}

fn default_risk() -> Option<f64> {
    Some(1.0)
}

/// Weights and normalization constants. Read from a JSON objectives file such
/// as `{"runtime": 1, "accuracy-risk": 0.5, "monetary": 0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct CostFunction {
    #[serde(default)]
    pub runtime: f64,
    #[serde(default)]
    pub accuracy_risk: f64,
    #[serde(default)]
    pub monetary: f64,
    /// Money per predicted second.
    #[serde(default = "default_unit_cost")]
    pub unit_cost: f64,
    /// Divides accuracy risk.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Risk assumed for substitutions without samples.
    #[serde(default = "default_risk")]
    pub risk_default: Option<f64>,
}

impl Default for CostFunction {
    fn default() -> Self {
        CostFunction {
            runtime: 1.0,
            accuracy_risk: 0.0,
            monetary: 0.0,
            unit_cost: default_unit_cost(),
            tolerance: default_tolerance(),
            risk_default: default_risk(),
        }
    }
}

impl CostFunction {
    pub fn weights(runtime: f64, accuracy_risk: f64, monetary: f64) -> Self {
        CostFunction {
            runtime,
            accuracy_risk,
            monetary,
            ..Default::default()
        }
    }

    pub fn weight(&self, o: Objective) -> f64 {
        match o {
            Objective::Runtime => self.runtime,
            Objective::AccuracyRisk => self.accuracy_risk,
            Objective::Monetary => self.monetary,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let ws = [self.runtime, self.accuracy_risk, self.monetary];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(PolicyError::InvalidCost("weights must be non-negative".into()));
        }
        if !ws.iter().any(|w| *w > 0.0) {
            return Err(PolicyError::InvalidCost("at least one weight must be positive".into()));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 || self.unit_cost.is_nan() || self.unit_cost < 0.0 {
            return Err(PolicyError::InvalidCost(
                "tolerance must be positive and unit cost non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let cf: CostFunction = read_json(path)?;
        cf.validate()?;
        Ok(cf)
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PolicyError> {
    let text = std::fs::read_to_string(path).map_err(|e| PolicyError::File {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| PolicyError::File {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedSubstitution {
    /// Nodes of the workflow being replaced.
    pub target: BTreeSet<String>,
    /// KB entry of the replacement, when it came from the KB.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<String>,
    /// Surrogate binding id, when it came from a binding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<String>,
    pub patch: Patch,
    pub splice: SpliceMap,
}

impl PlannedSubstitution {
    /// Key accuracy samples are filed under.
    pub fn sample_key(&self) -> Option<&str> {
        self.binding.as_deref().or(self.replacement.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionPlan {
    pub id: String,
    pub substitutions: Vec<PlannedSubstitution>,
    #[serde(default)]
    pub expected_deltas: BTreeMap<Objective, f64>,
    pub agent: String,
}

impl SubstitutionPlan {
    pub fn baseline() -> Self {
        SubstitutionPlan {
            id: BASELINE.to_string(),
            substitutions: Vec::new(),
            expected_deltas: BTreeMap::new(),
            agent: BASELINE.to_string(),
        }
    }

    /// First node claimed by two substitutions.
    pub fn overlap(&self) -> Option<String> {
        let mut seen = BTreeSet::new();
        self.substitutions
            .iter()
            .flat_map(|s| s.target.iter())
            .find(|n| !seen.insert(*n))
            .cloned()
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        read_json(path)
    }
}

/// Points patch payload entries at files that exist independently of the
/// patch directory, so the patch can travel inside a plan document.
pub fn inline_patch(patch: &Patch) -> Patch {
    let mut p = patch.clone();
    for (literal, file) in p.payload.iter_mut() {
        if let Some(path) = patch.payload_path(literal) {
            let path = std::fs::canonicalize(&path).unwrap_or(path);
            file.origin = Some(path.to_string_lossy().into_owned());
            file.stored = None;
        }
    }
    p.dir = None;
    p
}

/// Replaces the patch's removal directives so it targets `target` in the host.
pub fn retarget(patch: &Patch, target: &BTreeSet<String>) -> Patch {
    let mut p = patch.clone();
    p.instructions.retain(|i| !matches!(i, Instruction::Remove { .. }));
    p.instructions
        .extend(target.iter().map(|n| Instruction::Remove { node: n.clone() }));
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AdjudicationRule {
    pub min_samples: usize,
    pub statistic: Statistic,
    pub tolerance: f64,
}

impl Default for AdjudicationRule {
    fn default() -> Self {
        AdjudicationRule {
            min_samples: 10,
            statistic: Statistic::Mean,
            tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Clause {
    MinSamples,
    Tolerance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "kebab-case")]
pub enum Decision {
    Approve,
    Reject { clause: Clause, detail: String },
}

impl Decision {
    pub fn approved(&self) -> bool {
        matches!(self, Decision::Approve)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BindingMode {
    #[default]
    Canary,
    Substitute,
}

/// Declared physical/surrogate relationship over a block of the host workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SurrogateBinding {
    pub id: String,
    pub physical: BTreeSet<String>,
    /// Patch directory holding the surrogate.
    pub patch: PathBuf,
    /// Command given the physical and surrogate output directories as its last
    /// two arguments; prints one decimal number.
    pub comparator: Vec<String>,
    #[serde(default)]
    pub mode: BindingMode,
}

impl SurrogateBinding {
    /// The surrogate patch, retargeted at the physical block.
    pub fn load_patch(&self) -> Result<Patch, SubstitutionError> {
        Ok(retarget(&Patch::load(&self.patch)?, &self.physical))
    }
}

/// Reads a JSON array of bindings; patch paths resolve against the file's directory.
pub fn load_bindings(path: &Path) -> Result<Vec<SurrogateBinding>, PolicyError> {
    let mut bindings: Vec<SurrogateBinding> = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for b in &mut bindings {
        if b.patch.is_relative() {
            b.patch = base.join(&b.patch);
        }
    }
    Ok(bindings)
}

pub fn prior_adjudicate(binding: &str, kb: &Kb, rule: &AdjudicationRule) -> Decision {
    let stats = kb.accuracy_stats(binding);
    if stats.count < rule.min_samples || stats.count == 0 {
        return Decision::Reject {
            clause: Clause::MinSamples,
            detail: format!("{} samples, {} required", stats.count, rule.min_samples),
        };
    }
    let (name, value) = match rule.statistic {
        Statistic::Mean => ("mean", stats.mean),
        Statistic::Max => ("max", stats.max),
    };
    let value = value.expect("non-empty samples");
    if value <= rule.tolerance {
        Decision::Approve
    } else {
        Decision::Reject {
            clause: Clause::Tolerance,
            detail: format!("{name} error {value} exceeds {}", rule.tolerance),
        }
    }
}

#[cfg(test)]
mod tests;
