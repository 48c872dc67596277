use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::{execute, RunOptions, RunReport, RuntimeError};
use crate::canon;
use crate::equivalence::descriptor;
use crate::kb::{now, AccuracySample, Kb};
use crate::model::{resolve_parameters, token, InputSource, ParameterLayer, Segment, WorkflowDescription};
use crate::policy::{prior_adjudicate, AdjudicationRule, BindingMode, Decision, SurrogateBinding};
use crate::substitution::{apply_patch, identify_splice_points, Patch, DEFAULT_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryOutcome {
    pub binding: String,
    /// Comparator result, when a sample was taken.
    pub error: Option<f64>,
    pub recorded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shadow_run: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn host(wf: &WorkflowDescription, options: &RunOptions) -> Result<WorkflowDescription, RuntimeError> {
    let layers: Vec<ParameterLayer> = options.platform.iter().cloned().collect();
    Ok(resolve_parameters(wf, &layers)?)
}

/// The surrogate nodes with every spliced input replaced by the physical
/// run's file.
fn shadow_workflow(
    host: &WorkflowDescription,
    binding: &SurrogateBinding,
    patch: &Patch,
    report: &RunReport,
) -> Result<WorkflowDescription, String> {
    let splice = identify_splice_points(host, patch, DEFAULT_THRESHOLD, false);
    if let Some(c) = splice.conflicts.first() {
        return Err(format!("surrogate does not splice: {c}"));
    }
    let mut files: BTreeMap<(String, String), String> = BTreeMap::new();
    for input in &patch.input_schema {
        let target = &splice.inputs[&input.id];
        let file = report
            .node(&target.node)
            .and_then(|r| r.outputs.get(&target.output))
            .ok_or_else(|| format!("`{}/{}` was not produced", target.node, target.output))?;
        files.insert(
            (input.producer.clone(), input.output.clone()),
            file.path.to_string_lossy().into_owned(),
        );
    }
    let mut nodes = patch.graph.nodes.clone();
    for node in &mut nodes {
        for input in &mut node.inputs {
            match &input.source {
                InputSource::Reference { node: p, output } => {
                    if let Some(f) = files.get(&(p.clone(), output.clone())) {
                        input.source = InputSource::LiteralFile { path: f.clone() };
                    }
                }
                InputSource::LiteralFile { path } => {
                    if let Some(p) = patch.payload_path(path) {
                        let p = fs::canonicalize(&p).unwrap_or(p);
                        input.source = InputSource::LiteralFile {
                            path: p.to_string_lossy().into_owned(),
                        };
                    }
                }
                InputSource::Parameter { .. } => {}
            }
        }
        for arg in &mut node.command.arguments {
            if let Ok(r) = token::rewrite::<()>(arg, |seg| match seg {
                Segment::Ref { node: p, output } => Ok(files.get(&(p.to_string(), output.to_string())).cloned()),
                _ => Ok(None),
            }) {
                *arg = r;
            }
        }
    }
    Ok(WorkflowDescription {
        name: format!("{}.canary.{}", host.name, binding.id),
        parameters: patch.graph.parameters.clone(),
        nodes,
        metadata: BTreeMap::new(),
        base_dir: None,
    })
}

fn copy_into(src: &Path, dir: &Path, name: &str) -> Result<String, String> {
    let dest = dir.join(name);
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent).map_err(|e| e.to_string())?;
    }
    fs::copy(src, &dest).map_err(|e| format!("{}: {e}", src.display()))?;
    canon::digest_file(&dest).map_err(|e| e.to_string())
}

fn canary(
    host: &WorkflowDescription,
    binding: &SurrogateBinding,
    report: &RunReport,
    kb: Option<&mut Kb>,
    options: &RunOptions,
) -> CanaryOutcome {
    let mut outcome = CanaryOutcome {
        binding: binding.id.clone(),
        error: None,
        recorded: false,
        shadow_run: None,
        note: None,
    };
    let fail = |o: &mut CanaryOutcome, note: String| {
        log::warn!("canary {}: {note}", binding.id);
        o.note = Some(note);
    };
    let patch = match binding.load_patch() {
        Ok(p) => p,
        Err(e) => {
            fail(&mut outcome, e.to_string());
            return outcome;
        }
    };
    let shadow = match shadow_workflow(host, binding, &patch, report) {
        Ok(s) => s,
        Err(e) => {
            fail(&mut outcome, e);
            return outcome;
        }
    };
    let base = report.run_dir.join("canary");
    let shadow_options = RunOptions {
        memoize: false,
        platform: None,
        runs_dir: base.clone(),
        run_id: Some(binding.id.clone()),
        ..options.clone()
    };
    let shadow_report = match execute(&shadow, None, &shadow_options) {
        Ok(r) => r,
        Err(e) => {
            fail(&mut outcome, format!("surrogate did not run: {e}"));
            return outcome;
        }
    };
    outcome.shadow_run = Some(shadow_report.run_dir.clone());
    if !shadow_report.succeeded {
        fail(&mut outcome, "surrogate failed".into());
        return outcome;
    }

    let compare = base.join(format!("{}-compare", binding.id));
    let (pdir, sdir) = (compare.join("physical"), compare.join("surrogate"));
    let mut pdigests = BTreeMap::new();
    let mut sdigests = BTreeMap::new();
    for node in &shadow.nodes {
        for o in &node.outputs {
            let d = descriptor(&o.path);
            let mut physical = binding
                .physical
                .iter()
                .filter_map(|n| host.node(n))
                .flat_map(|n| n.outputs.iter().map(move |po| (n, po)))
                .filter(|(_, po)| descriptor(&po.path) == d);
            let (Some((pn, po)), None) = (physical.next(), physical.next()) else { continue };
            let (Some(pf), Some(sf)) = (
                report.node(&pn.name).and_then(|r| r.outputs.get(&po.name)),
                shadow_report.node(&node.name).and_then(|r| r.outputs.get(&o.name)),
            ) else {
                continue;
            };
            let copied = copy_into(&pf.path, &pdir, &po.path).and_then(|a| Ok((a, copy_into(&sf.path, &sdir, &po.path)?)));
            match copied {
                Ok((a, b)) => {
                    pdigests.insert(po.path.clone(), a);
                    sdigests.insert(po.path.clone(), b);
                }
                Err(e) => {
                    fail(&mut outcome, e);
                    return outcome;
                }
            }
        }
    }
    if pdigests.is_empty() {
        fail(&mut outcome, "no comparable outputs".into());
        return outcome;
    }

    let Some((program, args)) = binding.comparator.split_first() else {
        fail(&mut outcome, "empty comparator".into());
        return outcome;
    };
    let output = Command::new(program)
        .args(args)
        .arg(&pdir)
        .arg(&sdir)
        .current_dir(&compare)
        .output();
    let value = match output {
        Ok(o) if o.status.success() => String::from_utf8_lossy(&o.stdout).trim().parse::<f64>().ok(),
        Ok(o) => {
            fail(&mut outcome, format!("comparator exited with {}", o.status));
            return outcome;
        }
        Err(e) => {
            fail(&mut outcome, format!("comparator: {e}"));
            return outcome;
        }
    };
    let Some(error) = value.filter(|v| v.is_finite() && *v >= 0.0) else {
        fail(&mut outcome, "comparator output is not a non-negative number".into());
        return outcome;
    };
    outcome.error = Some(error);
    let sample = AccuracySample {
        binding: binding.id.clone(),
        physical_hash: canon::digest_of(&pdigests),
        surrogate_hash: canon::digest_of(&sdigests),
        error,
        comparator: binding.comparator.join(" "),
        timestamp: now(),
    };
    match kb {
        Some(k) => match k.record_sample(sample) {
            Ok(()) => outcome.recorded = true,
            Err(e) => fail(&mut outcome, format!("sample not recorded: {e}")),
        },
        None => fail(&mut outcome, "no knowledge base; sample not recorded".into()),
    }
    outcome
}

/// Runs `wf` normally, then each canary-mode binding's surrogate in a shadow
/// sandbox fed the physical inputs, recording one accuracy sample per
/// comparison. Surrogate trouble never fails the run.
pub fn canary_run(
    wf: &WorkflowDescription,
    bindings: &[SurrogateBinding],
    mut kb: Option<&mut Kb>,
    options: &RunOptions,
) -> Result<RunReport, RuntimeError> {
    let host = host(wf, options)?;
    let mut report = execute(&host, kb.as_deref_mut(), options)?;
    for b in bindings.iter().filter(|b| b.mode == BindingMode::Canary) {
        let o = canary(&host, b, &report, kb.as_deref_mut(), options);
        report.canary.push(o);
    }
    report.write()?;
    Ok(report)
}

/// Substitutes every binding the rule approves before running; rejected
/// canary-mode bindings are canaried when `with_canary` is set.
pub fn adjudicated_run(
    wf: &WorkflowDescription,
    bindings: &[SurrogateBinding],
    rule: &AdjudicationRule,
    mut kb: Option<&mut Kb>,
    options: &RunOptions,
    with_canary: bool,
) -> Result<RunReport, RuntimeError> {
    let mut current = host(wf, options)?;
    let mut applied = Vec::new();
    let mut warnings = Vec::new();
    for b in bindings {
        let decision = kb.as_deref().map_or(
            Decision::Reject {
                clause: crate::policy::Clause::MinSamples,
                detail: "no knowledge base".into(),
            },
            |k| prior_adjudicate(&b.id, k, rule),
        );
        if !decision.approved() {
            continue;
        }
        let attempt = b.load_patch().and_then(|patch| {
            let splice = identify_splice_points(&current, &patch, DEFAULT_THRESHOLD, false);
            apply_patch(&current, &patch, &splice, false)
        });
        match attempt {
            Ok((patched, conflicts)) if conflicts.is_empty() => {
                current = patched;
                applied.push(b.id.clone());
            }
            Ok((_, conflicts)) => warnings.push(format!(
                "binding {}: conflicts {}; running physical",
                b.id,
                conflicts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("; ")
            )),
            Err(e) => warnings.push(format!("binding {}: {e}; running physical", b.id)),
        }
    }
    let mut report = execute(&current, kb.as_deref_mut(), options)?;
    report.substitutions = applied;
    report.warnings.extend(warnings);
    if with_canary {
        for b in bindings
            .iter()
            .filter(|b| b.mode == BindingMode::Canary && !report.substitutions.contains(&b.id))
        {
            let o = canary(&current, b, &report, kb.as_deref_mut(), options);
            report.canary.push(o);
        }
    }
    report.write()?;
    Ok(report)
}
