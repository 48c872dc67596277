//! Local process execution with approximate memoization and canary surrogates.

mod canary;
mod sandbox;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equivalence::{interface_hashes, literal_digests, EquivalenceError};
use crate::kb::{now, ExecutionRecord, Kb, KbError};
use crate::model::{resolve_parameters, validate, ModelError, ParameterLayer, WorkflowDescription};
use crate::par::Parallelism;
use crate::substitution::SubstitutionError;

pub use crate::policy::{BindingMode, SurrogateBinding};
pub use canary::{adjudicated_run, canary_run, CanaryOutcome};
pub use sandbox::TaskAttempt;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Equivalence(#[from] EquivalenceError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Substitution(#[from] SubstitutionError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RuntimeError + '_ {
    move |source| RuntimeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub memoize: bool,
    /// Retries after a non-zero exit.
    pub restart_limit: u32,
    pub max_parallel: usize,
    pub platform: Option<ParameterLayer>,
    pub runs_dir: PathBuf,
    pub run_id: Option<String>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            memoize: true,
            restart_limit: 1,
            max_parallel: std::thread::available_parallelism().map_or(4, |n| n.get()),
            platform: None,
            runs_dir: PathBuf::from("runs"),
            run_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeState {
    Succeeded,
    Failed,
    Memoized,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node: String,
    pub state: NodeState,
    pub hash: String,
    pub wall_seconds: f64,
    pub started: Option<f64>,
    pub ended: Option<f64>,
    pub attempts: Vec<TaskAttempt>,
    pub outputs: BTreeMap<String, OutputFile>,
    /// Record the outputs were restored from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memo_record: Option<String>,
    /// A hit whose restore failed, so the task ran after all.
    #[serde(default)]
    pub degraded_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub workflow: String,
    pub run_dir: PathBuf,
    pub platform: String,
    pub memoize: bool,
    pub started: f64,
    pub ended: f64,
    pub wall_seconds: f64,
    pub memo_hits: usize,
    pub task_attempts: usize,
    pub succeeded: bool,
    pub nodes: Vec<NodeReport>,
    /// Binding ids whose surrogate replaced the physical block.
    #[serde(default)]
    pub substitutions: Vec<String>,
    #[serde(default)]
    pub canary: Vec<CanaryOutcome>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn node(&self, name: &str) -> Option<&NodeReport> {
        self.nodes.iter().find(|n| n.node == name)
    }

    /// Output digests of the leaf nodes, keyed `node/output`.
    pub fn leaf_outputs(&self, wf: &WorkflowDescription) -> BTreeMap<String, String> {
        let (_, succs) = wf.adjacency();
        wf.nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| succs[*i].is_empty())
            .filter_map(|(_, n)| self.node(&n.name))
            .flat_map(|r| {
                r.outputs
                    .iter()
                    .map(move |(o, f)| (format!("{}/{o}", r.node), f.digest.clone()))
            })
            .collect()
    }

    pub fn write(&self) -> Result<(), RuntimeError> {
        let path = self.run_dir.join(REPORT_FILE);
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&path, text).map_err(io_err(&path))
    }
}

static RUN_COUNTER: AtomicUsize = AtomicUsize::new(0);

fn fresh_run_id() -> String {
    let ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis());
    format!(
        "{ms}-{}-{}",
        std::process::id(),
        RUN_COUNTER.fetch_add(1, Ordering::Relaxed)
    )
}

/// Authoritative successful record for the node, if any. Knowledge-base
/// problems are misses.
pub fn memoize_check(wf: &WorkflowDescription, node: &str, kb: &Kb) -> Option<ExecutionRecord> {
    let lits = literal_digests(wf, Parallelism::Sequential).ok()?;
    let hashes = interface_hashes(wf, &lits, Parallelism::Sequential).ok()?;
    kb.lookup_execution(&hashes.get(node)?.digest).cloned()
}

/// Materializes the record's outputs under `sandbox`, verifying digests.
pub fn restore_outputs(record: &ExecutionRecord, sandbox: &Path, kb: &Kb) -> Result<Vec<PathBuf>, KbError> {
    let mut out = Vec::with_capacity(record.outputs.len());
    for stored in record.outputs.values() {
        let dest = sandbox.join(&stored.path);
        kb.restore_blob(&stored.digest, &dest)?;
        out.push(dest);
    }
    Ok(out)
}

struct Finished {
    index: usize,
    outcome: sandbox::Outcome,
}

/// Runs `wf` as local processes. Independent nodes run concurrently up to
/// `max_parallel`; with memoization on, nodes whose interface hash has a
/// successful record are restored instead of run.
pub fn execute(
    wf: &WorkflowDescription,
    mut kb: Option<&mut Kb>,
    options: &RunOptions,
) -> Result<RunReport, RuntimeError> {
    let layers: Vec<ParameterLayer> = options.platform.iter().cloned().collect();
    let wf = resolve_parameters(wf, &layers)?;
    validate(&wf)?;
    let platform = options
        .platform
        .as_ref()
        .map_or_else(|| "local".to_string(), |l| l.name.clone());
    let lits = literal_digests(&wf, Parallelism::default())?;
    let hashes: Vec<String> = {
        let h = interface_hashes(&wf, &lits, Parallelism::default())?;
        wf.nodes.iter().map(|n| h[&n.name].digest.clone()).collect()
    };

    let run_id = options.run_id.clone().unwrap_or_else(fresh_run_id);
    let run_dir = options.runs_dir.join(&run_id);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let run_dir = fs::canonicalize(&run_dir).map_err(io_err(&run_dir))?;

    let mut warnings = Vec::new();
    let memoize = options.memoize && kb.is_some();
    if options.memoize && kb.is_none() {
        warnings.push("memoization disabled: no knowledge base".to_string());
    }
    if kb.as_ref().is_some_and(|k| !k.is_writable()) {
        warnings.push("knowledge base is read-only; executions are not recorded".to_string());
    }

    let n = wf.nodes.len();
    let (preds, succs) = wf.adjacency();
    let mut waiting: Vec<usize> = preds.iter().map(|p| p.len()).collect();
    let mut ready: VecDeque<usize> = (0..n).filter(|&i| waiting[i] == 0).collect();
    let mut reports: Vec<Option<NodeReport>> = vec![None; n];
    let mut work_dirs: HashMap<String, PathBuf> = HashMap::new();
    let max_parallel = options.max_parallel.max(1);
    let started = now();
    let mut fatal: Option<RuntimeError> = None;

    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<Finished>();
        let mut in_flight = 0usize;
        loop {
            while fatal.is_none() && in_flight < max_parallel {
                let Some(i) = ready.pop_front() else { break };
                let node = &wf.nodes[i];
                let node_dir = run_dir.join(&node.name);
                let mut degraded = false;
                if memoize {
                    let k = kb.as_deref().expect("memoize implies a knowledge base");
                    if let Some(record) = k.lookup_execution(&hashes[i]).cloned() {
                        let covered = node.outputs.iter().all(|o| record.outputs.contains_key(&o.name));
                        let work = node_dir.join("memo").join("work");
                        match covered.then(|| restore_outputs(&record, &work, k)) {
                            Some(Ok(_)) => {
                                let t = now();
                                let outputs = node
                                    .outputs
                                    .iter()
                                    .map(|o| {
                                        (
                                            o.name.clone(),
                                            OutputFile {
                                                path: work.join(&o.path),
                                                digest: record.outputs[&o.name].digest.clone(),
                                            },
                                        )
                                    })
                                    .collect();
                                reports[i] = Some(NodeReport {
                                    node: node.name.clone(),
                                    state: NodeState::Memoized,
                                    hash: hashes[i].clone(),
                                    wall_seconds: 0.0,
                                    started: Some(t),
                                    ended: Some(t),
                                    attempts: Vec::new(),
                                    outputs,
                                    memo_record: Some(record.record_id()),
                                    degraded_hit: false,
                                });
                                work_dirs.insert(node.name.clone(), work);
                                for &j in &succs[i] {
                                    waiting[j] -= 1;
                                    if waiting[j] == 0 {
                                        ready.push_back(j);
                                    }
                                }
                                continue;
                            }
                            Some(Err(KbError::DigestMismatch { expected, actual })) => {
                                fatal = Some(KbError::DigestMismatch { expected, actual }.into());
                                break;
                            }
                            Some(Err(e)) => {
                                warnings.push(format!("{}: memoized outputs unavailable ({e}); running", node.name));
                                degraded = true;
                            }
                            None => degraded = true,
                        }
                    }
                }
                let inputs = sandbox::Inputs::for_node(&wf, node, &work_dirs);
                let tx = tx.clone();
                let restart_limit = options.restart_limit;
                in_flight += 1;
                reports[i] = Some(NodeReport {
                    node: node.name.clone(),
                    state: NodeState::Failed,
                    hash: hashes[i].clone(),
                    wall_seconds: 0.0,
                    started: None,
                    ended: None,
                    attempts: Vec::new(),
                    outputs: BTreeMap::new(),
                    memo_record: None,
                    degraded_hit: degraded,
                });
                scope.spawn(move || {
                    let outcome = sandbox::run_node(node, &inputs, &node_dir, restart_limit);
                    let _ = tx.send(Finished { index: i, outcome });
                });
            }
            if in_flight == 0 {
                break;
            }
            let Finished { index: i, outcome } = rx.recv().expect("workers hold a sender");
            in_flight -= 1;
            let node = &wf.nodes[i];
            let report = reports[i].as_mut().expect("dispatched");
            report.started = outcome.attempts.first().map(|a| a.started);
            report.ended = outcome.attempts.last().map(|a| a.ended);
            report.wall_seconds = report.ended.unwrap_or(0.0) - report.started.unwrap_or(0.0);
            report.attempts = outcome.attempts;
            let last_exit = report.attempts.last().and_then(|a| a.exit_code).unwrap_or(-1);
            if let Some(k) = kb.as_deref_mut().filter(|k| k.is_writable()) {
                let record = ExecutionRecord {
                    hash: hashes[i].clone(),
                    workflow: wf.name.clone(),
                    node: node.name.clone(),
                    started: report.started.unwrap_or(started),
                    ended: report.ended.unwrap_or(started),
                    exit_code: if outcome.work.is_some() { 0 } else if last_exit == 0 { -1 } else { last_exit },
                    outputs: BTreeMap::new(),
                    platform: platform.clone(),
                    memoized: false,
                    wall_seconds: report.wall_seconds,
                };
                let files: Vec<(String, String, PathBuf)> = match &outcome.work {
                    Some(work) => node
                        .outputs
                        .iter()
                        .map(|o| (o.name.clone(), o.path.clone(), work.join(&o.path)))
                        .collect(),
                    None => Vec::new(),
                };
                if let Err(e) = k.record_execution(record, &files) {
                    warnings.push(format!("{}: not recorded ({e})", node.name));
                }
            }
            if let Some(work) = outcome.work {
                report.state = NodeState::Succeeded;
                report.outputs = outcome.outputs;
                work_dirs.insert(node.name.clone(), work);
                for &j in &succs[i] {
                    waiting[j] -= 1;
                    if waiting[j] == 0 {
                        ready.push_back(j);
                    }
                }
            }
        }
    });
    if let Some(e) = fatal {
        return Err(e);
    }

    let nodes: Vec<NodeReport> = reports
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.unwrap_or_else(|| NodeReport {
                node: wf.nodes[i].name.clone(),
                state: NodeState::Skipped,
                hash: hashes[i].clone(),
                wall_seconds: 0.0,
                started: None,
                ended: None,
                attempts: Vec::new(),
                outputs: BTreeMap::new(),
                memo_record: None,
                degraded_hit: false,
            })
        })
        .collect();
    let ended = now();
    let report = RunReport {
        run_id,
        workflow: wf.name.clone(),
        run_dir,
        platform,
        memoize,
        started,
        ended,
        wall_seconds: ended - started,
        memo_hits: nodes.iter().filter(|r| r.state == NodeState::Memoized).count(),
        task_attempts: nodes.iter().map(|r| r.attempts.len()).sum(),
        succeeded: nodes
            .iter()
            .filter(|r| r.state != NodeState::Skipped)
            .all(|r| matches!(r.state, NodeState::Succeeded | NodeState::Memoized)),
        nodes,
        substitutions: Vec::new(),
        canary: Vec::new(),
        warnings,
    };
    report.write()?;
    Ok(report)
}

#[cfg(test)]
mod tests;
