use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::OutputFile;
use crate::canon;
use crate::kb::now;
use crate::model::{token, ComponentNode, InputSource, Segment, WorkflowDescription};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAttempt {
    pub node: String,
    pub attempt: u32,
    /// `None` when the process could not be started or was killed by a signal.
    pub exit_code: Option<i32>,
    pub started: f64,
    pub ended: f64,
    pub sandbox: PathBuf,
    pub stdout: PathBuf,
    pub stderr: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Files to place in a sandbox before launch.
pub(super) struct Inputs {
    /// (path inside the sandbox, source file, hard link allowed)
    files: Vec<(PathBuf, PathBuf, bool)>,
    /// `producer/output` → path inside the sandbox, for argument tokens.
    arg_refs: HashMap<(String, String), String>,
}

impl Inputs {
    pub(super) fn for_node(wf: &WorkflowDescription, node: &ComponentNode, work_dirs: &HashMap<String, PathBuf>) -> Self {
        let out_path = |p: &str, o: &str| {
            let path = wf.node(p).and_then(|n| n.output(o)).map_or(o, |x| x.path.as_str());
            work_dirs.get(p).map(|d| d.join(path)).unwrap_or_default()
        };
        let mut files = Vec::new();
        for input in &node.inputs {
            let dest = PathBuf::from(&input.name);
            match &input.source {
                InputSource::LiteralFile { path } => files.push((dest, wf.literal_path(path), false)),
                InputSource::Parameter { key } => {
                    let value = wf.parameters.get(key).cloned().unwrap_or_default();
                    files.push((dest, wf.literal_path(&value), false));
                }
                InputSource::Reference { node: p, output } => files.push((dest, out_path(p, output), true)),
            }
        }
        let mut arg_refs = HashMap::new();
        for arg in &node.command.arguments {
            for (p, o) in token::refs(arg) {
                let path = wf.node(p).and_then(|n| n.output(o)).map_or(o, |x| x.path.as_str());
                let rel = format!(".inputs/{p}/{path}");
                files.push((PathBuf::from(&rel), out_path(p, o), true));
                arg_refs.insert((p.to_string(), o.to_string()), rel);
            }
        }
        Inputs { files, arg_refs }
    }

    fn materialize(&self, work: &Path) -> Result<(), String> {
        for (dest, src, link) in &self.files {
            let dest = work.join(dest);
            if dest.exists() {
                continue;
            }
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
            }
            let linked = *link && fs::hard_link(src, &dest).is_ok();
            if !linked {
                fs::copy(src, &dest).map_err(|e| format!("input {}: {e}", src.display()))?;
            }
        }
        Ok(())
    }

    fn arguments(&self, node: &ComponentNode) -> Vec<String> {
        node.command
            .arguments
            .iter()
            .map(|a| {
                token::rewrite::<()>(a, |seg| match seg {
                    Segment::Ref { node, output } => {
                        Ok(self.arg_refs.get(&(node.to_string(), output.to_string())).cloned())
                    }
                    _ => Ok(None),
                })
                .unwrap_or_else(|_| a.clone())
            })
            .collect()
    }
}

pub(super) struct Outcome {
    pub attempts: Vec<TaskAttempt>,
    /// Sandbox of the successful attempt.
    pub work: Option<PathBuf>,
    pub outputs: BTreeMap<String, OutputFile>,
}

/// Runs the node in a fresh sandbox per attempt, retrying non-zero exits up
/// to `restart_limit` times.
pub(super) fn run_node(
    node: &ComponentNode,
    inputs: &Inputs,
    node_dir: &Path,
    restart_limit: u32,
) -> Outcome {
    let mut attempts = Vec::new();
    let args = inputs.arguments(node);
    for attempt in 0..=restart_limit {
        let dir = node_dir.join(attempt.to_string());
        let work = dir.join("work");
        let stdout = dir.join("stdout.log");
        let stderr = dir.join("stderr.log");
        let started = now();
        let record = |exit_code: Option<i32>, error: Option<String>| TaskAttempt {
            node: node.name.clone(),
            attempt,
            exit_code,
            started,
            ended: now(),
            sandbox: work.clone(),
            stdout: stdout.clone(),
            stderr: stderr.clone(),
            error,
        };
        if let Err(e) = fs::create_dir_all(&work).map_err(|e| e.to_string()).and_then(|_| inputs.materialize(&work)) {
            attempts.push(record(None, Some(e)));
            break;
        }
        let logs = fs::File::create(&stdout).and_then(|o| Ok((o, fs::File::create(&stderr)?)));
        let (out, err) = match logs {
            Ok(l) => l,
            Err(e) => {
                attempts.push(record(None, Some(e.to_string())));
                break;
            }
        };
        let status = Command::new(&node.command.executable)
            .args(&args)
            .envs(&node.command.environment)
            .current_dir(&work)
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(err)
            .status();
        let status = match status {
            Ok(s) => s,
            Err(e) => {
                attempts.push(record(None, Some(format!("cannot start `{}`: {e}", node.command.executable))));
                break;
            }
        };
        if !status.success() {
            attempts.push(record(status.code(), None));
            continue;
        }
        let mut outputs = BTreeMap::new();
        let mut missing = Vec::new();
        for o in &node.outputs {
            let path = work.join(&o.path);
            match canon::digest_file(&path) {
                Ok(digest) => {
                    outputs.insert(o.name.clone(), OutputFile { path, digest });
                }
                Err(_) => missing.push(o.path.clone()),
            }
        }
        if !missing.is_empty() {
            attempts.push(record(Some(0), Some(format!("missing outputs: {}", missing.join(", ")))));
            break;
        }
        attempts.push(record(Some(0), None));
        return Outcome {
            attempts,
            work: Some(work),
            outputs,
        };
    }
    Outcome {
        attempts,
        work: None,
        outputs: BTreeMap::new(),
    }
}
