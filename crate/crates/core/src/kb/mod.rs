//! Persistent knowledge base: sub-graph entries, weighted edges, execution
//! records, a content-addressed output store and surrogate accuracy samples.

mod edges;
mod store;
mod types;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::{self, DIGEST_ALGORITHM};
use crate::equivalence::EquivalenceError;

pub use edges::{workflow_digest, RegisteredWorkflow, COMPOSABILITY, DECLARED, HYPOTHESIS_CEILING};
pub use types::*;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = "kb.lock";
const ENTRIES: &str = "entries.jsonl";
const EDGES: &str = "edges.jsonl";
const EXECUTIONS: &str = "executions.jsonl";
const SAMPLES: &str = "samples.jsonl";
const FILES: [&str; 4] = [ENTRIES, EDGES, EXECUTIONS, SAMPLES];

#[derive(Debug, Error)]
pub enum KbError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no knowledge base at {0} (run `awf kb init`)")]
    NotInitialized(PathBuf),
    #[error("knowledge base corrupt: {file}: {detail}")]
    Corrupt { file: String, detail: String },
    #[error("knowledge base is locked by another writer ({0})")]
    Locked(PathBuf),
    #[error("knowledge base opened read-only")]
    ReadOnly,
    #[error("digest algorithm `{0}` does not match this build (sha256)")]
    AlgorithmMismatch(String),
    #[error("unknown entry `{0}`")]
    UnknownEntry(String),
    #[error("blob {0} missing from object store")]
    MissingBlob(String),
    #[error("blob digest mismatch: expected {expected}, found {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error(transparent)]
    Equivalence(#[from] EquivalenceError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KbError + '_ {
    move |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbConfig {
    pub hypothesis_threshold: f64,
    pub edge_floor: f64,
    pub wl_iterations: usize,
}

impl Default for KbConfig {
    fn default() -> Self {
        KbConfig {
            hypothesis_threshold: 0.8,
            edge_floor: 0.1,
            wl_iterations: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FileChain {
    pub lines: u64,
    pub chain: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub digest_algorithm: String,
    #[serde(flatten)]
    pub config: KbConfig,
    pub files: BTreeMap<String, FileChain>,
}

/// Snapshot of everything a reload must reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct KbState {
    pub entries: IndexMap<String, KbNodeEntry>,
    pub edges: IndexMap<EdgeKey, KbEdge>,
    pub executions: Vec<ExecutionRecord>,
    pub samples: Vec<AccuracySample>,
}

#[derive(Debug, Clone, Serialize)]
pub struct KbStats {
    pub entries: usize,
    pub equivalence_edges: usize,
    pub known_edges: usize,
    pub hypothesized_edges: usize,
    pub subgraph_edges: usize,
    pub executions: usize,
    pub authoritative_hashes: usize,
    pub samples: usize,
    pub blobs: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub blobs_checked: usize,
    pub corrupt_blobs: Vec<String>,
    pub missing_blobs: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.corrupt_blobs.is_empty() && self.missing_blobs.is_empty()
    }
}

struct WriteLock(PathBuf);

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct Kb {
    dir: Option<PathBuf>,
    manifest: Manifest,
    state: KbState,
    /// hash → index of the authoritative successful record.
    authoritative: HashMap<String, usize>,
    writable: bool,
    _lock: Option<WriteLock>,
    /// Blobs held by in-memory knowledge bases.
    mem_blobs: HashMap<String, Vec<u8>>,
}

fn empty_manifest(config: KbConfig) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        digest_algorithm: DIGEST_ALGORITHM.to_string(),
        config,
        files: FILES
            .iter()
            .map(|f| (f.to_string(), FileChain::default()))
            .collect(),
    }
}

fn empty_state() -> KbState {
    KbState {
        entries: IndexMap::new(),
        edges: IndexMap::new(),
        executions: Vec::new(),
        samples: Vec::new(),
    }
}

impl Kb {
    /// Writable knowledge base that lives only in memory.
    pub fn in_memory() -> Self {
        Self::in_memory_with(KbConfig::default())
    }

    pub fn in_memory_with(config: KbConfig) -> Self {
        Kb {
            dir: None,
            manifest: empty_manifest(config),
            state: empty_state(),
            authoritative: HashMap::new(),
            writable: true,
            _lock: None,
            mem_blobs: HashMap::new(),
        }
    }

    /// Creates the directory layout. Existing knowledge bases are left alone.
    pub fn init(dir: &Path, config: KbConfig) -> Result<(), KbError> {
        let manifest_path = dir.join(MANIFEST);
        if manifest_path.exists() {
            return Ok(());
        }
        fs::create_dir_all(dir.join("objects")).map_err(io_err(dir))?;
        for f in FILES {
            let p = dir.join(f);
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(io_err(&p))?;
        }
        write_manifest(dir, &empty_manifest(config))
    }

    /// Read-only handle.
    pub fn open(dir: &Path) -> Result<Self, KbError> {
        Self::load(dir, false)
    }

    /// Handle holding the single-writer lock.
    pub fn open_writer(dir: &Path) -> Result<Self, KbError> {
        Self::load(dir, true)
    }

    fn load(dir: &Path, writable: bool) -> Result<Self, KbError> {
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.exists() {
            return Err(KbError::NotInitialized(dir.to_path_buf()));
        }
        let lock = if writable { Some(acquire_lock(dir)?) } else { None };
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| KbError::Corrupt {
            file: MANIFEST.into(),
            detail: e.to_string(),
        })?;
        if manifest.digest_algorithm != DIGEST_ALGORITHM {
            return Err(KbError::AlgorithmMismatch(manifest.digest_algorithm));
        }
        let mut kb = Kb {
            dir: Some(dir.to_path_buf()),
            manifest,
            state: empty_state(),
            authoritative: HashMap::new(),
            writable,
            _lock: lock,
            mem_blobs: HashMap::new(),
        };
        for e in kb.read_file::<KbNodeEntry>(ENTRIES)? {
            kb.state.entries.insert(e.id.clone(), e);
        }
        for e in kb.read_file::<KbEdge>(EDGES)? {
            kb.state.edges.insert(e.key(), e);
        }
        for r in kb.read_file::<ExecutionRecord>(EXECUTIONS)? {
            kb.index_execution(r);
        }
        kb.state.samples = kb.read_file(SAMPLES)?;
        Ok(kb)
    }

    fn read_file<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, KbError> {
        let dir = self.dir.as_ref().expect("on-disk knowledge base");
        let path = dir.join(name);
        let expected = self.manifest.files.get(name).cloned().unwrap_or_default();
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && expected.lines == 0 => {
                return Ok(Vec::new())
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let mut chain = String::new();
        let mut out = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if n as u64 >= expected.lines {
                // written after the manifest was last updated
                return Err(KbError::Corrupt {
                    file: name.into(),
                    detail: format!("unexpected line {} beyond manifest count {}", n + 1, expected.lines),
                });
            }
            chain = canon::chain_digest(&chain, &line);
            out.push(serde_json::from_str(&line).map_err(|e| KbError::Corrupt {
                file: name.into(),
                detail: format!("line {}: {e}", n + 1),
            })?);
        }
        if out.len() as u64 != expected.lines || chain != expected.chain {
            return Err(KbError::Corrupt {
                file: name.into(),
                detail: "manifest digest mismatch".into(),
            });
        }
        Ok(out)
    }

    fn append<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), KbError> {
        if !self.writable {
            return Err(KbError::ReadOnly);
        }
        let line = serde_json::to_string(value).expect("records serialize");
        let fc = self.manifest.files.entry(name.to_string()).or_default();
        fc.chain = canon::chain_digest(&fc.chain, &line);
        fc.lines += 1;
        if let Some(dir) = &self.dir {
            let path = dir.join(name);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            writeln!(f, "{line}").map_err(io_err(&path))?;
            f.sync_data().map_err(io_err(&path))?;
            write_manifest(dir, &self.manifest)?;
        }
        Ok(())
    }

    fn index_execution(&mut self, r: ExecutionRecord) {
        let i = self.state.executions.len();
        if r.succeeded() {
            self.authoritative.insert(r.hash.clone(), i);
        }
        self.state.executions.push(r);
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn config(&self) -> &KbConfig {
        &self.manifest.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn is_writable(&self) -> bool {
        self.writable
    }

    pub fn state(&self) -> &KbState {
        &self.state
    }

    pub fn entries(&self) -> impl Iterator<Item = &KbNodeEntry> {
        self.state.entries.values()
    }

    pub fn entry(&self, id: &str) -> Option<&KbNodeEntry> {
        self.state.entries.get(id)
    }

    pub fn edges(&self) -> impl Iterator<Item = &KbEdge> {
        self.state.edges.values()
    }

    /// Stores an entry; re-registering an identical one changes nothing. New
    /// sources or scopes for a known representation supersede the old line.
    pub fn register_subgraph(&mut self, entry: KbNodeEntry) -> Result<String, KbError> {
        let id = entry.representation.id();
        let merged = match self.state.entries.get(&id) {
            Some(existing) => {
                let mut m = existing.clone();
                let before = (m.scopes.len(), m.sources.len());
                m.scopes.extend(entry.scopes.iter().copied());
                for s in entry.sources {
                    if !m.sources.contains(&s) {
                        m.sources.push(s);
                    }
                }
                if (m.scopes.len(), m.sources.len()) == before {
                    return Ok(id);
                }
                m
            }
            None => KbNodeEntry { id: id.clone(), ..entry },
        };
        self.append(ENTRIES, &merged)?;
        self.state.entries.insert(id.clone(), merged);
        Ok(id)
    }

    /// Appends an edge unless an identical one is already stored under its key.
    pub fn upsert_edge(&mut self, edge: KbEdge) -> Result<bool, KbError> {
        let key = edge.key();
        if self.state.edges.get(&key) == Some(&edge) {
            return Ok(false);
        }
        self.append(EDGES, &edge)?;
        self.state.edges.insert(key, edge);
        Ok(true)
    }

    /// Authoritative successful record for `hash`.
    pub fn lookup_execution(&self, hash: &str) -> Option<&ExecutionRecord> {
        self.authoritative.get(hash).map(|&i| &self.state.executions[i])
    }

    pub fn executions(&self) -> &[ExecutionRecord] {
        &self.state.executions
    }

    /// Copies `files` (output name, file on disk) into the object store, fills in
    /// their digests and appends the record.
    pub fn record_execution(
        &mut self,
        mut record: ExecutionRecord,
        files: &[(String, String, PathBuf)],
    ) -> Result<ExecutionRecord, KbError> {
        if !self.writable {
            return Err(KbError::ReadOnly);
        }
        for (name, rel, path) in files {
            let (digest, size) = self.put_blob(path)?;
            record.outputs.insert(
                name.clone(),
                StoredOutput {
                    path: rel.clone(),
                    digest,
                    size,
                },
            );
        }
        self.append(EXECUTIONS, &record)?;
        self.index_execution(record.clone());
        Ok(record)
    }

    pub fn record_sample(&mut self, sample: AccuracySample) -> Result<(), KbError> {
        if !sample.error.is_finite() || sample.error < 0.0 {
            return Err(KbError::Corrupt {
                file: SAMPLES.into(),
                detail: format!("error metric must be a non-negative number, got {}", sample.error),
            });
        }
        self.append(SAMPLES, &sample)?;
        self.state.samples.push(sample);
        Ok(())
    }

    pub fn samples(&self) -> &[AccuracySample] {
        &self.state.samples
    }

    pub fn accuracy_stats(&self, binding: &str) -> AccuracyStats {
        let errs: Vec<f64> = self
            .state
            .samples
            .iter()
            .filter(|s| s.binding == binding)
            .map(|s| s.error)
            .collect();
        if errs.is_empty() {
            return AccuracyStats {
                count: 0,
                mean: None,
                max: None,
            };
        }
        AccuracyStats {
            count: errs.len(),
            mean: Some(errs.iter().sum::<f64>() / errs.len() as f64),
            max: Some(errs.iter().copied().fold(f64::MIN, f64::max)),
        }
    }

    pub fn stats(&self) -> KbStats {
        let count = |pred: &dyn Fn(&KbEdge) -> bool| self.edges().filter(|e| pred(e)).count();
        KbStats {
            entries: self.state.entries.len(),
            equivalence_edges: count(&|e| e.kind == EdgeKind::Equivalence),
            known_edges: count(&|e| e.status == Some(EdgeStatus::Known)),
            hypothesized_edges: count(&|e| e.status == Some(EdgeStatus::Hypothesized)),
            subgraph_edges: count(&|e| e.kind == EdgeKind::SubgraphOf),
            executions: self.state.executions.len(),
            authoritative_hashes: self.authoritative.len(),
            samples: self.state.samples.len(),
            blobs: self.blob_digests().len(),
        }
    }
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), KbError> {
    let path = dir.join(MANIFEST);
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))
}

fn acquire_lock(dir: &Path) -> Result<WriteLock, KbError> {
    let path = dir.join(LOCK);
    for _ in 0..2 {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = write!(f, "{}", std::process::id());
                return Ok(WriteLock(path));
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                if lock_is_stale(&path) {
                    let _ = fs::remove_file(&path);
                    continue;
                }
                return Err(KbError::Locked(path));
            }
            Err(e) => return Err(io_err(&path)(e)),
        }
    }
    Err(KbError::Locked(path))
}

/// A lock whose owner process no longer exists.
fn lock_is_stale(path: &Path) -> bool {
    let Ok(text) = fs::read_to_string(path) else {
        return false;
    };
    let Ok(pid) = text.trim().parse::<u32>() else {
        return false;
    };
    let proc = Path::new("/proc");
    proc.is_dir() && !proc.join(pid.to_string()).exists()
}
