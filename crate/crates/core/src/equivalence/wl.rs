use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{descriptor, EquivalenceError, Metric, SimilarityScore, SubGraph};
use crate::canon;
use crate::model::abstract_view;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    Name,
    Command,
}

impl LabelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelMode::Name => "name",
            LabelMode::Command => "command",
        }
    }
}

impl std::str::FromStr for LabelMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "name" => Ok(LabelMode::Name),
            "command" => Ok(LabelMode::Command),
            other => Err(format!("unknown label mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WlConfig {
    pub iterations: usize,
    pub mode: LabelMode,
}

impl Default for WlConfig {
    fn default() -> Self {
        WlConfig {
            iterations: 3,
            mode: LabelMode::Command,
        }
    }
}

impl WlConfig {
    pub fn new(mode: LabelMode) -> Self {
        WlConfig {
            mode,
            ..Default::default()
        }
    }

    /// Tag stored on KB edges computed with this config.
    pub fn metric_tag(&self) -> String {
        format!("jaccard+wl{}-{}", self.iterations, self.mode.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WlLabels {
    pub digest: String,
    /// Label multiset accumulated over every iteration, including the initial one.
    pub multiset: BTreeMap<String, usize>,
}

fn short(s: impl AsRef<[u8]>) -> String {
    let mut h = canon::sha256_hex(s);
    h.truncate(32);
    h
}

pub fn wl_labels(sub: &SubGraph<'_>, config: &WlConfig) -> Result<WlLabels, EquivalenceError> {
    if sub.members.is_empty() {
        return Err(EquivalenceError::EmptySubgraph);
    }
    let wf = sub.wf;
    let members: Vec<&str> = sub.members.iter().map(String::as_str).collect();
    let pos: BTreeMap<&str, usize> = members.iter().enumerate().map(|(i, n)| (*n, i)).collect();

    let mut incoming: Vec<Vec<(String, usize)>> = vec![Vec::new(); members.len()];
    let mut outgoing: Vec<Vec<(String, usize)>> = vec![Vec::new(); members.len()];
    for (ci, name) in members.iter().enumerate() {
        let node = wf
            .node(name)
            .ok_or_else(|| EquivalenceError::UnknownNode(name.to_string()))?;
        for (_, target, output) in node.references() {
            let Some(&pi) = pos.get(target) else { continue };
            let path = wf
                .node(target)
                .and_then(|t| t.output(output))
                .map(|o| o.path.as_str())
                .unwrap_or(output);
            let edge = descriptor(path);
            incoming[ci].push((edge.clone(), pi));
            outgoing[pi].push((edge, ci));
        }
    }

    let mut labels = Vec::with_capacity(members.len());
    for name in &members {
        let initial = match config.mode {
            LabelMode::Name => name.to_string(),
            LabelMode::Command => {
                let v = abstract_view(wf, name)?;
                std::iter::once(v.executable)
                    .chain(v.arguments)
                    .collect::<Vec<_>>()
                    .join("\u{1f}")
            }
        };
        labels.push(short(format!("0|{initial}")));
    }

    let mut multiset: BTreeMap<String, usize> = BTreeMap::new();
    for l in &labels {
        *multiset.entry(l.clone()).or_default() += 1;
    }
    for round in 1..=config.iterations {
        let next: Vec<String> = (0..members.len())
            .map(|i| {
                let mut ins: Vec<String> = incoming[i]
                    .iter()
                    .map(|(e, j)| format!("{e}:{}", labels[*j]))
                    .collect();
                let mut outs: Vec<String> = outgoing[i]
                    .iter()
                    .map(|(e, j)| format!("{e}:{}", labels[*j]))
                    .collect();
                ins.sort();
                outs.sort();
                short(format!("{round}|{}|<{}|>{}", labels[i], ins.join(","), outs.join(",")))
            })
            .collect();
        labels = next;
        for l in &labels {
            *multiset.entry(l.clone()).or_default() += 1;
        }
    }
    labels.sort();
    Ok(WlLabels {
        digest: canon::digest_of(&labels),
        multiset,
    })
}

pub fn wl_hash(sub: &SubGraph<'_>, config: &WlConfig) -> Result<String, EquivalenceError> {
    wl_labels(sub, config).map(|l| l.digest)
}

/// Σ min / Σ max over label counts.
pub fn multiset_jaccard(a: &BTreeMap<String, usize>, b: &BTreeMap<String, usize>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (k, &ca) in a {
        let cb = b.get(k).copied().unwrap_or(0);
        inter += ca.min(cb);
        union += ca.max(cb);
    }
    for (k, &cb) in b {
        if !a.contains_key(k) {
            union += cb;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn function_similarity(
    a: &SubGraph<'_>,
    b: &SubGraph<'_>,
    config: &WlConfig,
) -> Result<SimilarityScore, EquivalenceError> {
    let la = wl_labels(a, config)?;
    let lb = wl_labels(b, config)?;
    Ok(SimilarityScore::new(
        multiset_jaccard(&la.multiset, &lb.multiset),
        Metric::Function,
    ))
}
