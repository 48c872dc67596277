use std::collections::BTreeMap;

use serde::Serialize;

use super::token::{self, Segment};
use super::{substitute, InputSource, ModelError, WorkflowDescription};

/// Functional-only projection of a node. Node name, resources, annotations and
/// non-functional environment are dropped; references appear as the path of the
/// referenced output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AbstractNodeView {
    pub executable: String,
    pub arguments: Vec<String>,
    pub environment: BTreeMap<String, String>,
    pub inputs: Vec<InputDescriptor>,
    pub outputs: Vec<OutputDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct InputDescriptor {
    pub name: String,
    pub kind: &'static str,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct OutputDescriptor {
    pub name: String,
    pub path: String,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn abstract_view(wf: &WorkflowDescription, node: &str) -> Result<AbstractNodeView, ModelError> {
    let n = wf
        .node(node)
        .ok_or_else(|| ModelError::UnknownNode(node.to_string()))?;
    let output_path = |target: &str, output: &str| -> Result<String, ModelError> {
        wf.node(target)
            .and_then(|t| t.output(output))
            .map(|o| o.path.clone())
            .ok_or_else(|| ModelError::UnresolvedReference {
                node: node.to_string(),
                target: target.to_string(),
                output: output.to_string(),
            })
    };

    let mut arguments = Vec::with_capacity(n.command.arguments.len());
    for arg in &n.command.arguments {
        let resolved = substitute(arg, &wf.parameters, node)?;
        let segs = token::parse(&resolved).map_err(|error| ModelError::MalformedToken {
            node: node.to_string(),
            error,
        })?;
        let mut canon = String::new();
        for seg in segs {
            match seg {
                Segment::Text(t) => canon.push_str(t),
                Segment::Ref { node: t, output } => canon.push_str(&output_path(t, output)?),
                Segment::Param(_) => unreachable!("parameters substituted above"),
            }
        }
        arguments.push(normalize_ws(&canon));
    }

    let functional = n.functional_env();
    let mut environment = BTreeMap::new();
    for (k, v) in &n.command.environment {
        if functional.contains(k) {
            environment.insert(k.clone(), normalize_ws(&substitute(v, &wf.parameters, node)?));
        }
    }

    let mut inputs = Vec::with_capacity(n.inputs.len());
    for input in &n.inputs {
        let (kind, value) = match &input.source {
            // content enters the hash separately; the source location is platform detail
            InputSource::LiteralFile { .. } => ("literal-file", String::new()),
            InputSource::Parameter { key } => (
                "parameter",
                wf.parameters
                    .get(key)
                    .cloned()
                    .ok_or_else(|| ModelError::UndefinedParameter {
                        key: key.clone(),
                        node: node.to_string(),
                    })?,
            ),
            InputSource::Reference { node: t, output } => ("reference", output_path(t, output)?),
        };
        inputs.push(InputDescriptor {
            name: input.name.clone(),
            kind,
            value,
        });
    }
    inputs.sort();

    let mut outputs: Vec<OutputDescriptor> = n
        .outputs
        .iter()
        .map(|o| OutputDescriptor {
            name: o.name.clone(),
            path: o.path.clone(),
        })
        .collect();
    outputs.sort();

    Ok(AbstractNodeView {
        executable: normalize_ws(&substitute(&n.command.executable, &wf.parameters, node)?),
        arguments,
        environment,
        inputs,
        outputs,
    })
}
