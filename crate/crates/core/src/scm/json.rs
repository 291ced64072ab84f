use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Mechanism, NodeDef, Noise, ScmGraph, VariableKind, VariableSpec, World};
use crate::error::{Error, Result};

/// `{"nodes": [{"name", "kind", "parents", "mechanism"}, ...]}`
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDoc {
    pub nodes: Vec<NodeDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub name: String,
    /// `continuous`, `categorical` or `tensor`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub units: String,
    #[serde(default)]
    pub parents: Vec<String>,
    pub mechanism: serde_json::Value,
}

impl NodeDoc {
    pub fn spec(&self) -> Result<VariableSpec> {
        let kind = match self.kind.as_str() {
            "continuous" => VariableKind::Continuous,
            "categorical" => VariableKind::Categorical {
                labels: self
                    .labels
                    .clone()
                    .ok_or_else(|| Error::Format(format!("`{}` needs labels", self.name)))?,
            },
            "tensor" => VariableKind::Tensor {
                shape: self
                    .shape
                    .clone()
                    .ok_or_else(|| Error::Format(format!("`{}` needs a shape", self.name)))?,
            },
            other => return Err(Error::Format(format!("unknown variable kind `{other}`"))),
        };
        Ok(VariableSpec {
            name: self.name.clone(),
            kind,
            units: self.units.clone(),
        })
    }
}

impl GraphDoc {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("graph JSON: {e}")))
    }

    /// Builds a graph, turning each node's `mechanism` object into a
    /// mechanism through `resolve`.
    pub fn build(
        &self,
        mut resolve: impl FnMut(&NodeDoc, &VariableSpec) -> Result<Arc<dyn Mechanism>>,
    ) -> Result<ScmGraph> {
        let defs = self
            .nodes
            .iter()
            .map(|n| {
                let spec = n.spec()?;
                let mechanism = resolve(n, &spec)?;
                Ok(NodeDef {
                    spec,
                    parents: n.parents.clone(),
                    mechanism,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ScmGraph::new(defs)
    }

    pub fn from_graph(g: &ScmGraph) -> Self {
        let nodes = g
            .specs()
            .map(|s| {
                let (kind, labels, shape) = match &s.kind {
                    VariableKind::Continuous => ("continuous", None, None),
                    VariableKind::Categorical { labels } => ("categorical", Some(labels.clone()), None),
                    VariableKind::Tensor { shape } => ("tensor", None, Some(shape.clone())),
                };
                NodeDoc {
                    name: s.name.clone(),
                    kind: kind.into(),
                    labels,
                    shape,
                    units: s.units.clone(),
                    parents: g
                        .parents_of(&s.name)
                        .unwrap_or_default()
                        .into_iter()
                        .map(String::from)
                        .collect(),
                    mechanism: g.mechanism(&s.name).map(|m| m.describe()).unwrap_or_default(),
                }
            })
            .collect();
        GraphDoc { nodes }
    }
}

/// One CSV row per world: endogenous columns, then `u_<name>` noise columns.
/// Tensor-valued nodes are omitted; they are stored as CFT1 tensors instead.
pub fn worlds_to_csv(graph: &ScmGraph, worlds: &[World]) -> Result<String> {
    let specs: Vec<&VariableSpec> = graph
        .specs()
        .filter(|s| !matches!(s.kind, VariableKind::Tensor { .. }))
        .collect();
    let mut header: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    for s in &specs {
        match &s.kind {
            VariableKind::Categorical { labels } => {
                header.extend((0..labels.len()).map(|c| format!("u_{}[{c}]", s.name)))
            }
            _ => header.push(format!("u_{}", s.name)),
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(csv_err)?;
    for world in worlds {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for s in &specs {
            row.push(s.format(world.value(&s.name)?));
        }
        for s in &specs {
            let width = match &s.kind {
                VariableKind::Categorical { labels } => labels.len(),
                _ => 1,
            };
            match world.exogenous.get(&s.name) {
                Some(Noise::Scalar(u)) => row.push(format!("{u:?}")),
                Some(Noise::Gumbel(g)) => row.extend(g.iter().map(|u| format!("{u:?}"))),
                _ => row.extend(std::iter::repeat_n(String::new(), width)),
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
