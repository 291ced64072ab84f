//! Structural causal models: graphs of mechanisms, sampling, interventions
//! and the abduction / action / prediction counterfactual procedure.

mod graph;
mod json;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub use graph::{NodeDef, ScmGraph};
pub use json::{worlds_to_csv, GraphDoc, NodeDoc};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Scalar(f64),
    Category(usize),
    Tensor(Vec<f64>),
}

impl Value {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_category(&self) -> Option<usize> {
        match self {
            Value::Category(c) => Some(*c),
            _ => None,
        }
    }

    pub fn as_tensor(&self) -> Option<&[f64]> {
        match self {
            Value::Tensor(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VariableKind {
    Continuous,
    Categorical { labels: Vec<String> },
    Tensor { shape: Vec<usize> },
}

impl VariableKind {
    pub fn categorical(k: usize) -> Self {
        VariableKind::Categorical {
            labels: (0..k).map(|c| c.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default)]
    pub units: String,
}

impl VariableSpec {
    pub fn new(name: impl Into<String>, kind: VariableKind) -> Self {
        VariableSpec {
            name: name.into(),
            kind,
            units: String::new(),
        }
    }

    pub fn continuous(name: impl Into<String>) -> Self {
        VariableSpec::new(name, VariableKind::Continuous)
    }

    /// Checks that `v` lies in this variable's support.
    pub fn validate(&self, v: &Value) -> Result<()> {
        match (&self.kind, v) {
            (VariableKind::Continuous, Value::Scalar(x)) if x.is_finite() => Ok(()),
            (VariableKind::Continuous, Value::Scalar(_)) => {
                Err(Error::NonFinite(format!("value of `{}`", self.name)))
            }
            (VariableKind::Categorical { labels }, Value::Category(c)) => {
                if *c < labels.len() {
                    Ok(())
                } else {
                    Err(Error::OutOfRange(format!(
                        "category {c} outside the {} classes of `{}`",
                        labels.len(),
                        self.name
                    )))
                }
            }
            (VariableKind::Tensor { shape }, Value::Tensor(t)) => {
                let n: usize = shape.iter().product();
                if t.len() != n {
                    Err(Error::Shape(format!(
                        "`{}` expects {} values, got {}",
                        self.name,
                        n,
                        t.len()
                    )))
                } else if t.iter().any(|x| !x.is_finite()) {
                    Err(Error::NonFinite(format!("tensor `{}`", self.name)))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::Shape(format!(
                "value {:?} does not match the kind of `{}`",
                short(v),
                self.name
            ))),
        }
    }

    /// Parses a textual value: decimal for continuous, label or index for categorical.
    pub fn parse(&self, text: &str) -> Result<Value> {
        let text = text.trim();
        match &self.kind {
            VariableKind::Continuous => text
                .parse::<f64>()
                .map(Value::Scalar)
                .map_err(|_| Error::Config(format!("`{text}` is not a number for `{}`", self.name))),
            VariableKind::Categorical { labels } => {
                if let Some(c) = labels.iter().position(|l| l == text) {
                    return Ok(Value::Category(c));
                }
                let c: usize = text.parse().map_err(|_| {
                    Error::Config(format!("`{text}` is not a category of `{}`", self.name))
                })?;
                let v = Value::Category(c);
                self.validate(&v)?;
                Ok(v)
            }
            VariableKind::Tensor { .. } => Err(Error::Config(format!(
                "tensor variable `{}` cannot be set from text",
                self.name
            ))),
        }
    }

    pub fn format(&self, v: &Value) -> String {
        match (&self.kind, v) {
            (VariableKind::Categorical { labels }, Value::Category(c)) => {
                labels.get(*c).cloned().unwrap_or_else(|| c.to_string())
            }
            (_, Value::Scalar(x)) => format!("{x:?}"),
            (_, Value::Category(c)) => c.to_string(),
            (_, Value::Tensor(t)) => format!("<tensor {}>", t.len()),
        }
    }
}

fn short(v: &Value) -> String {
    match v {
        Value::Tensor(t) => format!("Tensor(len {})", t.len()),
        other => format!("{other:?}"),
    }
}

/// Exogenous noise attached to one node of a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Noise {
    /// No noise (constant mechanisms).
    None,
    Scalar(f64),
    /// One standard Gumbel per category.
    Gumbel(Vec<f64>),
    Latent(LatentNoise),
}

/// Noise of a hierarchical latent mechanism.
///
/// `z` is the latent stack when it is known (always for the exogenous-prior
/// variant, where it *is* noise; after abduction for the mediator variant);
/// `u_z` are the per-layer standardized latent noises; `u_x` the pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentNoise {
    pub z: Option<Vec<Vec<f64>>>,
    pub u_z: Option<Vec<Vec<f64>>>,
    pub u_x: Vec<f64>,
}

/// A structural assignment `x := f(pa, u)`.
pub trait Mechanism: Send + Sync + fmt::Debug {
    /// Number of parent values the mechanism consumes.
    fn arity(&self) -> usize;

    fn forward(&self, parents: &[Value], noise: &Noise) -> Result<Value>;

    fn sample_noise(&self, rng: &mut StreamRng) -> Noise;

    /// Whether [`Mechanism::abduct`] is available.
    fn invertible(&self) -> bool {
        true
    }

    /// Infers noise consistent with `value` given `parents`. Stochastic
    /// mechanisms draw a posterior sample determined by `seed`.
    fn abduct(&self, parents: &[Value], value: &Value, seed: u64) -> Result<Noise>;

    /// Prediction step: the value under counterfactual parents, given the
    /// factual parents, factual value and abducted noise.
    fn counterfactual(
        &self,
        _parents: &[Value],
        _value: &Value,
        noise: &Noise,
        cf_parents: &[Value],
    ) -> Result<Value> {
        self.forward(cf_parents, noise)
    }

    /// JSON description used when a graph is written out.
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "family": "opaque" })
    }
}

/// Hard intervention mechanism `x := c`.
#[derive(Debug, Clone)]
pub struct ConstantMechanism(pub Value);

impl Mechanism for ConstantMechanism {
    fn arity(&self) -> usize {
        0
    }

    fn forward(&self, _parents: &[Value], _noise: &Noise) -> Result<Value> {
        Ok(self.0.clone())
    }

    fn sample_noise(&self, _rng: &mut StreamRng) -> Noise {
        Noise::None
    }

    fn abduct(&self, _parents: &[Value], _value: &Value, _seed: u64) -> Result<Noise> {
        Ok(Noise::None)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "family": "constant", "value": self.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Observed,
    Sampled,
    Counterfactual,
}

/// One causal world: endogenous values together with their exogenous noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub endogenous: BTreeMap<String, Value>,
    pub exogenous: BTreeMap<String, Noise>,
    pub provenance: Provenance,
}

impl World {
    pub fn value(&self, name: &str) -> Result<&Value> {
        self.endogenous
            .get(name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.value(name)?
            .as_scalar()
            .ok_or_else(|| Error::Shape(format!("`{name}` is not a scalar")))
    }
}

#[derive(Debug, Clone)]
pub enum Action {
    /// Hard intervention: the node is cut from its parents and set to a constant.
    Constant(Value),
    /// Soft intervention: the mechanism is replaced, parents and noise kept.
    Mechanism(Arc<dyn Mechanism>),
}

/// A set of `do(...)` assignments; each target appears at most once.
#[derive(Debug, Clone, Default)]
pub struct Intervention {
    pub targets: BTreeMap<String, Action>,
}

impl Intervention {
    pub fn none() -> Self {
        Intervention::default()
    }

    pub fn hard(pairs: impl IntoIterator<Item = (impl Into<String>, Value)>) -> Self {
        Intervention {
            targets: pairs
                .into_iter()
                .map(|(k, v)| (k.into(), Action::Constant(v)))
                .collect(),
        }
    }

    pub fn set(mut self, name: impl Into<String>, v: Value) -> Self {
        self.targets.insert(name.into(), Action::Constant(v));
        self
    }

    pub fn soft(mut self, name: impl Into<String>, m: Arc<dyn Mechanism>) -> Self {
        self.targets.insert(name.into(), Action::Mechanism(m));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Parses `name=value[,name=value]`; an empty string is the null intervention.
    pub fn parse(text: &str, graph: &ScmGraph) -> Result<Self> {
        let mut iv = Intervention::none();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`{part}` is not of the form name=value")))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(Error::Config(format!("`{part}` has an empty variable name")));
            }
            let spec = graph
                .spec(name)
                .ok_or_else(|| Error::UnknownVariable(name.to_string()))?;
            let v = spec.parse(value)?;
            spec.validate(&v)?;
            if iv.targets.contains_key(name) {
                return Err(Error::Config(format!("`{name}` is intervened on twice")));
            }
            iv.targets.insert(name.to_string(), Action::Constant(v));
        }
        Ok(iv)
    }
}
