use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::{Action, ConstantMechanism, Intervention, Mechanism, Noise, Provenance, Value, VariableSpec, World};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// A node as supplied to [`ScmGraph::new`]: parents are referenced by name.
#[derive(Debug, Clone)]
pub struct NodeDef {
    pub spec: VariableSpec,
    pub parents: Vec<String>,
    pub mechanism: Arc<dyn Mechanism>,
}

impl NodeDef {
    pub fn new(spec: VariableSpec, parents: &[&str], mechanism: Arc<dyn Mechanism>) -> Self {
        NodeDef {
            spec,
            parents: parents.iter().map(|p| p.to_string()).collect(),
            mechanism,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    spec: VariableSpec,
    parents: Vec<usize>,
    mechanism: Arc<dyn Mechanism>,
}

/// An acyclic graph of named variables, each bound to one mechanism and one
/// independent noise stream. Immutable once built; interventions produce new
/// graphs.
#[derive(Debug, Clone)]
pub struct ScmGraph {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl ScmGraph {
    pub fn new(defs: Vec<NodeDef>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (k, d) in defs.iter().enumerate() {
            if index.insert(d.spec.name.clone(), k).is_some() {
                return Err(Error::DuplicateName(d.spec.name.clone()));
            }
        }
        let mut nodes = Vec::with_capacity(defs.len());
        for d in defs {
            let parents = d
                .parents
                .iter()
                .map(|p| index.get(p).copied().ok_or_else(|| Error::UnknownVariable(p.clone())))
                .collect::<Result<Vec<_>>>()?;
            if d.mechanism.arity() != parents.len() {
                return Err(Error::Arity {
                    expected: parents.len(),
                    got: d.mechanism.arity(),
                });
            }
            nodes.push(Node {
                spec: d.spec,
                parents,
                mechanism: d.mechanism,
            });
        }
        let order = topo_sort(&nodes)?;
        Ok(ScmGraph { nodes, order })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.spec.name == name)
    }

    pub fn spec(&self, name: &str) -> Option<&VariableSpec> {
        self.nodes.iter().find(|n| n.spec.name == name).map(|n| &n.spec)
    }

    pub fn specs(&self) -> impl Iterator<Item = &VariableSpec> {
        self.nodes.iter().map(|n| &n.spec)
    }

    pub fn parents_of(&self, name: &str) -> Option<Vec<&str>> {
        let k = self.index(name)?;
        Some(
            self.nodes[k]
                .parents
                .iter()
                .map(|&p| self.nodes[p].spec.name.as_str())
                .collect(),
        )
    }

    pub fn mechanism(&self, name: &str) -> Option<&Arc<dyn Mechanism>> {
        self.index(name).map(|k| &self.nodes[k].mechanism)
    }

    /// Node names, each after all of its parents; ties in declaration order.
    pub fn topological_order(&self) -> Vec<&str> {
        self.order.iter().map(|&k| self.nodes[k].spec.name.as_str()).collect()
    }

    fn parent_values(&self, k: usize, values: &[Option<Value>]) -> Vec<Value> {
        self.nodes[k]
            .parents
            .iter()
            .map(|&p| values[p].clone().expect("parents evaluated first"))
            .collect()
    }

    fn world(&self, values: Vec<Option<Value>>, noises: Vec<Noise>, provenance: Provenance) -> World {
        World {
            endogenous: self
                .nodes
                .iter()
                .zip(values)
                .map(|(n, v)| (n.spec.name.clone(), v.expect("all nodes evaluated")))
                .collect(),
            exogenous: self
                .nodes
                .iter()
                .zip(noises)
                .map(|(n, u)| (n.spec.name.clone(), u))
                .collect(),
            provenance,
        }
    }

    /// Forward-evaluates the graph for one sample index of `seed`.
    fn sample_one(&self, seed: u64, j: u64) -> Result<World> {
        let mut values: Vec<Option<Value>> = vec![None; self.nodes.len()];
        let mut noises = vec![Noise::None; self.nodes.len()];
        for &k in &self.order {
            let mut r = rng::stream(seed, streams::NODE_BASE + k as u64, j);
            let u = self.nodes[k].mechanism.sample_noise(&mut r);
            let pa = self.parent_values(k, &values);
            values[k] = Some(self.nodes[k].mechanism.forward(&pa, &u)?);
            noises[k] = u;
        }
        Ok(self.world(values, noises, Provenance::Sampled))
    }

    /// Draws `n` worlds; noise for node `k` of sample `j` comes from the
    /// stream `(seed, k, j)`, so the result is independent of parallelism.
    pub fn sample_observational(&self, seed: u64, n: usize) -> Result<Vec<World>> {
        (0..n as u64)
            .into_par_iter()
            .map(|j| self.sample_one(seed, j))
            .collect()
    }

    /// The submodel induced by `iv`. The receiver is left untouched.
    pub fn intervene(&self, iv: &Intervention) -> Result<ScmGraph> {
        let mut out = self.clone();
        for (name, action) in &iv.targets {
            let k = self
                .index(name)
                .ok_or_else(|| Error::UnknownTarget(name.clone()))?;
            match action {
                Action::Constant(v) => {
                    self.nodes[k].spec.validate(v)?;
                    out.nodes[k].parents.clear();
                    out.nodes[k].mechanism = Arc::new(ConstantMechanism(v.clone()));
                }
                Action::Mechanism(m) => {
                    if m.arity() != out.nodes[k].parents.len() {
                        return Err(Error::Arity {
                            expected: out.nodes[k].parents.len(),
                            got: m.arity(),
                        });
                    }
                    out.nodes[k].mechanism = m.clone();
                }
            }
        }
        out.order = topo_sort(&out.nodes)?;
        Ok(out)
    }

    pub fn interventional_sample(&self, iv: &Intervention, seed: u64, n: usize) -> Result<Vec<World>> {
        self.intervene(iv)?.sample_observational(seed, n)
    }

    /// Abduction: infers every node's noise from full evidence. Stochastic
    /// mechanisms draw their posterior sample from `(seed, node index)`.
    pub fn abduct(&self, evidence: &BTreeMap<String, Value>, seed: u64) -> Result<World> {
        for name in evidence.keys() {
            if self.index(name).is_none() {
                return Err(Error::UnknownVariable(name.clone()));
            }
        }
        let mut values: Vec<Option<Value>> = vec![None; self.nodes.len()];
        for (k, n) in self.nodes.iter().enumerate() {
            let v = evidence
                .get(&n.spec.name)
                .ok_or_else(|| Error::MissingEvidence(n.spec.name.clone()))?;
            n.spec.validate(v)?;
            values[k] = Some(v.clone());
        }
        let mut noises = vec![Noise::None; self.nodes.len()];
        for &k in &self.order {
            let node = &self.nodes[k];
            if !node.mechanism.invertible() {
                return Err(Error::NonInvertible(node.spec.name.clone()));
            }
            let pa = self.parent_values(k, &values);
            let v = values[k].as_ref().unwrap();
            noises[k] = node
                .mechanism
                .abduct(&pa, v, rng::mix(seed, streams::ABDUCTION + k as u64))?;
        }
        Ok(self.world(values, noises, Provenance::Observed))
    }

    /// Nodes downstream of (or equal to) any intervention target.
    fn affected(&self, iv: &Intervention) -> Result<Vec<bool>> {
        let mut hit = vec![false; self.nodes.len()];
        for name in iv.targets.keys() {
            let k = self
                .index(name)
                .ok_or_else(|| Error::UnknownTarget(name.clone()))?;
            hit[k] = true;
        }
        for &k in &self.order {
            if self.nodes[k].parents.iter().any(|&p| hit[p]) {
                hit[k] = true;
            }
        }
        Ok(hit)
    }

    /// Action and prediction for an already abducted world.
    ///
    /// Non-descendants of the targets keep their factual values bit for bit;
    /// descendants are re-evaluated by their mechanism's prediction step with
    /// the abducted noise.
    pub fn counterfactual_world(&self, factual: &World, iv: &Intervention) -> Result<World> {
        let hit = self.affected(iv)?;
        let sub = self.intervene(iv)?;
        let fact: Vec<Value> = self
            .nodes
            .iter()
            .map(|n| factual.value(&n.spec.name).cloned())
            .collect::<Result<_>>()?;
        let noises: Vec<Noise> = self
            .nodes
            .iter()
            .map(|n| {
                factual
                    .exogenous
                    .get(&n.spec.name)
                    .cloned()
                    .ok_or_else(|| Error::MissingEvidence(format!("noise of {}", n.spec.name)))
            })
            .collect::<Result<_>>()?;
        let mut values: Vec<Option<Value>> = vec![None; self.nodes.len()];
        for &k in &self.order {
            values[k] = Some(if !hit[k] {
                fact[k].clone()
            } else {
                match iv.targets.get(&self.nodes[k].spec.name) {
                    Some(Action::Constant(v)) => v.clone(),
                    Some(Action::Mechanism(_)) => {
                        let pa = sub.parent_values(k, &values);
                        sub.nodes[k].mechanism.forward(&pa, &noises[k])?
                    }
                    None => {
                        let fpa: Vec<Value> =
                            self.nodes[k].parents.iter().map(|&p| fact[p].clone()).collect();
                        let pa = self.parent_values(k, &values);
                        self.nodes[k]
                            .mechanism
                            .counterfactual(&fpa, &fact[k], &noises[k], &pa)?
                    }
                }
            });
        }
        let mut noises = noises;
        for (name, a) in &iv.targets {
            if matches!(a, Action::Constant(_)) {
                noises[self.index(name).unwrap()] = Noise::None;
            }
        }
        Ok(self.world(values, noises, Provenance::Counterfactual))
    }

    /// The three-step procedure: abduct from `evidence`, intervene, predict.
    pub fn counterfactual(
        &self,
        evidence: &BTreeMap<String, Value>,
        iv: &Intervention,
        seed: u64,
    ) -> Result<World> {
        let w = self.abduct(evidence, seed)?;
        self.counterfactual_world(&w, iv)
    }

    /// Largest relative error of re-forwarding each node from its parents and
    /// noise. Zero for a consistent world.
    pub fn consistency_error(&self, w: &World) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for &k in &self.order {
            let n = &self.nodes[k];
            let pa: Vec<Value> = n
                .parents
                .iter()
                .map(|&p| w.value(&self.nodes[p].spec.name).cloned())
                .collect::<Result<_>>()?;
            let u = w
                .exogenous
                .get(&n.spec.name)
                .ok_or_else(|| Error::MissingEvidence(n.spec.name.clone()))?;
            let got = n.mechanism.forward(&pa, u)?;
            let want = w.value(&n.spec.name)?;
            worst = worst.max(value_error(&got, want));
        }
        Ok(worst)
    }
}

fn value_error(a: &Value, b: &Value) -> f64 {
    match (a, b) {
        (Value::Scalar(x), Value::Scalar(y)) => (x - y).abs() / y.abs().max(1.0),
        (Value::Category(x), Value::Category(y)) => {
            if x == y {
                0.0
            } else {
                f64::INFINITY
            }
        }
        (Value::Tensor(x), Value::Tensor(y)) if x.len() == y.len() => x
            .iter()
            .zip(y)
            .map(|(p, q)| (p - q).abs() / q.abs().max(1.0))
            .fold(0.0, f64::max),
        _ => f64::INFINITY,
    }
}

/// Kahn's algorithm, always releasing the lowest-declared ready node.
fn topo_sort(nodes: &[Node]) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut placed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let next = (0..n).find(|&k| !placed[k] && nodes[k].parents.iter().all(|&p| placed[p]));
        match next {
            Some(k) => {
                placed[k] = true;
                order.push(k);
            }
            None => return Err(Error::Cycle(find_cycle(nodes, &placed))),
        }
    }
    Ok(order)
}

/// Walks parent links among unplaced nodes until a node repeats.
fn find_cycle(nodes: &[Node], placed: &[bool]) -> Vec<String> {
    let start = (0..nodes.len()).find(|&k| !placed[k]).unwrap_or(0);
    let mut path = vec![start];
    let mut cur = start;
    loop {
        let Some(&next) = nodes[cur].parents.iter().find(|&&p| !placed[p]) else {
            return vec![nodes[start].spec.name.clone()];
        };
        if let Some(pos) = path.iter().position(|&k| k == next) {
            let mut cyc: Vec<String> = path[pos..]
                .iter()
                .rev()
                .map(|&k| nodes[k].spec.name.clone())
                .collect();
            cyc.push(cyc[0].clone());
            return cyc;
        }
        path.push(next);
        cur = next;
    }
}
