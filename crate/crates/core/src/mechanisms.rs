//! Invertible mechanisms for low-dimensional attributes and their
//! maximum-likelihood fitting.
//!
//! [`AffineFlowMechanism`] is a conditional location-scale flow
//! `x = T(loc(pa) + exp(logscale(pa))·u)` with `u ~ N(0, 1)` and a fixed
//! elementwise bijection `T` (identity, exp, or a scaled sigmoid) that maps
//! the real line onto the variable's support. [`CategoricalMechanism`] is the
//! Gumbel-max construction with exact posterior-Gumbel abduction.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Bound, ParamFn, ParamSet};
use crate::rng::{self, streams, StreamRng};
use crate::scm::{ConstantMechanism, Mechanism, Noise, Value};

pub const LOG_SCALE_MIN: f64 = -5.0;
pub const LOG_SCALE_MAX: f64 = 2.0;

/// How one parent value enters a mechanism's input vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParentFeature {
    Continuous,
    Categorical(usize),
}

/// Parent encoding: standardized scalars and one-hot categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub features: Vec<ParentFeature>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureMap {
    pub fn identity(features: Vec<ParentFeature>) -> Self {
        let n = features.len();
        FeatureMap {
            features,
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn width(&self) -> usize {
        self.features
            .iter()
            .map(|f| match f {
                ParentFeature::Continuous => 1,
                ParentFeature::Categorical(k) => *k,
            })
            .sum()
    }

    /// Sets standardization statistics from observed parent rows.
    pub fn fit(&mut self, rows: &[Vec<Value>]) {
        for (j, f) in self.features.iter().enumerate() {
            if *f != ParentFeature::Continuous {
                continue;
            }
            let xs: Vec<f64> = rows.iter().filter_map(|r| r[j].as_scalar()).collect();
            let n = xs.len().max(1) as f64;
            let m = xs.iter().sum::<f64>() / n;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            self.mean[j] = m;
            self.std[j] = if v > 1e-24 { v.sqrt() } else { 1.0 };
        }
    }

    pub fn encode_into(&self, pa: &[Value], out: &mut Vec<f64>) -> Result<()> {
        if pa.len() != self.features.len() {
            return Err(Error::Arity {
                expected: self.features.len(),
                got: pa.len(),
            });
        }
        for (j, (f, v)) in self.features.iter().zip(pa).enumerate() {
            match (f, v) {
                (ParentFeature::Continuous, Value::Scalar(x)) => {
                    out.push((x - self.mean[j]) / self.std[j])
                }
                (ParentFeature::Categorical(k), Value::Category(c)) if c < k => {
                    out.extend((0..*k).map(|i| if i == *c { 1.0 } else { 0.0 }))
                }
                _ => return Err(Error::Shape(format!("parent {j} has unexpected value {v:?}"))),
            }
        }
        Ok(())
    }

    pub fn encode(&self, pa: &[Value]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width());
        self.encode_into(pa, &mut out)?;
        Ok(out)
    }
}

/// Fixed output bijection of an affine flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Transform {
    Identity,
    /// `x = exp(s)`, support `(0, ∞)`.
    Exp,
    /// `x = lo + (hi − lo)·sigmoid(s)`, support `(lo, hi)`.
    Sigmoid { lo: f64, hi: f64 },
}

impl Transform {
    pub fn apply(&self, s: f64) -> f64 {
        match *self {
            Transform::Identity => s,
            Transform::Exp => s.exp(),
            Transform::Sigmoid { lo, hi } => lo + (hi - lo) / (1.0 + (-s).exp()),
        }
    }

    pub fn invert(&self, x: f64) -> Result<f64> {
        let s = match *self {
            Transform::Identity => x,
            Transform::Exp => x.ln(),
            Transform::Sigmoid { lo, hi } => {
                let p = (x - lo) / (hi - lo);
                (p / (1.0 - p)).ln()
            }
        };
        if s.is_finite() && x.is_finite() {
            Ok(s)
        } else {
            Err(Error::NonFinite(format!("inverse transform at x = {x}")))
        }
    }

    /// `ln |dT/ds|` at `s`.
    pub fn log_jacobian(&self, s: f64) -> f64 {
        match *self {
            Transform::Identity => 0.0,
            Transform::Exp => s,
            Transform::Sigmoid { lo, hi } => {
                // ln σ(s) + ln(1 − σ(s)) = −softplus(−s) − softplus(s)
                (hi - lo).ln() - softplus(-s) - softplus(s)
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Fitting options shared by mechanisms and predictors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Rows at or above this count are fit in minibatches.
    pub full_batch_below: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            adam: AdamConfig::default(),
            epochs: 2000,
            batch_size: 256,
            full_batch_below: 10_000,
            seed: 0,
        }
    }
}

/// Conditional location-scale flow for a scalar attribute.
#[derive(Debug, Clone)]
pub struct AffineFlowMechanism {
    pub inputs: FeatureMap,
    pub transform: Transform,
    pub params: ParamSet,
    loc: ParamFn,
    logscale: ParamFn,
}

impl AffineFlowMechanism {
    pub fn new(inputs: FeatureMap, transform: Transform, hidden: Option<usize>, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, streams::INIT, 0);
        let w = inputs.width();
        let loc = ParamFn::new(&mut params, "loc", w, 1, hidden, 0.1, &mut r);
        let logscale = ParamFn::new(&mut params, "logscale", w, 1, hidden, 0.1, &mut r);
        AffineFlowMechanism {
            inputs,
            transform,
            params,
            loc,
            logscale,
        }
    }

    /// `loc = w·pa + b`, constant `logscale`, identity transform, unstandardized inputs.
    pub fn linear(weights: &[f64], bias: f64, logscale: f64) -> Self {
        let mut m = AffineFlowMechanism::new(
            FeatureMap::identity(vec![ParentFeature::Continuous; weights.len()]),
            Transform::Identity,
            None,
            0,
        );
        let ids = m.loc.slot_ids();
        m.params.get_mut(ids[0]).copy_from_slice(weights);
        m.params.get_mut(ids[1])[0] = bias;
        let ids = m.logscale.slot_ids();
        m.params.get_mut(ids[0]).iter_mut().for_each(|v| *v = 0.0);
        m.params.get_mut(ids[1])[0] = logscale;
        m
    }

    pub fn with_transform(mut self, t: Transform) -> Self {
        self.transform = t;
        self
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Tape graph for `(loc, logscale)` of a batch of encoded parents.
    fn heads(&self, tape: &mut Tape, p: &Bound, x: Var) -> (Var, Var) {
        let loc = self.loc.apply(tape, p, x);
        let raw = self.logscale.apply(tape, p, x);
        let ls = tape.clamp(raw, LOG_SCALE_MIN, LOG_SCALE_MAX);
        (loc, ls)
    }

    /// Location and clamped log-scale at one parent configuration.
    pub fn loc_logscale(&self, pa: &[Value]) -> Result<(f64, f64)> {
        let feats = self.inputs.encode(pa)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(1, feats.len(), feats);
        let (loc, ls) = self.heads(&mut tape, &p, x);
        Ok((tape.scalar(loc), tape.scalar(ls)))
    }

    pub fn forward_scalar(&self, pa: &[Value], u: f64) -> Result<f64> {
        let (loc, ls) = self.loc_logscale(pa)?;
        Ok(self.transform.apply(loc + ls.exp() * u))
    }

    pub fn inverse_scalar(&self, pa: &[Value], x: f64) -> Result<f64> {
        let s = self.transform.invert(x)?;
        let (loc, ls) = self.loc_logscale(pa)?;
        let u = (s - loc) / ls.exp();
        if u.is_finite() {
            Ok(u)
        } else {
            Err(Error::NonFinite("affine inverse".into()))
        }
    }

    /// Mean negative log-likelihood over rows, as a tape node.
    fn nll_node(&self, tape: &mut Tape, p: &Bound, feats: &[f64], s: &[f64], logjac: f64) -> Var {
        let n = s.len();
        let w = self.inputs.width();
        let x = tape.constant(n, w, feats.to_vec());
        let (loc, ls) = self.heads(tape, p, x);
        let target = tape.constant(n, 1, s.to_vec());
        let diff = tape.sub(target, loc);
        let neg = tape.scale(ls, -1.0);
        let inv = tape.exp(neg);
        let u = tape.mul(diff, inv);
        let u2 = tape.square(u);
        let half = tape.scale(u2, 0.5);
        let per = tape.add(half, ls);
        let mean = tape.mean(per);
        tape.offset(mean, 0.5 * (2.0 * PI).ln() + logjac / n.max(1) as f64)
    }

    /// Mean NLL of `(parents, x)` rows.
    pub fn nll(&self, rows: &[(Vec<Value>, f64)]) -> Result<f64> {
        let (feats, s, lj) = self.prepare(rows)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let v = self.nll_node(&mut tape, &p, &feats, &s, lj);
        Ok(tape.scalar(v))
    }

    fn prepare(&self, rows: &[(Vec<Value>, f64)]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let mut feats = Vec::with_capacity(rows.len() * self.inputs.width());
        let mut s = Vec::with_capacity(rows.len());
        let mut lj = 0.0;
        for (pa, x) in rows {
            self.inputs.encode_into(pa, &mut feats)?;
            let si = self.transform.invert(*x)?;
            lj += self.transform.log_jacobian(si);
            s.push(si);
        }
        Ok((feats, s, lj))
    }

    /// NLL and its gradient with respect to the flat parameter vector.
    pub fn nll_and_grad(&self, rows: &[(Vec<Value>, f64)]) -> Result<(f64, Vec<f64>)> {
        let (feats, s, lj) = self.prepare(rows)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let v = self.nll_node(&mut tape, &p, &feats, &s, lj);
        let g = tape.backward(v);
        Ok((tape.scalar(v), self.params.gather(&p, &g)))
    }

    /// Maximum-likelihood fit; returns the per-epoch NLL trace.
    ///
    /// Input standardization is refit from the rows first. An epoch whose
    /// full-data NLL would rise by more than 1e-6 is rejected and retried with
    /// half the step size, so the trace is non-increasing.
    pub fn fit_mle(&mut self, rows: &[(Vec<Value>, f64)], cfg: &FitConfig) -> Result<Vec<f64>> {
        if rows.len() < 2 * self.param_count() {
            return Err(Error::Precondition(format!(
                "{} rows cannot fit {} parameters (need at least {})",
                rows.len(),
                self.param_count(),
                2 * self.param_count()
            )));
        }
        let pa_rows: Vec<Vec<Value>> = rows.iter().map(|r| r.0.clone()).collect();
        self.inputs.fit(&pa_rows);
        let this = self.clone();
        let params = fit_loop(self.params.values.clone(), rows.len(), cfg, |theta, idx| {
            let mut m = this.clone();
            m.params.values.copy_from_slice(theta);
            match idx {
                None => m.nll(rows).map(|v| (v, Vec::new())),
                Some(ix) => {
                    let batch: Vec<(Vec<Value>, f64)> = ix.iter().map(|&k| rows[k].clone()).collect();
                    m.nll_and_grad(&batch)
                }
            }
        })?;
        self.params.values = params.0;
        Ok(params.1)
    }

    fn to_doc(&self) -> serde_json::Value {
        serde_json::json!({
            "family": "affine",
            "transform": self.transform,
            "hidden": self.loc.hidden,
            "inputs": self.inputs,
            "params": self.params.values,
        })
    }

    /// Rebuilds from the JSON written by [`Mechanism::describe`].
    pub fn from_doc(doc: &serde_json::Value) -> Result<Self> {
        let inputs: FeatureMap = field(doc, "inputs")?;
        let transform: Transform = field(doc, "transform")?;
        let hidden: Option<usize> = field(doc, "hidden")?;
        let params: Vec<f64> = field(doc, "params")?;
        let mut m = AffineFlowMechanism::new(inputs, transform, hidden, 0);
        if params.len() != m.params.len() {
            return Err(Error::Format(format!(
                "affine mechanism expects {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params.values = params;
        Ok(m)
    }
}

/// Rebuilds a mechanism from its `describe` JSON. Knows the `affine`,
/// `categorical` and `constant` families.
pub fn mechanism_from_doc(doc: &serde_json::Value) -> Result<Arc<dyn Mechanism>> {
    let family: String = field(doc, "family")?;
    Ok(match family.as_str() {
        "affine" => Arc::new(AffineFlowMechanism::from_doc(doc)?),
        "categorical" => Arc::new(CategoricalMechanism::from_doc(doc)?),
        "constant" => Arc::new(ConstantMechanism(field(doc, "value")?)),
        other => return Err(Error::Format(format!("no loader for mechanism family `{other}`"))),
    })
}

pub(crate) fn field<T: serde::de::DeserializeOwned>(doc: &serde_json::Value, key: &str) -> Result<T> {
    let v = doc.get(key).cloned().unwrap_or(serde_json::Value::Null);
    serde_json::from_value(v).map_err(|e| Error::Format(format!("mechanism field `{key}`: {e}")))
}

/// Shared epoch loop with step acceptance. `eval(theta, None)` returns the
/// full-data loss; `eval(theta, Some(rows))` the minibatch loss and gradient.
pub(crate) fn fit_loop(
    mut theta: Vec<f64>,
    n: usize,
    cfg: &FitConfig,
    eval: impl Fn(&[f64], Option<&[usize]>) -> Result<(f64, Vec<f64>)>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let all: Vec<usize> = (0..n).collect();
    let mut opt = Adam::new(cfg.adam, theta.len());
    let mut current = eval(&theta, None)?.0;
    if !current.is_finite() {
        return Err(Error::Divergence("initial loss is not finite".into()));
    }
    let mut trace = vec![current];
    let mut scale = 1.0;
    for epoch in 0..cfg.epochs {
        let batches: Vec<Vec<usize>> = if n < cfg.full_batch_below {
            vec![all.clone()]
        } else {
            let mut r = rng::stream(cfg.seed, streams::MINIBATCH, epoch as u64);
            let mut perm = all.clone();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
            perm.chunks(cfg.batch_size.max(1)).map(|c| c.to_vec()).collect()
        };
        let mut accepted = false;
        for _attempt in 0..12 {
            let mut trial = theta.clone();
            let mut trial_opt = opt.clone();
            trial_opt.cfg.lr = cfg.adam.lr * scale;
            for b in &batches {
                let (_, g) = eval(&trial, Some(b))?;
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence(format!("non-finite gradient at epoch {epoch}")));
                }
                trial_opt.step(&mut trial, &g);
            }
            let loss = eval(&trial, None)?.0;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("loss became {loss} at epoch {epoch}")));
            }
            if loss <= current + 1e-6 {
                theta = trial;
                opt = trial_opt;
                opt.cfg.lr = cfg.adam.lr;
                current = loss;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        trace.push(current);
        if !accepted {
            break;
        }
        scale = (scale * 2.0).min(1.0);
    }
    Ok((theta, trace))
}

impl Mechanism for AffineFlowMechanism {
    fn arity(&self) -> usize {
        self.inputs.features.len()
    }

    fn forward(&self, parents: &[Value], noise: &Noise) -> Result<Value> {
        match noise {
            Noise::Scalar(u) => Ok(Value::Scalar(self.forward_scalar(parents, *u)?)),
            other => Err(Error::Shape(format!("affine mechanism got noise {other:?}"))),
        }
    }

    fn sample_noise(&self, rng: &mut StreamRng) -> Noise {
        Noise::Scalar(rng::normal(rng))
    }

    fn abduct(&self, parents: &[Value], value: &Value, _seed: u64) -> Result<Noise> {
        let x = value
            .as_scalar()
            .ok_or_else(|| Error::Shape("affine mechanism needs a scalar value".into()))?;
        Ok(Noise::Scalar(self.inverse_scalar(parents, x)?))
    }

    fn describe(&self) -> serde_json::Value {
        self.to_doc()
    }
}

/// Gumbel-max mechanism `x = argmax(logits(pa) + g)`.
#[derive(Debug, Clone)]
pub struct CategoricalMechanism {
    pub k: usize,
    pub inputs: FeatureMap,
    pub params: ParamSet,
    logits: ParamFn,
}

impl CategoricalMechanism {
    pub fn new(k: usize, inputs: FeatureMap, hidden: Option<usize>, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, streams::INIT, 1);
        let logits = ParamFn::new(&mut params, "logits", inputs.width(), k, hidden, 0.1, &mut r);
        CategoricalMechanism {
            k,
            inputs,
            params,
            logits,
        }
    }

    /// Root mechanism with fixed logits.
    pub fn with_logits(logits: &[f64]) -> Self {
        let mut m = CategoricalMechanism::new(logits.len(), FeatureMap::identity(vec![]), None, 0);
        let b = m.logits.output_bias();
        m.params.get_mut(b).copy_from_slice(logits);
        m
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn logits(&self, pa: &[Value]) -> Result<Vec<f64>> {
        let feats = self.inputs.encode(pa)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(1, feats.len(), feats);
        let y = self.logits.apply(&mut tape, &p, x);
        Ok(tape.value(y).to_vec())
    }

    fn nll_node(&self, tape: &mut Tape, p: &Bound, feats: &[f64], onehot: Vec<f64>, n: usize) -> Var {
        let x = tape.constant(n, self.inputs.width(), feats.to_vec());
        let y = self.logits.apply(tape, p, x);
        let lp = tape.log_softmax(y);
        let picked = tape.mul_const(lp, onehot);
        let s = tape.sum(picked);
        tape.scale(s, -1.0 / n.max(1) as f64)
    }

    fn prepare(&self, rows: &[(Vec<Value>, usize)]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut feats = Vec::new();
        let mut onehot = vec![0.0; rows.len() * self.k];
        for (i, (pa, c)) in rows.iter().enumerate() {
            if *c >= self.k {
                return Err(Error::OutOfRange(format!("category {c} of {}", self.k)));
            }
            self.inputs.encode_into(pa, &mut feats)?;
            onehot[i * self.k + c] = 1.0;
        }
        Ok((feats, onehot))
    }

    pub fn nll(&self, rows: &[(Vec<Value>, usize)]) -> Result<f64> {
        let (feats, onehot) = self.prepare(rows)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let v = self.nll_node(&mut tape, &p, &feats, onehot, rows.len());
        Ok(tape.scalar(v))
    }

    pub fn nll_and_grad(&self, rows: &[(Vec<Value>, usize)]) -> Result<(f64, Vec<f64>)> {
        let (feats, onehot) = self.prepare(rows)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let v = self.nll_node(&mut tape, &p, &feats, onehot, rows.len());
        let g = tape.backward(v);
        Ok((tape.scalar(v), self.params.gather(&p, &g)))
    }

    pub fn fit_mle(&mut self, rows: &[(Vec<Value>, usize)], cfg: &FitConfig) -> Result<Vec<f64>> {
        if rows.len() < 2 * self.param_count() {
            return Err(Error::Precondition(format!(
                "{} rows cannot fit {} parameters",
                rows.len(),
                self.param_count()
            )));
        }
        let pa_rows: Vec<Vec<Value>> = rows.iter().map(|r| r.0.clone()).collect();
        self.inputs.fit(&pa_rows);
        let this = self.clone();
        let (theta, trace) = fit_loop(self.params.values.clone(), rows.len(), cfg, |theta, idx| {
            let mut m = this.clone();
            m.params.values.copy_from_slice(theta);
            match idx {
                None => m.nll(rows).map(|v| (v, Vec::new())),
                Some(ix) => {
                    let batch: Vec<(Vec<Value>, usize)> = ix.iter().map(|&k| rows[k].clone()).collect();
                    m.nll_and_grad(&batch)
                }
            }
        })?;
        self.params.values = theta;
        Ok(trace)
    }

    pub fn from_doc(doc: &serde_json::Value) -> Result<Self> {
        let k: usize = field(doc, "k")?;
        let inputs: FeatureMap = field(doc, "inputs")?;
        let hidden: Option<usize> = field(doc, "hidden")?;
        let params: Vec<f64> = field(doc, "params")?;
        let mut m = CategoricalMechanism::new(k, inputs, hidden, 0);
        if params.len() != m.params.len() {
            return Err(Error::Format(format!(
                "categorical mechanism expects {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params.values = params;
        Ok(m)
    }
}

/// Posterior Gumbel noise given that `observed` won the argmax.
///
/// The maximum of `logits + g` is Gumbel-distributed at `logsumexp(logits)`
/// and independent of which class attains it; the remaining perturbed logits
/// are Gumbels truncated below that maximum.
pub fn posterior_gumbels(logits: &[f64], observed: usize, rng: &mut StreamRng) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let top = lse + rng::gumbel(rng);
    logits
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            if j == observed {
                top - l
            } else {
                let free = l + rng::gumbel(rng);
                // −ln(e^{−top} + e^{−free}), computed stably.
                let hi = top.min(free);
                let lo = top.max(free);
                let mut v = hi - (-(lo - hi)).exp().ln_1p();
                if v >= top {
                    v = top - top.abs().max(1.0) * 1e-12;
                }
                v - l
            }
        })
        .collect()
}

impl Mechanism for CategoricalMechanism {
    fn arity(&self) -> usize {
        self.inputs.features.len()
    }

    fn forward(&self, parents: &[Value], noise: &Noise) -> Result<Value> {
        let Noise::Gumbel(g) = noise else {
            return Err(Error::Shape(format!("categorical mechanism got noise {noise:?}")));
        };
        if g.len() != self.k {
            return Err(Error::Arity {
                expected: self.k,
                got: g.len(),
            });
        }
        let l = self.logits(parents)?;
        let mut best = 0;
        for j in 1..self.k {
            if l[j] + g[j] > l[best] + g[best] {
                best = j;
            }
        }
        Ok(Value::Category(best))
    }

    fn sample_noise(&self, rng: &mut StreamRng) -> Noise {
        Noise::Gumbel((0..self.k).map(|_| rng::gumbel(rng)).collect())
    }

    fn abduct(&self, parents: &[Value], value: &Value, seed: u64) -> Result<Noise> {
        let c = value
            .as_category()
            .ok_or_else(|| Error::Shape("categorical mechanism needs a category".into()))?;
        if c >= self.k {
            return Err(Error::OutOfRange(format!("category {c} of {}", self.k)));
        }
        let l = self.logits(parents)?;
        let mut r = rng::stream(seed, streams::ABDUCTION, 0);
        Ok(Noise::Gumbel(posterior_gumbels(&l, c, &mut r)))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "family": "categorical",
            "k": self.k,
            "hidden": self.logits.hidden,
            "inputs": self.inputs,
            "params": self.params.values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn affine(loc: f64, logscale: f64) -> AffineFlowMechanism {
        AffineFlowMechanism::linear(&[], loc, logscale)
    }

    #[test]
    fn affine_forward_formula() {
        let m = affine(1.0, 2f64.ln());
        assert!((m.forward_scalar(&[], 1.0).unwrap() - 3.0).abs() < 1e-12);
        assert!((m.forward_scalar(&[], 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((m.inverse_scalar(&[], 3.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn categorical_argmax() {
        let m = CategoricalMechanism::with_logits(&[10.0, 0.0, 0.0]);
        let v = m.forward(&[], &Noise::Gumbel(vec![0.0; 3])).unwrap();
        assert_eq!(v, Value::Category(0));
    }

    #[test]
    fn categorical_posterior_reproduces_observed_class() {
        let m = CategoricalMechanism::with_logits(&[2.0, -1.0, 0.5, 8.0]);
        for c in 0..4 {
            for seed in 0..250u64 {
                let u = m.abduct(&[], &Value::Category(c), seed).unwrap();
                assert_eq!(m.forward(&[], &u).unwrap(), Value::Category(c));
            }
        }
    }

    #[test]
    fn scale_is_clamped() {
        let m = affine(0.0, 10.0);
        let (_, ls) = m.loc_logscale(&[]).unwrap();
        assert_eq!(ls, LOG_SCALE_MAX);
        let m = affine(0.0, -10.0);
        assert_eq!(m.loc_logscale(&[]).unwrap().1, LOG_SCALE_MIN);
    }

    #[test]
    fn transforms_invert() {
        for t in [
            Transform::Identity,
            Transform::Exp,
            Transform::Sigmoid { lo: 0.0, hi: 255.0 },
        ] {
            for s in [-3.0, -0.2, 0.0, 1.7, 4.0] {
                assert!((t.invert(t.apply(s)).unwrap() - s).abs() < 1e-9, "{t:?} {s}");
            }
        }
        assert!(Transform::Exp.invert(-1.0).is_err());
        assert!(Transform::Sigmoid { lo: 0.0, hi: 1.0 }.invert(1.5).is_err());
    }

    #[test]
    fn too_few_rows_is_a_precondition_error() {
        let mut m = AffineFlowMechanism::new(
            FeatureMap::identity(vec![]),
            Transform::Identity,
            None,
            0,
        );
        assert!(m.param_count() >= 1);
        let rows = vec![(vec![], 1.0)];
        assert!(matches!(m.fit_mle(&rows, &FitConfig::default()), Err(Error::Precondition(_))));
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut m = AffineFlowMechanism::new(
            FeatureMap::identity(vec![ParentFeature::Continuous, ParentFeature::Categorical(2)]),
            Transform::Exp,
            Some(3),
            5,
        );
        let rows: Vec<(Vec<Value>, f64)> = (0..7)
            .map(|k| {
                (
                    vec![Value::Scalar(0.3 * k as f64 - 1.0), Value::Category(k % 2)],
                    0.5 + 0.2 * k as f64,
                )
            })
            .collect();
        let mut r = rng::stream(9, 0, 0);
        for v in m.params.values.iter_mut() {
            *v = 0.5 * rng::normal(&mut r);
        }
        let (_, g) = m.nll_and_grad(&rows).unwrap();
        let h = 1e-5;
        for k in 0..m.params.len() {
            let mut a = m.clone();
            a.params.values[k] += h;
            let mut b = m.clone();
            b.params.values[k] -= h;
            let fd = (a.nll(&rows).unwrap() - b.nll(&rows).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn described_mechanisms_reload() {
        let a = AffineFlowMechanism::new(
            FeatureMap::identity(vec![ParentFeature::Continuous]),
            Transform::Sigmoid { lo: 0.0, hi: 255.0 },
            Some(4),
            3,
        );
        let c = CategoricalMechanism::new(3, FeatureMap::identity(vec![]), None, 4);
        let k = ConstantMechanism(Value::Scalar(2.5));
        let parents = [vec![Value::Scalar(0.7)], vec![], vec![]];
        let noises = [Noise::Scalar(0.3), Noise::Gumbel(vec![0.1, -0.4, 0.9]), Noise::None];
        let ms: [&dyn Mechanism; 3] = [&a, &c, &k];
        for ((m, pa), u) in ms.iter().zip(&parents).zip(&noises) {
            let back = mechanism_from_doc(&m.describe()).unwrap();
            assert_eq!(back.describe(), m.describe());
            assert_eq!(back.forward(pa, u).unwrap(), m.forward(pa, u).unwrap());
        }
        assert!(mechanism_from_doc(&serde_json::json!({ "family": "opaque" })).is_err());
    }

    proptest! {
        #[test]
        fn affine_roundtrip(w in -3.0f64..3.0, b in -2.0f64..2.0, ls in -4.0f64..1.5,
                            pa in -5.0f64..5.0, u in -6.0f64..6.0) {
            let m = AffineFlowMechanism::linear(&[w], b, ls);
            let parents = [Value::Scalar(pa)];
            let x = m.forward_scalar(&parents, u).unwrap();
            let back = m.inverse_scalar(&parents, x).unwrap();
            prop_assert!((back - u).abs() <= 1e-9 * u.abs().max(1.0));
        }
    }
}
