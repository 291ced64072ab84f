//! Counterfactual fine-tuning: parent predictors `q_ψ(pa_k | x)`, the
//! variational mutual-information bound, and descent on the counterfactual
//! loss under a free-energy constraint with a learned multiplier.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ladder::{combine, permutation, LadderModel, HALF_LN_2PI};
use crate::mechanisms::{FeatureMap, LOG_SCALE_MAX, LOG_SCALE_MIN};
use crate::nn::{Adam, AdamConfig, Bound, ParamFn, ParamSet};
use crate::rng::{self, streams};
use crate::scm::{Intervention, ScmGraph, Value, VariableKind, VariableSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PredictorKind {
    /// Gaussian over the target standardized by `mean` and `std`.
    Continuous { mean: f64, std: f64 },
    Categorical { k: usize },
}

impl PredictorKind {
    fn outputs(&self) -> usize {
        match self {
            PredictorKind::Continuous { .. } => 2,
            PredictorKind::Categorical { k } => *k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            adam: AdamConfig::default(),
            epochs: 30,
            batch_size: 64,
            hidden: 64,
            seed: 0,
        }
    }
}

/// Variational distribution `q_ψ(pa_k | x)` of one parent given an image.
#[derive(Debug, Clone)]
pub struct ParentPredictor {
    pub name: String,
    pub kind: PredictorKind,
    pub params: ParamSet,
    net: ParamFn,
}

#[derive(Serialize, Deserialize)]
struct PredictorDoc {
    name: String,
    kind: PredictorKind,
    input: usize,
    hidden: Option<usize>,
}

/// Numeric target of a parent value: the scalar itself or the class index.
pub fn target_of(v: &Value) -> Result<f64> {
    match v {
        Value::Scalar(s) => Ok(*s),
        Value::Category(c) => Ok(*c as f64),
        Value::Tensor(_) => Err(Error::Shape("parent predictors need scalar or categorical targets".into())),
    }
}

impl ParentPredictor {
    pub fn new(name: impl Into<String>, kind: PredictorKind, input: usize, hidden: Option<usize>, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, streams::INIT, 2);
        let net = ParamFn::new(&mut params, "net", input, kind.outputs(), hidden, 0.1, &mut r);
        ParentPredictor {
            name: name.into(),
            kind,
            params,
            net,
        }
    }

    /// A predictor shaped for `spec`, standardizing against `targets`.
    pub fn for_spec(spec: &VariableSpec, targets: &[f64], input: usize, hidden: usize, seed: u64) -> Result<Self> {
        let kind = match &spec.kind {
            VariableKind::Continuous => {
                let n = targets.len().max(1) as f64;
                let mean = targets.iter().sum::<f64>() / n;
                let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
                let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                PredictorKind::Continuous { mean, std }
            }
            VariableKind::Categorical { labels } => PredictorKind::Categorical { k: labels.len() },
            VariableKind::Tensor { .. } => {
                return Err(Error::Config(format!("cannot predict tensor parent `{}`", spec.name)))
            }
        };
        Ok(Self::new(spec.name.clone(), kind, input, Some(hidden), seed))
    }

    pub fn input(&self) -> usize {
        self.net.input
    }

    /// `log q(target | x)` per row on the tape, as an `n × 1` column.
    pub fn log_prob_on_tape(&self, tape: &mut Tape, p: &Bound, x: Var, targets: &[f64]) -> Result<Var> {
        let n = tape.shape(x).0;
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
        }
        let o = self.net.apply(tape, p, x);
        match self.kind {
            PredictorKind::Continuous { mean, std } => {
                let mu = tape.slice(o, 0, 1);
                let raw = tape.slice(o, 1, 1);
                let ls = tape.clamp(raw, LOG_SCALE_MIN, LOG_SCALE_MAX);
                let t = tape.constant(n, 1, targets.iter().map(|v| (v - mean) / std).collect());
                let d = tape.sub(t, mu);
                let nls = tape.scale(ls, -1.0);
                let inv = tape.exp(nls);
                let u = tape.mul(d, inv);
                let sq = tape.square(u);
                let half = tape.scale(sq, -0.5);
                let lp = tape.sub(half, ls);
                Ok(tape.offset(lp, -(HALF_LN_2PI + std.ln())))
            }
            PredictorKind::Categorical { k } => {
                let mut mask = vec![0.0; n * k];
                for (r, &t) in targets.iter().enumerate() {
                    let c = t as usize;
                    if t < 0.0 || t.fract() != 0.0 || c >= k {
                        return Err(Error::OutOfRange(format!("class {t} for `{}`", self.name)));
                    }
                    mask[r * k + c] = 1.0;
                }
                let lsm = tape.log_softmax(o);
                let picked = tape.mul_const(lsm, mask);
                Ok(tape.sum_cols(picked))
            }
        }
    }

    fn check_rows(&self, x: &[f64]) -> Result<usize> {
        let d = self.net.input;
        if d == 0 || !x.len().is_multiple_of(d) {
            return Err(Error::Shape(format!("x length {} is not a multiple of {d}", x.len())));
        }
        Ok(x.len() / d)
    }

    pub fn log_prob(&self, x: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
        let n = self.check_rows(x)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(n, self.net.input, x.to_vec());
        let lp = self.log_prob_on_tape(&mut tape, &p, xv, targets)?;
        Ok(tape.value(lp).to_vec())
    }

    /// Point predictions: the mean in raw units, or the most probable class.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.check_rows(x)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(n, self.net.input, x.to_vec());
        let o = self.net.apply(&mut tape, &p, xv);
        let out = tape.value(o);
        let w = self.kind.outputs();
        Ok((0..n)
            .map(|r| {
                let row = &out[r * w..(r + 1) * w];
                match self.kind {
                    PredictorKind::Continuous { mean, std } => mean + std * row[0],
                    PredictorKind::Categorical { .. } => {
                        let mut best = 0;
                        for (c, v) in row.iter().enumerate() {
                            if *v > row[best] {
                                best = c;
                            }
                        }
                        best as f64
                    }
                }
            })
            .collect())
    }

    /// Mean negative log-likelihood of the rows and its gradient.
    pub fn nll_and_grad(&self, x: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = self.check_rows(x)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.constant(n, self.net.input, x.to_vec());
        let lp = self.log_prob_on_tape(&mut tape, &p, xv, targets)?;
        let m = tape.mean(lp);
        let loss = tape.scale(m, -1.0);
        let g = tape.backward(loss);
        Ok((tape.scalar(loss), self.params.gather(&p, &g)))
    }

    /// Minibatch Adam on the negative log-likelihood. Returns the mean NLL
    /// of every epoch.
    pub fn fit(&mut self, x: &[f64], targets: &[f64], cfg: &PredictorConfig) -> Result<Vec<f64>> {
        let n = self.check_rows(x)?;
        if n == 0 {
            return Err(Error::Precondition(format!("no rows to fit predictor `{}`", self.name)));
        }
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
        }
        if x.iter().chain(targets).any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite data for predictor `{}`", self.name)));
        }
        let d = self.net.input;
        let mut opt = Adam::new(cfg.adam, self.params.len());
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let order = permutation(cfg.seed, epoch as u64, n);
            let mut total = 0.0;
            for rows in order.chunks(cfg.batch_size.max(1)) {
                let xb: Vec<f64> = rows.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect();
                let tb: Vec<f64> = rows.iter().map(|&r| targets[r]).collect();
                let (f, g) = self.nll_and_grad(&xb, &tb)?;
                if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence(format!("predictor `{}` at epoch {epoch}", self.name)));
                }
                opt.step(&mut self.params.values, &g);
                total += f * rows.len() as f64;
            }
            trace.push(total / n as f64);
        }
        Ok(trace)
    }

    /// Writes `<name>.json` and the parameters under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let doc = PredictorDoc {
            name: self.name.clone(),
            kind: self.kind,
            input: self.net.input,
            hidden: self.net.hidden,
        };
        let path = dir.join(format!("{}.json", self.name));
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.params.save(dir, &format!("{}.", self.name))
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(format!("{name}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc: PredictorDoc =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut p = ParentPredictor::new(doc.name, doc.kind, doc.input, doc.hidden, 0);
        p.params.load_into(dir, &format!("{name}."))?;
        Ok(p)
    }
}

/// Fits one predictor per parent spec on `(x, parents)` rows.
///
/// Returns the predictors and their per-epoch NLL traces.
pub fn fit_predictors(
    x: &[f64],
    x_dim: usize,
    parents: &[Vec<Value>],
    specs: &[VariableSpec],
    cfg: &PredictorConfig,
) -> Result<(Vec<ParentPredictor>, Vec<Vec<f64>>)> {
    if parents.is_empty() {
        return Err(Error::Precondition("cannot fit predictors on an empty dataset".into()));
    }
    if x.len() != parents.len() * x_dim {
        return Err(Error::Shape(format!("{} image values for {} rows", x.len(), parents.len())));
    }
    let mut preds = Vec::with_capacity(specs.len());
    let mut traces = Vec::with_capacity(specs.len());
    for (k, spec) in specs.iter().enumerate() {
        let targets = parents
            .iter()
            .map(|row| {
                row.get(k)
                    .ok_or(Error::Arity {
                        expected: specs.len(),
                        got: row.len(),
                    })
                    .and_then(target_of)
            })
            .collect::<Result<Vec<f64>>>()?;
        let seed = rng::mix(cfg.seed, k as u64);
        let mut p = ParentPredictor::for_spec(spec, &targets, x_dim, cfg.hidden, seed)?;
        traces.push(p.fit(x, &targets, &PredictorConfig { seed, ..*cfg })?);
        preds.push(p);
    }
    Ok((preds, traces))
}

/// Variational lower bound `E[log q(pa | x)] + H(pa)` on the mutual
/// information between a parent and the image, with the entropy held fixed.
pub fn mi_lower_bound<T>(samples: &[T], log_q: impl Fn(&T) -> f64, entropy: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("mutual-information bound of no samples".into()));
    }
    let mean = samples.iter().map(log_q).sum::<f64>() / samples.len() as f64;
    Ok(mean + entropy)
}

/// The attribute part of the causal model: the SCM over the image's
/// parents and the encoding the ladder model sees.
#[derive(Debug, Clone)]
pub struct ParentScm {
    pub graph: ScmGraph,
    /// Parent names in the column order of parent rows.
    pub names: Vec<String>,
    pub encoder: FeatureMap,
}

impl ParentScm {
    pub fn specs(&self) -> Result<Vec<VariableSpec>> {
        self.names
            .iter()
            .map(|n| {
                self.graph
                    .spec(n)
                    .cloned()
                    .ok_or_else(|| Error::UnknownVariable(n.clone()))
            })
            .collect()
    }

    /// Counterfactual parent row under `iv`, with downstream parents
    /// recomputed through the attribute mechanisms.
    pub fn counterfactual(&self, factual: &[Value], iv: &Intervention, seed: u64) -> Result<Vec<Value>> {
        if factual.len() != self.names.len() {
            return Err(Error::Arity {
                expected: self.names.len(),
                got: factual.len(),
            });
        }
        if iv.is_empty() {
            return Ok(factual.to_vec());
        }
        let evidence = self.names.iter().cloned().zip(factual.iter().cloned()).collect();
        let w = self.graph.counterfactual(&evidence, iv, seed)?;
        self.names.iter().map(|n| w.value(n).cloned()).collect()
    }

    pub fn encode_rows(&self, rows: &[Vec<Value>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(rows.len() * self.encoder.width());
        for r in rows {
            self.encoder.encode_into(r, &mut out)?;
        }
        Ok(out)
    }
}

/// One counterfactual query per row: encoded counterfactual parents and the
/// intervened values each predictor must recover.
#[derive(Debug, Clone, PartialEq)]
pub struct CfTerm {
    pub pa_cf: Vec<f64>,
    pub targets: Vec<(usize, Vec<f64>)>,
}

/// Everything the counterfactual loss reads besides the ladder model.
#[derive(Debug, Clone, Copy)]
pub struct CfTask<'a> {
    pub scm: &'a ParentScm,
    pub predictors: &'a [ParentPredictor],
    /// Observed parent rows; interventions resample each parent from here.
    pub pool: &'a [Vec<Value>],
    pub pi: f64,
    /// Intervene on all parents at once instead of one term per parent.
    pub joint: bool,
}

impl CfTask<'_> {
    /// Draws the interventions for `rows` and pushes them through the
    /// attribute SCM. Row `q` of the batch uses stream `(seed, INTERVENTION, q)`.
    pub fn plan(&self, rows: &[&[Value]], seed: u64) -> Result<Vec<CfTerm>> {
        let k = self.predictors.len();
        if self.pool.is_empty() && k > 0 {
            return Err(Error::Precondition("empty intervention pool".into()));
        }
        let n_terms = if self.joint { k.min(1) } else { k };
        let mut terms: Vec<CfTerm> = (0..n_terms)
            .map(|t| CfTerm {
                pa_cf: Vec::with_capacity(rows.len() * self.scm.encoder.width()),
                targets: if self.joint {
                    (0..k).map(|j| (j, Vec::with_capacity(rows.len()))).collect()
                } else {
                    vec![(t, Vec::with_capacity(rows.len()))]
                },
            })
            .collect();
        for (q, row) in rows.iter().enumerate() {
            let mut r = rng::stream(seed, streams::INTERVENTION, q as u64);
            let draws: Vec<Value> = (0..k)
                .map(|j| self.pool[r.gen_range(0..self.pool.len())][j].clone())
                .collect();
            let iv_seed = rng::mix(seed, q as u64);
            if self.joint && k > 0 {
                let iv = Intervention::hard(self.scm.names.iter().cloned().zip(draws.iter().cloned()));
                let cf = self.scm.counterfactual(row, &iv, iv_seed)?;
                self.scm.encoder.encode_into(&cf, &mut terms[0].pa_cf)?;
                for (j, v) in draws.iter().enumerate() {
                    terms[0].targets[j].1.push(target_of(v)?);
                }
            } else {
                for (j, v) in draws.iter().enumerate() {
                    let iv = Intervention::hard([(self.scm.names[j].clone(), v.clone())]);
                    let cf = self.scm.counterfactual(row, &iv, iv_seed)?;
                    self.scm.encoder.encode_into(&cf, &mut terms[j].pa_cf)?;
                    terms[j].targets[0].1.push(target_of(v)?);
                }
            }
        }
        Ok(terms)
    }
}

/// Counterfactual loss and free energy of a batch, with optional gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CtEval {
    pub l_ct: f64,
    pub free_energy: f64,
    pub grad_ct: Vec<f64>,
    pub grad_fe: Vec<f64>,
}

const CT_CHUNK: usize = 16;

fn ct_chunk(
    ladder: &LadderModel,
    predictors: &[ParentPredictor],
    x: &[f64],
    pa: &[f64],
    seeds: &[u64],
    terms: &[CfTerm],
    range: (usize, usize),
    pi: f64,
    grad: bool,
) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    let (a, b) = range;
    let m = b - a;
    let (dx, dp) = (ladder.dims.x, ladder.dims.pa);
    let eps = ladder.batch_noise(&seeds[a..b]);
    let mut tape = Tape::new();
    let p = if grad {
        ladder.params.bind(&mut tape)
    } else {
        ladder.params.bind_frozen(&mut tape)
    };
    let qs: Vec<Bound> = predictors.iter().map(|q| q.params.bind_frozen(&mut tape)).collect();
    let xv = tape.constant(m, dx, x[a * dx..b * dx].to_vec());
    let pv = tape.constant(m, dp, pa[a * dp..b * dp].to_vec());
    let pass = ladder.factual(&mut tape, &p, xv, pv, &eps);
    let fe = tape.mean(pass.free_energy);
    let mut total: Option<Var> = None;
    for term in terms {
        let pc = tape.constant(m, dp, term.pa_cf[a * dp..b * dp].to_vec());
        let (xc, _, _) = ladder.counterfactual_pass(&mut tape, &p, &pass, xv, pc, pi);
        for (k, targets) in &term.targets {
            let lp = predictors[*k].log_prob_on_tape(&mut tape, &qs[*k], xc, &targets[a..b])?;
            let s = tape.sum(lp);
            total = Some(match total {
                Some(t) => tape.add(t, s),
                None => s,
            });
        }
    }
    let l_ct = total.map(|t| tape.scale(t, -1.0 / m as f64));
    let f = tape.scalar(fe);
    let l = l_ct.map(|v| tape.scalar(v)).unwrap_or(0.0);
    if !f.is_finite() || !l.is_finite() {
        return Err(Error::NonFinite(format!("counterfactual objective (L_CT {l}, F {f})")));
    }
    let n = ladder.params.len();
    if !grad {
        return Ok((l, f, Vec::new(), Vec::new()));
    }
    let g_fe = ladder.params.gather(&p, &tape.backward(fe));
    let g_ct = match l_ct {
        Some(v) => ladder.params.gather(&p, &tape.backward(v)),
        None => vec![0.0; n],
    };
    Ok((l, f, g_ct, g_fe))
}

/// Mean counterfactual loss `−Σ_k log q_k(p̃a_k | x̃)` and mean free energy
/// over the rows of a batch. Row `r` draws its posterior noise from
/// `seeds[r]`; `terms` come from [`CfTask::plan`].
pub fn ct_objective(
    ladder: &LadderModel,
    predictors: &[ParentPredictor],
    x: &[f64],
    pa: &[f64],
    seeds: &[u64],
    terms: &[CfTerm],
    pi: f64,
    grad: bool,
) -> Result<CtEval> {
    let n = ladder.check_batch(x, pa)?;
    if seeds.len() != n {
        return Err(Error::Shape(format!("{} seeds for {n} samples", seeds.len())));
    }
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::OutOfRange(format!("mixture weight {pi}")));
    }
    for t in terms {
        ladder.check_batch(x, &t.pa_cf)?;
        if t.targets.iter().any(|(k, v)| *k >= predictors.len() || v.len() != n) {
            return Err(Error::Shape("counterfactual targets do not match the batch".into()));
        }
    }
    if n == 0 {
        return Err(Error::Precondition("counterfactual loss of an empty batch".into()));
    }
    let parts: Vec<Result<(f64, f64, Vec<f64>, Vec<f64>, usize)>> = (0..n.div_ceil(CT_CHUNK))
        .into_par_iter()
        .map(|c| {
            let range = (c * CT_CHUNK, ((c + 1) * CT_CHUNK).min(n));
            let (l, f, gc, gf) = ct_chunk(ladder, predictors, x, pa, seeds, terms, range, pi, grad)?;
            Ok((l, f, gc, gf, range.1 - range.0))
        })
        .collect();
    let mut ct_parts = Vec::with_capacity(parts.len());
    let mut fe_parts = Vec::with_capacity(parts.len());
    for part in parts {
        let (l, f, gc, gf, m) = part?;
        ct_parts.push(Ok((l, gc, m)));
        fe_parts.push(Ok((f, gf, m)));
    }
    let width = if grad { ladder.params.len() } else { 0 };
    let (l_ct, grad_ct) = combine(ct_parts, n, width)?;
    let (free_energy, grad_fe) = combine(fe_parts, n, width)?;
    Ok(CtEval {
        l_ct,
        free_energy,
        grad_ct,
        grad_fe,
    })
}

const EVAL_SALT: u64 = 0xc7_e7a1;

/// Counterfactual loss over a whole dataset, deterministic given `seed`.
pub fn counterfactual_loss(
    ladder: &LadderModel,
    task: &CfTask,
    x: &[f64],
    parents: &[Vec<Value>],
    seed: u64,
) -> Result<f64> {
    Ok(evaluate(ladder, task, x, parents, seed)?.0)
}

/// `(L_CT, F_FE)` over a dataset with fixed evaluation seeds.
pub fn evaluate(
    ladder: &LadderModel,
    task: &CfTask,
    x: &[f64],
    parents: &[Vec<Value>],
    seed: u64,
) -> Result<(f64, f64)> {
    let n = parents.len();
    if n == 0 {
        return Err(Error::Precondition("counterfactual loss of an empty dataset".into()));
    }
    if task.predictors.is_empty() {
        return Ok((0.0, ladder.mean_free_energy(x, &task.scm.encode_rows(parents)?, seed)?));
    }
    let dx = ladder.dims.x;
    let (mut l, mut f) = (0.0, 0.0);
    for c in 0..n.div_ceil(256) {
        let (a, b) = (c * 256, ((c + 1) * 256).min(n));
        let rows: Vec<&[Value]> = parents[a..b].iter().map(|r| r.as_slice()).collect();
        let terms = task.plan(&rows, rng::mix(rng::mix(seed, EVAL_SALT), c as u64))?;
        let pa = task.scm.encode_rows(&parents[a..b])?;
        let seeds: Vec<u64> = (a..b).map(|r| LadderModel::eval_seed(seed, r)).collect();
        let e = ct_objective(ladder, task.predictors, &x[a * dx..b * dx], &pa, &seeds, &terms, task.pi, false)?;
        l += e.l_ct * (b - a) as f64;
        f += e.free_energy * (b - a) as f64;
    }
    Ok((l / n as f64, f / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiplierConfig {
    pub lr: f64,
    pub damping: f64,
    pub init: f64,
}

impl Default for MultiplierConfig {
    fn default() -> Self {
        MultiplierConfig {
            lr: 0.01,
            damping: 0.1,
            init: 0.0,
        }
    }
}

/// Multiplier of the constraint `F_FE ≤ c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda: f64,
    pub c: f64,
    pub lr: f64,
    pub damping: f64,
}

impl LagrangianState {
    pub fn new(c: f64, cfg: &MultiplierConfig) -> Self {
        LagrangianState {
            lambda: cfg.init.max(0.0),
            c,
            lr: cfg.lr,
            damping: cfg.damping,
        }
    }

    /// Weight on the free-energy gradient for a step at free energy `f`.
    pub fn effective(&self, f: f64) -> f64 {
        (self.lambda + self.damping * (f - self.c)).max(0.0)
    }

    /// Gradient ascent on λ, projected onto λ ≥ 0.
    pub fn update(&mut self, f: f64) {
        self.lambda = (self.lambda + self.lr * (f - self.c)).max(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pi: f64,
    pub multiplier: MultiplierConfig,
    pub joint: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            adam: AdamConfig {
                lr: 5e-4,
                ..AdamConfig::default()
            },
            epochs: 10,
            batch_size: 64,
            seed: 0,
            pi: 0.9,
            multiplier: MultiplierConfig::default(),
            joint: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    #[serde(rename = "L_CT")]
    pub l_ct: f64,
    #[serde(rename = "F_FE")]
    pub f_fe: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub trace: Vec<TraceRow>,
    pub state: LagrangianState,
    pub l_ct_before: f64,
    pub l_ct_after: f64,
    /// Mean free energy after fine-tuning, scored like `c`.
    pub f_fe_after: f64,
}

impl FinetuneReport {
    /// Whether the final free energy meets `c` up to a slack of `tol·|c|`.
    pub fn constraint_met(&self, tol: f64) -> bool {
        self.f_fe_after <= self.state.c + tol * self.state.c.abs()
    }
}

/// Writes the `(epoch, L_CT, F_FE, lambda)` trace as CSV.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Descends `L_CT + λ·F_FE` in the ladder parameters while ascending λ on
/// `F_FE − c`. Predictors and attribute mechanisms are only read.
pub fn finetune_constrained(
    ladder: &mut LadderModel,
    task: &CfTask,
    x: &[f64],
    parents: &[Vec<Value>],
    c: f64,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    let n = parents.len();
    if n == 0 {
        return Err(Error::Precondition("cannot fine-tune on an empty dataset".into()));
    }
    if !c.is_finite() {
        return Err(Error::Precondition(format!("constraint level {c}")));
    }
    let pa = task.scm.encode_rows(parents)?;
    ladder.check_batch(x, &pa).map_err(|e| match e {
        Error::NonFinite(m) => Error::Divergence(format!("{m} contains non-finite values")),
        other => other,
    })?;
    let task = CfTask { pi: cfg.pi, joint: cfg.joint, ..*task };
    let l_ct_before = counterfactual_loss(ladder, &task, x, parents, cfg.seed)?;
    let (dx, dp) = (ladder.dims.x, ladder.dims.pa);
    let mut state = LagrangianState::new(c, &cfg.multiplier);
    let mut opt = Adam::new(cfg.adam, ladder.params.len());
    let bs = cfg.batch_size.max(1);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = permutation(cfg.seed, epoch as u64, n);
        let (mut l_sum, mut f_sum) = (0.0, 0.0);
        for (b, rows) in order.chunks(bs).enumerate() {
            let step = (epoch * n.div_ceil(bs) + b) as u64;
            let step_seed = rng::mix(cfg.seed, step);
            let xb: Vec<f64> = rows.iter().flat_map(|&r| x[r * dx..(r + 1) * dx].iter().copied()).collect();
            let pb: Vec<f64> = rows.iter().flat_map(|&r| pa[r * dp..(r + 1) * dp].iter().copied()).collect();
            let prow: Vec<&[Value]> = rows.iter().map(|&r| parents[r].as_slice()).collect();
            let terms = task.plan(&prow, step_seed)?;
            let seeds: Vec<u64> = (0..rows.len() as u64).map(|k| rng::mix(step_seed, k)).collect();
            let e = ct_objective(ladder, task.predictors, &xb, &pb, &seeds, &terms, task.pi, true)?;
            let w = state.effective(e.free_energy);
            let g: Vec<f64> = e.grad_ct.iter().zip(&e.grad_fe).map(|(a, b)| a + w * b).collect();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient at epoch {epoch}")));
            }
            opt.step(&mut ladder.params.values, &g);
            state.update(e.free_energy);
            l_sum += e.l_ct * rows.len() as f64;
            f_sum += e.free_energy * rows.len() as f64;
        }
        trace.push(TraceRow {
            epoch,
            l_ct: l_sum / n as f64,
            f_fe: f_sum / n as f64,
            lambda: state.lambda,
        });
    }
    let (l_ct_after, _) = evaluate(ladder, &task, x, parents, cfg.seed)?;
    let f_fe_after = ladder.mean_free_energy(x, &pa, cfg.seed)?;
    Ok(FinetuneReport {
        trace,
        state,
        l_ct_before,
        l_ct_after,
        f_fe_after,
    })
}
