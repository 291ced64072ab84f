//! Axiomatic and population-level scoring of counterfactual generators.
//!
//! Every generator is wrapped as an [`Adapter`] with one contract,
//! `counterfactual(x, pa, pa_cf, seed)`, so the exact oracle, the
//! ignore-intervention control and the trained models are scored by the
//! same code.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cftrain::{ParentPredictor, PredictorKind};
use crate::error::{Error, Result};
use crate::format::{pgm_difference_bytes, write_bytes};
use crate::pipeline::{TrainedModel, PARENTS};
use crate::rng::{self, streams};
use crate::scm::{Intervention, Value};
use crate::synthpop::{self, Dataset, NoiseRecord, PIXELS, SIDE};

/// Composition cycle counts reported by default.
pub const CYCLES: [usize; 3] = [1, 5, 10];

pub trait Adapter: Sync {
    fn name(&self) -> String;

    /// Counterfactual images for rows of `x` (`n × 256`).
    fn counterfactual(&self, x: &[f64], pa: &[Vec<Value>], pa_cf: &[Vec<Value>], seed: u64) -> Result<Vec<f64>>;
}

/// Renders the ground-truth process with each sample's recorded noise.
/// Row `r` of every call is sample `ids[r]`.
pub struct OracleAdapter<'a> {
    pub noise: &'a NoiseRecord,
    pub ids: Vec<usize>,
}

impl Adapter for OracleAdapter<'_> {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn counterfactual(&self, x: &[f64], pa: &[Vec<Value>], pa_cf: &[Vec<Value>], _seed: u64) -> Result<Vec<f64>> {
        check(x, pa, pa_cf)?;
        if pa_cf.len() != self.ids.len() {
            return Err(Error::Shape(format!("{} rows for {} sample ids", pa_cf.len(), self.ids.len())));
        }
        let parts = pa_cf
            .par_iter()
            .zip(&self.ids)
            .map(|(row, &id)| {
                let (y, t, i) = synthpop::unpack_parents(row)?;
                synthpop::oracle_image(self.noise, id, y, t, i)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.concat())
    }
}

/// Negative control: returns its input unchanged.
pub struct IgnoreAdapter;

impl Adapter for IgnoreAdapter {
    fn name(&self) -> String {
        "ignore".into()
    }

    fn counterfactual(&self, x: &[f64], pa: &[Vec<Value>], pa_cf: &[Vec<Value>], _seed: u64) -> Result<Vec<f64>> {
        check(x, pa, pa_cf)?;
        Ok(x.to_vec())
    }
}

pub struct ModelAdapter<'a> {
    pub label: String,
    pub model: &'a TrainedModel,
    pub pi: f64,
}

impl Adapter for ModelAdapter<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn counterfactual(&self, x: &[f64], pa: &[Vec<Value>], pa_cf: &[Vec<Value>], seed: u64) -> Result<Vec<f64>> {
        self.model.counterfactual_images(x, pa, pa_cf, self.pi, seed)
    }
}

fn check(x: &[f64], pa: &[Vec<Value>], pa_cf: &[Vec<Value>]) -> Result<()> {
    if pa.len() != pa_cf.len() || x.len() != pa.len() * PIXELS {
        return Err(Error::Shape(format!(
            "{} image values, {} parent rows, {} counterfactual rows",
            x.len(),
            pa.len(),
            pa_cf.len()
        )));
    }
    Ok(())
}

/// Mean over samples of the per-sample L1 distance.
pub fn mean_l1(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() / PIXELS;
    if n == 0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>() / n as f64
}

/// Mean L1 between `x` and its `m`-fold null counterfactual; zero for `m = 0`.
pub fn composition_metric(adapter: &dyn Adapter, x: &[f64], pa: &[Vec<Value>], m: usize, seed: u64) -> Result<f64> {
    let mut cur = x.to_vec();
    for k in 0..m {
        cur = adapter.counterfactual(&cur, pa, pa, rng::mix(seed, k as u64))?;
    }
    Ok(mean_l1(x, &cur))
}

/// Mean L1 between `x` and the result of intervening to `pa_cf` and back.
pub fn reversibility_metric(
    adapter: &dyn Adapter,
    x: &[f64],
    pa: &[Vec<Value>],
    pa_cf: &[Vec<Value>],
    seed: u64,
) -> Result<f64> {
    let there = adapter.counterfactual(x, pa, pa_cf, rng::mix(seed, 0))?;
    let back = adapter.counterfactual(&there, pa_cf, pa, rng::mix(seed, 1))?;
    Ok(mean_l1(x, &back))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectMetric {
    /// Median absolute error; lower is better.
    Mae,
    /// Classification accuracy; higher is better.
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effectiveness {
    pub metric: EffectMetric,
    pub value: f64,
}

impl Effectiveness {
    /// Whether `self` is strictly better than `other`.
    pub fn beats(&self, other: &Effectiveness) -> bool {
        match self.metric {
            EffectMetric::Mae => self.value < other.value,
            EffectMetric::Accuracy => self.value > other.value,
        }
    }
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores how well predictor `psi` recovers intervened `targets` from
/// counterfactual images `x_cf`.
pub fn effectiveness_metric(psi: &ParentPredictor, x_cf: &[f64], targets: &[f64]) -> Result<Effectiveness> {
    let pred = psi.predict(x_cf)?;
    if pred.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), targets.len())));
    }
    Ok(match psi.kind {
        PredictorKind::Continuous { .. } => {
            let mut err: Vec<f64> = pred.iter().zip(targets).map(|(p, t)| (p - t).abs()).collect();
            Effectiveness {
                metric: EffectMetric::Mae,
                value: median(&mut err),
            }
        }
        PredictorKind::Categorical { .. } => Effectiveness {
            metric: EffectMetric::Accuracy,
            value: pred.iter().zip(targets).filter(|(p, t)| p == t).count() as f64 / targets.len().max(1) as f64,
        },
    })
}

/// `(mean_a − mean_b) / s_pooled` with the pooled sample standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Precondition(format!(
            "Cohen's d needs two samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ss = v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
        (m, ss)
    };
    let (ma, ssa) = stats(a);
    let (mb, ssb) = stats(b);
    let pooled = ((ssa + ssb) / (a.len() + b.len() - 2) as f64).sqrt();
    if !(pooled > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok((ma - mb) / pooled)
}

/// One intervened parent and the counterfactual parent rows it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub parent: usize,
    /// Intervened values, one per row.
    pub values: Vec<Value>,
    pub rows: Vec<Vec<Value>>,
}

/// Per-parent interventions drawn from the observed marginal. Downstream
/// parents follow the true generating process with each sample's recorded
/// noise, so every adapter is asked for the same counterfactual.
pub fn plan_queries(data: &Dataset, noise: &NoiseRecord, ids: &[usize], seed: u64) -> Result<Vec<Query>> {
    if data.is_empty() {
        return Err(Error::Precondition("no samples to evaluate".into()));
    }
    (0..PARENTS.len())
        .map(|k| {
            let picks = ids
                .par_iter()
                .enumerate()
                .map(|(r, &id)| {
                    let mut g = rng::stream(rng::mix(seed, k as u64), streams::INTERVENTION, r as u64);
                    let v = data.parents(g.gen_range(0..data.len()))[k].clone();
                    let iv = Intervention::hard([(PARENTS[k], v.clone())]);
                    let pair = synthpop::oracle_counterfactual(data, noise, id, &iv)?;
                    let row = PARENTS
                        .iter()
                        .map(|p| pair.counterfactual.value(p).cloned())
                        .collect::<Result<Vec<_>>>()?;
                    Ok((v, row))
                })
                .collect::<Result<Vec<_>>>()?;
            let (values, rows) = picks.into_iter().unzip();
            Ok(Query { parent: k, values, rows })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub adapter: String,
    /// Keyed by the number of null cycles.
    pub composition_l1: BTreeMap<usize, f64>,
    pub effectiveness: BTreeMap<String, Effectiveness>,
    pub reversibility_l1: BTreeMap<String, f64>,
    pub oracle_l1: BTreeMap<String, f64>,
    /// Predicted intervened attribute, oracle population versus this
    /// adapter's population; absent when a group has zero variance.
    pub cohens_d: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub samples: usize,
    pub seed: u64,
    pub predictors_from: String,
    pub adapters: Vec<SoundnessReport>,
    /// Parents on which a control matched or beat the oracle.
    pub control_violations: Vec<String>,
}

/// Inputs shared by every adapter in a suite run.
pub struct Suite<'a> {
    pub data: &'a Dataset,
    pub noise: &'a NoiseRecord,
    pub ids: Vec<usize>,
    pub predictors: &'a [ParentPredictor],
    pub seed: u64,
}

fn target(v: &Value) -> f64 {
    match v {
        Value::Category(c) => *c as f64,
        Value::Scalar(s) => *s,
        Value::Tensor(_) => f64::NAN,
    }
}

impl Suite<'_> {
    pub fn images(&self) -> Vec<f64> {
        self.ids.iter().flat_map(|&k| self.data.image(k).iter().copied()).collect()
    }

    pub fn parents(&self) -> Vec<Vec<Value>> {
        self.ids.iter().map(|&k| self.data.parents(k)).collect()
    }

    pub fn oracle(&self) -> OracleAdapter<'_> {
        OracleAdapter {
            noise: self.noise,
            ids: self.ids.clone(),
        }
    }

    /// Scores each adapter; the oracle populations anchor `oracle_l1` and
    /// Cohen's d.
    pub fn run(&self, adapters: &[&dyn Adapter], cycles: &[usize]) -> Result<(SuiteReport, Vec<Outputs>)> {
        if self.predictors.len() != PARENTS.len() {
            return Err(Error::Precondition(format!("{} predictors for {} parents", self.predictors.len(), PARENTS.len())));
        }
        let x = self.images();
        let pa = self.parents();
        let queries = plan_queries(self.data, self.noise, &self.ids, self.seed)?;
        let oracle = self.oracle();
        let truth: Vec<Vec<f64>> = queries
            .iter()
            .map(|q| oracle.counterfactual(&x, &pa, &q.rows, self.seed))
            .collect::<Result<_>>()?;
        let truth_pred: Vec<Vec<f64>> = queries
            .iter()
            .zip(&truth)
            .map(|(q, img)| self.predictors[q.parent].predict(img))
            .collect::<Result<_>>()?;
        let mut reports = Vec::with_capacity(adapters.len());
        let mut outputs = Vec::with_capacity(adapters.len());
        for a in adapters {
            let mut r = SoundnessReport {
                adapter: a.name(),
                composition_l1: BTreeMap::new(),
                effectiveness: BTreeMap::new(),
                reversibility_l1: BTreeMap::new(),
                oracle_l1: BTreeMap::new(),
                cohens_d: BTreeMap::new(),
            };
            for &m in cycles {
                r.composition_l1.insert(m, composition_metric(*a, &x, &pa, m, rng::mix(self.seed, 100 + m as u64))?);
            }
            let mut images = Vec::with_capacity(queries.len());
            for (qi, q) in queries.iter().enumerate() {
                let name = PARENTS[q.parent].to_string();
                let s = rng::mix(self.seed, 200 + qi as u64);
                let cf = a.counterfactual(&x, &pa, &q.rows, s)?;
                if cf.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("{} counterfactual for {name}", a.name())));
                }
                let targets: Vec<f64> = q.values.iter().map(target).collect();
                let psi = &self.predictors[q.parent];
                r.effectiveness.insert(name.clone(), effectiveness_metric(psi, &cf, &targets)?);
                r.oracle_l1.insert(name.clone(), mean_l1(&cf, &truth[qi]));
                r.reversibility_l1.insert(
                    name.clone(),
                    reversibility_metric(*a, &x, &pa, &q.rows, rng::mix(self.seed, 300 + qi as u64))?,
                );
                if matches!(psi.kind, PredictorKind::Continuous { .. }) {
                    let d = match cohens_d(&truth_pred[qi], &psi.predict(&cf)?) {
                        Ok(d) => Some(d),
                        Err(Error::ZeroVariance) => None,
                        Err(e) => return Err(e),
                    };
                    r.cohens_d.insert(name, d);
                }
                images.push(cf);
            }
            reports.push(r);
            outputs.push(Outputs {
                adapter: a.name(),
                counterfactuals: images,
            });
        }
        let control_violations = control_violations(&reports);
        Ok((
            SuiteReport {
                samples: self.ids.len(),
                seed: self.seed,
                predictors_from: String::new(),
                adapters: reports,
                control_violations,
            },
            outputs,
        ))
    }
}

/// Counterfactual images each adapter produced, one set per query.
pub struct Outputs {
    pub adapter: String,
    pub counterfactuals: Vec<Vec<f64>>,
}

/// Parents on which the ignore control is not strictly worse than the oracle.
pub fn control_violations(reports: &[SoundnessReport]) -> Vec<String> {
    let find = |n: &str| reports.iter().find(|r| r.adapter == n);
    let (Some(oracle), Some(ignore)) = (find("oracle"), find("ignore")) else {
        return Vec::new();
    };
    PARENTS
        .iter()
        .filter(|p| match (oracle.effectiveness.get(**p), ignore.effectiveness.get(**p)) {
            (Some(o), Some(i)) => !o.beats(i),
            _ => false,
        })
        .map(|p| p.to_string())
        .collect()
}

impl SuiteReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Long format: `adapter,metric,key,value`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["adapter", "metric", "key", "value"]).map_err(err)?;
        for r in &self.adapters {
            let mut put = |metric: &str, key: String, v: Option<f64>| {
                let value = v.map(|v| format!("{v:?}")).unwrap_or_default();
                w.write_record([r.adapter.as_str(), metric, key.as_str(), value.as_str()])
            };
            for (m, v) in &r.composition_l1 {
                put("composition_l1", m.to_string(), Some(*v)).map_err(err)?;
            }
            for (k, e) in &r.effectiveness {
                let metric = match e.metric {
                    EffectMetric::Mae => "effectiveness_mae",
                    EffectMetric::Accuracy => "effectiveness_accuracy",
                };
                put(metric, k.clone(), Some(e.value)).map_err(err)?;
            }
            for (k, v) in &r.reversibility_l1 {
                put("reversibility_l1", k.clone(), Some(*v)).map_err(err)?;
            }
            for (k, v) in &r.oracle_l1 {
                put("oracle_l1", k.clone(), Some(*v)).map_err(err)?;
            }
            for (k, v) in &r.cohens_d {
                put("cohens_d", k.clone(), *v).map_err(err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn adapter(&self, name: &str) -> Option<&SoundnessReport> {
        self.adapters.iter().find(|r| r.adapter == name)
    }
}

/// Tiles signed difference images (counterfactual minus factual) of the
/// first `count` samples side by side; zero change is grey 128.
pub fn difference_grid(x: &[f64], cf: &[f64], count: usize) -> Vec<u8> {
    let n = (x.len() / PIXELS).min(count);
    let diff: Vec<f64> = x.iter().zip(cf).map(|(a, b)| b - a).collect();
    let scale = diff[..n * PIXELS].iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let width = SIDE * n.max(1);
    let mut tiled = vec![0.0; SIDE * width];
    for s in 0..n {
        for r in 0..SIDE {
            for c in 0..SIDE {
                tiled[r * width + s * SIDE + c] = diff[s * PIXELS + r * SIDE + c];
            }
        }
    }
    pgm_difference_bytes(SIDE, width, &tiled, scale)
}

/// Writes `<adapter>_<parent>.pgm` difference grids into `dir`.
pub fn write_grids(dir: &Path, x: &[f64], outputs: &[Outputs], count: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for o in outputs {
        for (k, cf) in o.counterfactuals.iter().enumerate() {
            write_bytes(dir.join(format!("{}_{}.pgm", o.adapter, PARENTS[k])), &difference_grid(x, cf, count))?;
        }
    }
    Ok(())
}
