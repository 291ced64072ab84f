//! End-to-end training on the synthetic population: the attribute SCM over
//! `(y, t, i)`, the image model, and the parent predictors, stored together
//! in a model directory.
//!
//! ```text
//! model/
//!   manifest.json       variant, effective config, encoder, constraint level
//!   graph.json          attribute SCM with fitted mechanisms
//!   ladder/*.cft        ladder parameters (ladder variants)
//!   vqglm/              autoencoder, codebook and GLM (vqglm variant)
//!   predictors/         one predictor per parent
//!   train_trace.csv     epoch,F_FE
//!   finetune_trace.csv  epoch,L_CT,F_FE,lambda (after fine-tuning)
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cftrain::{
    self, CfTask, FinetuneConfig, FinetuneReport, MultiplierConfig, ParentPredictor, ParentScm, PredictorConfig,
};
use crate::error::{Error, Result};
use crate::ladder::{LadderDims, LadderModel, TrainConfig, Variant};
use crate::mechanisms::{
    mechanism_from_doc, AffineFlowMechanism, CategoricalMechanism, FeatureMap, FitConfig, ParentFeature, Transform,
};
use crate::nn::AdamConfig;
use crate::rng;
use crate::scm::{GraphDoc, Intervention, NodeDef, ScmGraph, Value, VariableSpec};
use crate::synthpop::{self, Dataset, CLASSES, PIXELS};
use crate::vqglm::{self, CodebookConfig, VqGlm};

pub const FORMAT: &str = "cfscm-model/1";

/// Parent names in the column order of parent rows.
pub const PARENTS: [&str; 3] = ["y", "t", "i"];

const SALT_ATTRIBUTES: u64 = 1;
const SALT_LADDER_INIT: u64 = 2;
const SALT_LADDER_TRAIN: u64 = 3;
const SALT_PREDICTORS: u64 = 4;
const SALT_VQGLM: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "exogenous")]
    Exogenous,
    #[serde(rename = "mediator")]
    Mediator,
    #[serde(rename = "vqglm", alias = "vq-glm")]
    VqGlm,
}

impl ModelKind {
    pub fn ladder(self) -> Option<Variant> {
        match self {
            ModelKind::Exogenous => Some(Variant::Exogenous),
            ModelKind::Mediator => Some(Variant::Mediator),
            ModelKind::VqGlm => None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Exogenous => "exogenous",
            ModelKind::Mediator => "mediator",
            ModelKind::VqGlm => "vqglm",
        })
    }
}

/// Learning rate, epochs and batch size of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerBlock {
    pub attributes: Stage,
    pub ladder: Stage,
    pub predictors: Stage,
    pub finetune: Stage,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        OptimizerBlock {
            attributes: Stage {
                lr: 5e-3,
                epochs: 2000,
                batch_size: 256,
            },
            ladder: Stage {
                lr: 5e-4,
                epochs: 50,
                batch_size: 64,
            },
            predictors: Stage {
                lr: 1e-3,
                epochs: 30,
                batch_size: 64,
            },
            finetune: Stage {
                lr: 5e-4,
                epochs: 10,
                batch_size: 64,
            },
        }
    }
}

/// Run configuration. Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub variant: ModelKind,
    /// Ladder sizes; `x` and `pa` are set from the data.
    pub dims: LadderDims,
    /// Number of latent layers; must equal `dims.z.len()` when given.
    pub layers: Option<usize>,
    /// Mediator mixing weight used in fine-tuning and counterfactuals.
    pub pi: f64,
    /// One counterfactual term intervening on all parents at once.
    pub joint: bool,
    pub attribute_hidden: usize,
    pub predictor_hidden: usize,
    pub optimizer: OptimizerBlock,
    pub lambda: MultiplierConfig,
    pub codebook: CodebookConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: None,
            variant: ModelKind::Mediator,
            dims: LadderDims::default(),
            layers: None,
            pi: 0.9,
            joint: false,
            attribute_hidden: 16,
            predictor_hidden: 64,
            optimizer: OptimizerBlock::default(),
            lambda: MultiplierConfig::default(),
            codebook: CodebookConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.layers {
            if l != self.dims.z.len() {
                return Err(Error::Config(format!(
                    "layers = {l} but dims.z lists {} layers",
                    self.dims.z.len()
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::Config(format!("pi = {} outside [0, 1]", self.pi)));
        }
        let o = &self.optimizer;
        for (name, s) in [
            ("attributes", o.attributes),
            ("ladder", o.ladder),
            ("predictors", o.predictors),
            ("finetune", o.finetune),
        ] {
            if !(s.lr > 0.0 && s.lr.is_finite()) || s.batch_size == 0 {
                return Err(Error::Config(format!("optimizer.{name}: {s:?}")));
            }
        }
        if self.lambda.lr < 0.0 || self.lambda.damping < 0.0 {
            return Err(Error::Config(format!("lambda block {:?}", self.lambda)));
        }
        LadderDims {
            x: PIXELS,
            pa: 1,
            ..self.dims.clone()
        }
        .validate()?;
        if self.variant == ModelKind::VqGlm {
            self.codebook.validate()?;
        }
        Ok(())
    }

    fn adam(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    pub fn ladder_train(&self) -> TrainConfig {
        let s = self.optimizer.ladder;
        TrainConfig {
            adam: Self::adam(s.lr),
            epochs: s.epochs,
            batch_size: s.batch_size,
            seed: rng::mix(self.seed, SALT_LADDER_TRAIN),
        }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        let s = self.optimizer.predictors;
        PredictorConfig {
            adam: Self::adam(s.lr),
            epochs: s.epochs,
            batch_size: s.batch_size,
            hidden: self.predictor_hidden,
            seed: rng::mix(self.seed, SALT_PREDICTORS),
        }
    }

    /// Fine-tuning shares the training seed so that its final free energy
    /// is scored with the posterior seeds that defined `c`.
    pub fn finetune_config(&self) -> FinetuneConfig {
        let s = self.optimizer.finetune;
        FinetuneConfig {
            adam: Self::adam(s.lr),
            epochs: s.epochs,
            batch_size: s.batch_size,
            seed: self.ladder_train().seed,
            pi: self.pi,
            multiplier: self.lambda,
            joint: self.joint,
        }
    }
}

/// Seed precedence: command-line flag, then `CFSCM_SEED`, then the config.
pub fn effective_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env.map(str::trim).filter(|s| !s.is_empty()) {
        Some(s) => s
            .parse()
            .map_err(|_| Error::Config(format!("CFSCM_SEED=`{s}` is not an unsigned integer"))),
        None => Ok(config),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub variant: ModelKind,
    pub config: RunConfig,
    pub parents: Vec<String>,
    pub encoder: FeatureMap,
    /// Ladder sizes as built.
    pub dims: LadderDims,
    /// Constraint level: mean free energy after training.
    pub c: Option<f64>,
    pub train_trace: Vec<f64>,
    pub finetune: Option<FinetuneSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSummary {
    pub lambda: f64,
    pub l_ct_before: f64,
    pub l_ct_after: f64,
    pub f_fe_after: f64,
    pub constraint_met: bool,
}

/// A trained model directory loaded into memory.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub manifest: Manifest,
    pub scm: ParentScm,
    pub predictors: Vec<ParentPredictor>,
    pub ladder: Option<LadderModel>,
    pub vqglm: Option<VqGlm>,
}

/// `[y, t, i]` rows of a dataset.
pub fn parent_rows(data: &Dataset) -> Vec<Vec<Value>> {
    (0..data.len()).map(|k| data.parents(k)).collect()
}

pub fn parent_specs() -> Vec<VariableSpec> {
    vec![
        synthpop::class_spec(),
        VariableSpec::continuous("t"),
        VariableSpec::continuous("i"),
    ]
}

/// Fits the attribute mechanisms by maximum likelihood: a categorical root
/// for `y`, a log-normal root for `t`, and a conditional flow onto
/// `(0, 255)` for `i` given `t`.
pub fn fit_attribute_scm(rows: &[Vec<Value>], cfg: &RunConfig) -> Result<ScmGraph> {
    let s = cfg.optimizer.attributes;
    let base = rng::mix(cfg.seed, SALT_ATTRIBUTES);
    let fit = |k: u64| FitConfig {
        adam: RunConfig::adam(s.lr),
        epochs: s.epochs,
        batch_size: s.batch_size,
        seed: rng::mix(base, k),
        ..FitConfig::default()
    };
    let mut y = CategoricalMechanism::new(CLASSES.len(), FeatureMap::identity(vec![]), None, rng::mix(base, 10));
    let y_rows = rows
        .iter()
        .map(|r| Ok((vec![], category(&r[0])?)))
        .collect::<Result<Vec<_>>>()?;
    y.fit_mle(&y_rows, &fit(0))?;

    let mut t = AffineFlowMechanism::new(FeatureMap::identity(vec![]), Transform::Exp, None, rng::mix(base, 11));
    let t_rows = rows
        .iter()
        .map(|r| Ok((vec![], scalar(&r[1])?)))
        .collect::<Result<Vec<_>>>()?;
    t.fit_mle(&t_rows, &fit(1))?;

    let mut inputs = FeatureMap::identity(vec![ParentFeature::Continuous]);
    let i_rows = rows
        .iter()
        .map(|r| Ok((vec![r[1].clone()], scalar(&r[2])?)))
        .collect::<Result<Vec<_>>>()?;
    inputs.fit(&i_rows.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>());
    let mut i = AffineFlowMechanism::new(
        inputs,
        Transform::Sigmoid { lo: 0.0, hi: 255.0 },
        Some(cfg.attribute_hidden),
        rng::mix(base, 12),
    );
    i.fit_mle(&i_rows, &fit(2))?;

    ScmGraph::new(vec![
        NodeDef::new(synthpop::class_spec(), &[], Arc::new(y)),
        NodeDef::new(VariableSpec::continuous("t"), &[], Arc::new(t)),
        NodeDef::new(VariableSpec::continuous("i"), &["t"], Arc::new(i)),
    ])
}

fn category(v: &Value) -> Result<usize> {
    v.as_category()
        .ok_or_else(|| Error::Shape(format!("expected a category, got {v:?}")))
}

fn scalar(v: &Value) -> Result<f64> {
    v.as_scalar()
        .ok_or_else(|| Error::Shape(format!("expected a scalar, got {v:?}")))
}

/// Builds the attribute SCM, encoder and parent order from a fitted graph.
pub fn parent_scm(graph: ScmGraph, rows: &[Vec<Value>]) -> ParentScm {
    let mut encoder = FeatureMap::identity(vec![
        ParentFeature::Categorical(CLASSES.len()),
        ParentFeature::Continuous,
        ParentFeature::Continuous,
    ]);
    encoder.fit(rows);
    ParentScm {
        graph,
        names: PARENTS.iter().map(|s| s.to_string()).collect(),
        encoder,
    }
}

/// Parent matrix for the GLM design: `k − 1` dummy columns for `y`
/// (the first class is the baseline), then `t` and `i`.
pub fn glm_parents(rows: &[Vec<Value>]) -> Result<(DMatrix<f64>, Vec<String>)> {
    let k = CLASSES.len();
    let mut names: Vec<String> = CLASSES[1..].iter().map(|c| format!("y={c}")).collect();
    names.extend(["t".to_string(), "i".to_string()]);
    let mut data = Vec::with_capacity(rows.len() * names.len());
    for r in rows {
        if r.len() != PARENTS.len() {
            return Err(Error::Arity {
                expected: PARENTS.len(),
                got: r.len(),
            });
        }
        let y = category(&r[0])?;
        data.extend((1..k).map(|c| if c == y { 1.0 } else { 0.0 }));
        data.push(scalar(&r[1])?);
        data.push(scalar(&r[2])?);
    }
    Ok((vqglm::matrix(rows.len(), names.len(), &data)?, names))
}

/// Result of [`train`]: the in-memory model plus per-stage traces.
pub struct Trained {
    pub model: TrainedModel,
    pub predictor_traces: Vec<Vec<f64>>,
}

/// Fits the attribute SCM, the image model and the predictors.
pub fn train(data: &Dataset, cfg: &RunConfig) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition("cannot train on an empty dataset".into()));
    }
    data.check_finite()?;
    let rows = parent_rows(data);
    let graph = fit_attribute_scm(&rows, cfg)?;
    let scm = parent_scm(graph, &rows);
    let pa = scm.encode_rows(&rows)?;
    let dims = LadderDims {
        x: PIXELS,
        pa: scm.encoder.width(),
        ..cfg.dims.clone()
    };
    let (mut ladder, mut vq, mut c, mut trace) = (None, None, None, Vec::new());
    match cfg.variant.ladder() {
        Some(variant) => {
            let mut m = LadderModel::new(variant, dims.clone(), rng::mix(cfg.seed, SALT_LADDER_INIT))?;
            let report = m.train(&data.images, &pa, &cfg.ladder_train())?;
            c = Some(report.c);
            trace = report.trace;
            ladder = Some(m);
        }
        None => {
            let x = vqglm::matrix(data.len(), PIXELS, &data.images)?;
            let (p, names) = glm_parents(&rows)?;
            vq = Some(vqglm::fit_vqglm(&x, &p, names, &cfg.codebook, rng::mix(cfg.seed, SALT_VQGLM))?);
        }
    }
    let (predictors, predictor_traces) =
        cftrain::fit_predictors(&data.images, PIXELS, &rows, &parent_specs(), &cfg.predictor_config())?;
    let manifest = Manifest {
        format: FORMAT.into(),
        variant: cfg.variant,
        config: cfg.clone(),
        parents: scm.names.clone(),
        encoder: scm.encoder.clone(),
        dims,
        c,
        train_trace: trace,
        finetune: None,
    };
    Ok(Trained {
        model: TrainedModel {
            manifest,
            scm,
            predictors,
            ladder,
            vqglm: vq,
        },
        predictor_traces,
    })
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.manifest.variant
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        write_json(&dir.join("graph.json"), &GraphDoc::from_graph(&self.scm.graph))?;
        if let Some(l) = &self.ladder {
            l.save(&dir.join("ladder"))?;
        }
        if let Some(v) = &self.vqglm {
            v.save(&dir.join("vqglm"))?;
        }
        let pdir = dir.join("predictors");
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        for p in &self.predictors {
            p.save(&pdir)?;
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["epoch", "F_FE"]).map_err(csv_err)?;
        for (e, f) in self.manifest.train_trace.iter().enumerate() {
            w.write_record([e.to_string(), format!("{f:?}")]).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        let path = dir.join("train_trace.csv");
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!("unsupported model format `{}`", manifest.format)));
        }
        let doc: GraphDoc = read_json(&dir.join("graph.json"))?;
        let graph = doc.build(|n, _| mechanism_from_doc(&n.mechanism))?;
        let scm = ParentScm {
            graph,
            names: manifest.parents.clone(),
            encoder: manifest.encoder.clone(),
        };
        let ladder = match manifest.variant.ladder() {
            Some(v) => Some(LadderModel::load(v, manifest.dims.clone(), &dir.join("ladder"))?),
            None => None,
        };
        let vqglm = match manifest.variant {
            ModelKind::VqGlm => Some(VqGlm::load(&dir.join("vqglm"))?),
            _ => None,
        };
        let pdir = dir.join("predictors");
        let predictors = manifest
            .parents
            .iter()
            .map(|n| ParentPredictor::load(&pdir, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainedModel {
            manifest,
            scm,
            predictors,
            ladder,
            vqglm,
        })
    }

    /// Counterfactual parent rows under `iv`, downstream parents recomputed
    /// by the attribute SCM. Row `r` uses seed `mix(seed, r)`.
    pub fn counterfactual_parents(
        &self,
        rows: &[Vec<Value>],
        iv: &Intervention,
        seed: u64,
    ) -> Result<Vec<Vec<Value>>> {
        rows.iter()
            .enumerate()
            .map(|(r, row)| self.scm.counterfactual(row, iv, rng::mix(seed, r as u64)))
            .collect()
    }

    /// Counterfactual images for rows of `x` (`n × 256`) with factual and
    /// counterfactual parent rows. `pi` applies to the mediator variant.
    pub fn counterfactual_images(
        &self,
        x: &[f64],
        rows: &[Vec<Value>],
        cf_rows: &[Vec<Value>],
        pi: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if rows.len() != cf_rows.len() || x.len() != rows.len() * PIXELS {
            return Err(Error::Shape(format!(
                "{} images, {} parent rows, {} counterfactual rows",
                x.len() / PIXELS,
                rows.len(),
                cf_rows.len()
            )));
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(l) = &self.ladder {
            let pa = self.scm.encode_rows(rows)?;
            let pa_cf = self.scm.encode_rows(cf_rows)?;
            let seeds: Vec<u64> = (0..rows.len() as u64).map(|r| rng::mix(seed, r)).collect();
            return l.counterfactual_batch(x, &pa, &pa_cf, pi, &seeds);
        }
        let v = self
            .vqglm
            .as_ref()
            .ok_or_else(|| Error::Precondition("model has neither a ladder nor a GLM".into()))?;
        let xm = vqglm::matrix(rows.len(), PIXELS, x)?;
        let (p, _) = glm_parents(rows)?;
        let (p_cf, _) = glm_parents(cf_rows)?;
        Ok(vqglm::row_major(&vqglm::latent_counterfactual(v, &xm, &p, &p_cf)?))
    }

    /// Runs constrained fine-tuning of the ladder in place.
    pub fn finetune(&mut self, data: &Dataset) -> Result<FinetuneReport> {
        let c = self
            .manifest
            .c
            .ok_or_else(|| Error::Variant("fine-tuning needs a ladder model".into()))?;
        let cfg = self.manifest.config.finetune_config();
        let rows = parent_rows(data);
        let ladder = self
            .ladder
            .as_mut()
            .ok_or_else(|| Error::Variant("fine-tuning needs a ladder model".into()))?;
        let task = CfTask {
            scm: &self.scm,
            predictors: &self.predictors,
            pool: &rows,
            pi: cfg.pi,
            joint: cfg.joint,
        };
        let report = cftrain::finetune_constrained(ladder, &task, &data.images, &rows, c, &cfg)?;
        self.manifest.finetune = Some(FinetuneSummary {
            lambda: report.state.lambda,
            l_ct_before: report.l_ct_before,
            l_ct_after: report.l_ct_after,
            f_fe_after: report.f_fe_after,
            constraint_met: report.constraint_met(FE_SLACK),
        });
        Ok(report)
    }
}

/// Relative slack on the free-energy constraint, `F_FE ≤ c + slack·|c|`.
pub const FE_SLACK: f64 = 0.02;

/// Loads the dataset named by `flag`, falling back to the config's path.
pub fn dataset_path(flag: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset given (use --data or the `dataset` key)".into()))
}
