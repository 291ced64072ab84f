//! The `cfscm` command line. Exit codes: 0 ok, 2 usage or config,
//! 3 data or I/O, 4 numeric failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::format::{pgm_bytes, pgm_difference_bytes, write_bytes, Tensor};
use crate::pipeline::{self, effective_seed, ModelKind, RunConfig, TrainedModel, PARENTS};
use crate::scm::{Intervention, Value};
use crate::soundness::{self, Adapter, IgnoreAdapter, ModelAdapter, Suite, CYCLES};
use crate::synthpop::{self, Dataset, NoiseRecord, CLASSES, PIXELS, SIDE};
use crate::vqglm::{self, DesignStats, GlmParams};

const ENV_SEED: &str = "CFSCM_SEED";

#[derive(Debug, Parser)]
#[command(name = "cfscm", version, about = "Counterfactual inference with structural causal models")]
pub struct Cli {
    /// Caps worker threads for batch operations (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic dataset: images.cft, attributes.csv, noises.cft.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4000)]
        n: usize,
        /// Seed (precedence: flag, then CFSCM_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fits the attribute SCM, the image model and the parent predictors.
    ///
    /// Config keys (all optional, unknown keys rejected): seed (0), dataset,
    /// variant ("mediator" | "exogenous" | "vqglm"), dims {x, pa, z [4,8,16],
    /// h 32, hidden 64}, layers, pi (0.9), joint (false), attribute_hidden
    /// (16), predictor_hidden (64), optimizer {attributes {lr 5e-3, epochs
    /// 2000, batch_size 256}, ladder {5e-4, 50, 64}, predictors {1e-3, 30,
    /// 64}, finetune {5e-4, 10, 64}}, lambda {lr 0.01, damping 0.1, init 0},
    /// codebook {latent 16, entries 64, vector 4, iterations 50, jitter 1e-8}.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (overrides the config's `dataset`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's variant.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Counterfactual fine-tuning under the free-energy constraint.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        /// Takes pi, joint, optimizer.finetune and lambda from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Counterfactual image for one observation.
    Counterfactual(QueryArgs),
    /// Direct, indirect and total effects (mediator models).
    Effects(QueryArgs),
    /// Soundness suite over trained models plus oracle and ignore controls.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = SuiteKind::Soundness)]
        suite: SuiteKind,
        #[arg(long)]
        out: PathBuf,
        /// Number of samples scored (the first n of the dataset).
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write difference-image grids of this many samples.
        #[arg(long)]
        pgm: Option<usize>,
    },
    /// Closed-form GLM steps on latent tensors.
    #[command(subcommand)]
    Glm(GlmCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteKind {
    Soundness,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Sample id in the dataset, or a JSON file {"image": [256 values], "y", "t", "i"}.
    #[arg(long)]
    pub obs: String,
    /// Interventions `name=value[,name=value]`; empty for none.
    #[arg(long = "do", default_value = "", allow_hyphen_values = true)]
    pub intervention: String,
    /// Mediator mixing weight (default: the model's configured value).
    #[arg(long)]
    pub pi: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for PGM images.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    /// Dataset directory used to resolve sample ids.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum GlmCommand {
    /// Solves (PᵀP + δI)B = PᵀZ; writes B.cft and design.json.
    Fit {
        /// Latents, N × K.
        #[arg(long)]
        z: PathBuf,
        /// Parents as CSV with a header row.
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ridge jitter δ; the bare flag means 1e-8 (default 0).
        #[arg(long, num_args = 0..=1, default_missing_value = "1e-8", default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, value_enum, default_value_t = DesignMode::Standardized)]
        design: DesignMode,
    },
    /// U_Z = Z − P·B.
    Abduct {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        z: PathBuf,
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ẑ = U_Z + P̂·B.
    Predict {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        u: PathBuf,
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Abduction with P, then prediction with P_cf.
    Counterfactual {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        z: PathBuf,
        #[arg(long)]
        p: PathBuf,
        #[arg(long = "p-cf")]
        p_cf: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// How parent CSV columns become the design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DesignMode {
    /// Intercept plus standardized columns.
    Standardized,
    /// Intercept plus raw columns.
    Raw,
    /// The CSV is the full design matrix.
    Given,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // A second call within one process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth { out, n, seed } => synth(&out, n, seed),
        Command::Train {
            config,
            data,
            out,
            variant,
            seed,
        } => train(config.as_deref(), data.as_deref(), &out, variant.as_deref(), seed),
        Command::Finetune {
            model,
            config,
            data,
            out,
        } => finetune(&model, config.as_deref(), data.as_deref(), &out),
        Command::Counterfactual(q) => counterfactual(&q),
        Command::Effects(q) => effects(&q),
        Command::Evaluate {
            models,
            dataset,
            suite: SuiteKind::Soundness,
            out,
            n,
            seed,
            pgm,
        } => evaluate(&models, &dataset, &out, n, seed, pgm),
        Command::Glm(g) => glm(g),
    }
}

fn env_seed() -> Option<String> {
    std::env::var(ENV_SEED).ok()
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth(out: &Path, n: usize, seed: Option<u64>) -> Result<()> {
    let seed = effective_seed(seed, env_seed().as_deref(), 0)?;
    synthpop::write_dataset(out, seed, n)?;
    println!("{}", json!({ "out": out, "n": n, "seed": seed }));
    Ok(())
}

fn train(config: Option<&Path>, data: Option<&Path>, out: &Path, variant: Option<&str>, seed: Option<u64>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = variant {
        cfg.variant = serde_json::from_value(json!(v))
            .map_err(|_| Error::Variant(format!("unknown variant `{v}` (expected mediator, exogenous or vqglm)")))?;
    }
    cfg.seed = effective_seed(seed, env_seed().as_deref(), cfg.seed)?;
    let path = pipeline::dataset_path(data, &cfg)?;
    cfg.dataset = Some(path.clone());
    cfg.validate()?;
    let dataset = Dataset::load(&path)?;
    let trained = pipeline::train(&dataset, &cfg)?;
    trained.model.save(out)?;
    let m = &trained.model.manifest;
    println!(
        "{}",
        json!({ "out": out, "variant": m.variant, "seed": cfg.seed, "samples": dataset.len(), "c": m.c })
    );
    Ok(())
}

fn finetune(model: &Path, config: Option<&Path>, data: Option<&Path>, out: &Path) -> Result<()> {
    let mut m = TrainedModel::load(model)?;
    if m.kind().ladder().is_none() {
        return Err(Error::Variant(format!("fine-tuning needs a ladder model, {} is {}", model.display(), m.kind())));
    }
    if let Some(p) = config {
        let c = RunConfig::load(p)?;
        let cfg = &mut m.manifest.config;
        cfg.pi = c.pi;
        cfg.joint = c.joint;
        cfg.optimizer.finetune = c.optimizer.finetune;
        cfg.lambda = c.lambda;
    }
    let path = pipeline::dataset_path(data, &m.manifest.config)?;
    let dataset = Dataset::load(&path)?;
    let report = m.finetune(&dataset)?;
    m.save(out)?;
    crate::cftrain::write_trace(&out.join("finetune_trace.csv"), &report.trace)?;
    println!("{}", serde_json::to_string(&m.manifest.finetune).map_err(|e| Error::Format(e.to_string()))?);
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationDoc {
    image: Vec<f64>,
    y: serde_json::Value,
    t: f64,
    i: f64,
}

struct Observation {
    id: Option<usize>,
    image: Vec<f64>,
    parents: Vec<Value>,
}

fn observation(q: &QueryArgs, model: &TrainedModel) -> Result<Observation> {
    if let Ok(id) = q.obs.trim().parse::<usize>() {
        let path = pipeline::dataset_path(q.data.as_deref(), &model.manifest.config)?;
        let data = Dataset::load(&path)?;
        if id >= data.len() {
            return Err(Error::UnknownId(id));
        }
        return Ok(Observation {
            id: Some(id),
            image: data.image(id).to_vec(),
            parents: data.parents(id),
        });
    }
    let path = Path::new(&q.obs);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ObservationDoc =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if doc.image.len() != PIXELS {
        return Err(Error::Shape(format!("observation image has {} values, expected {PIXELS}", doc.image.len())));
    }
    let y = match &doc.y {
        serde_json::Value::String(s) => synthpop::class_spec().parse(s)?,
        serde_json::Value::Number(n) => synthpop::class_spec().parse(&n.to_string())?,
        other => return Err(Error::Format(format!("y = {other}"))),
    };
    Ok(Observation {
        id: None,
        image: doc.image,
        parents: vec![y, Value::Scalar(doc.t), Value::Scalar(doc.i)],
    })
}

fn parents_json(row: &[Value]) -> serde_json::Value {
    let mut m = serde_json::Map::new();
    for (name, v) in PARENTS.iter().zip(row) {
        let v = match v {
            Value::Category(c) => json!(CLASSES.get(*c).copied().unwrap_or("?")),
            Value::Scalar(s) => json!(s),
            Value::Tensor(_) => json!(null),
        };
        m.insert(name.to_string(), v);
    }
    serde_json::Value::Object(m)
}

fn image_tensor(pixels: &[f64]) -> Result<Tensor> {
    Tensor::new(vec![SIDE, SIDE], pixels.to_vec())
}

/// Loads the model and observation and resolves the intervention.
fn prepare(q: &QueryArgs) -> Result<(TrainedModel, Observation, Intervention, Vec<Value>, f64, u64)> {
    let model = TrainedModel::load(&q.model)?;
    let iv = Intervention::parse(&q.intervention, &model.scm.graph)?;
    let obs = observation(q, &model)?;
    let pi = q.pi.unwrap_or(model.manifest.config.pi);
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::OutOfRange(format!("--pi {pi} outside [0, 1]")));
    }
    let seed = effective_seed(q.seed, env_seed().as_deref(), model.manifest.config.seed)?;
    let cf = model.counterfactual_parents(std::slice::from_ref(&obs.parents), &iv, seed)?;
    Ok((model, obs, iv, cf.into_iter().next().unwrap_or_default(), pi, seed))
}

fn counterfactual(q: &QueryArgs) -> Result<()> {
    let (model, obs, iv, cf_row, pi, seed) = prepare(q)?;
    let x_cf = model.counterfactual_images(
        &obs.image,
        std::slice::from_ref(&obs.parents),
        std::slice::from_ref(&cf_row),
        pi,
        seed,
    )?;
    mkdir(&q.out)?;
    image_tensor(&x_cf)?.save(q.out.join("counterfactual.cft"))?;
    let diff: Vec<f64> = x_cf.iter().zip(&obs.image).map(|(a, b)| a - b).collect();
    if let Some(dir) = &q.pgm {
        write_pgms(dir, &obs.image, &x_cf, &diff)?;
    }
    let summary = json!({
        "model": model.kind(),
        "obs": obs.id,
        "intervention": iv.targets.keys().collect::<Vec<_>>(),
        "null_intervention": iv.is_empty(),
        "parents": parents_json(&obs.parents),
        "counterfactual_parents": parents_json(&cf_row),
        "pi": pi,
        "seed": seed,
        "change_l1": diff.iter().map(|d| d.abs()).sum::<f64>(),
        "change_max": diff.iter().map(|d| d.abs()).fold(0.0, f64::max),
    });
    write_json(&q.out.join("summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn write_pgms(dir: &Path, x: &[f64], x_cf: &[f64], diff: &[f64]) -> Result<()> {
    mkdir(dir)?;
    write_bytes(dir.join("factual.pgm"), &pgm_bytes(SIDE, SIDE, x))?;
    write_bytes(dir.join("counterfactual.pgm"), &pgm_bytes(SIDE, SIDE, x_cf))?;
    let scale = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    write_bytes(dir.join("difference.pgm"), &pgm_difference_bytes(SIDE, SIDE, diff, scale))
}

/// Tolerance of the telescoping check `TE = IE + (g(p̃a, z̃) − g(pa, z̃))`.
const TELESCOPING_TOL: f64 = 1e-9;

fn effects(q: &QueryArgs) -> Result<()> {
    let (model, obs, iv, cf_row, pi, seed) = prepare(q)?;
    let ladder = match (&model.ladder, model.kind()) {
        (Some(l), ModelKind::Mediator) => l,
        _ => return Err(Error::Variant(format!("effects need a mediator model, got {}", model.kind()))),
    };
    let pa = model.scm.encoder.encode(&obs.parents)?;
    let pa_cf = model.scm.encoder.encode(&cf_row)?;
    let report = ladder.effects(&obs.image, &pa, &pa_cf, pi, seed)?;
    if !(report.telescoping_error <= TELESCOPING_TOL) {
        return Err(Error::Divergence(format!(
            "telescoping identity violated by {:e}",
            report.telescoping_error
        )));
    }
    mkdir(&q.out)?;
    image_tensor(&report.de)?.save(q.out.join("de.cft"))?;
    image_tensor(&report.ie)?.save(q.out.join("ie.cft"))?;
    image_tensor(&report.te)?.save(q.out.join("te.cft"))?;
    let norms = json!({
        "de": report.norms.de,
        "ie": report.norms.ie,
        "te": report.norms.te,
        "telescoping_error": report.telescoping_error,
        "null_intervention": iv.is_empty(),
        "pi": pi,
        "seed": seed,
    });
    write_json(&q.out.join("norms.json"), &norms)?;
    if let Some(dir) = &q.pgm {
        mkdir(dir)?;
        for (name, img) in [("de", &report.de), ("ie", &report.ie), ("te", &report.te)] {
            let scale = img.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            write_bytes(dir.join(format!("{name}.pgm")), &pgm_difference_bytes(SIDE, SIDE, img, scale))?;
        }
    }
    println!("{norms}");
    Ok(())
}

fn evaluate(models: &[PathBuf], dataset: &Path, out: &Path, n: usize, seed: Option<u64>, pgm: Option<usize>) -> Result<()> {
    let data = Dataset::load(dataset)?;
    let noise = NoiseRecord::load(dataset)?;
    if noise.len() != data.len() {
        return Err(Error::Shape(format!("{} noise rows for {} samples", noise.len(), data.len())));
    }
    let loaded = models
        .iter()
        .map(|p| TrainedModel::load(p))
        .collect::<Result<Vec<_>>>()?;
    let seed = effective_seed(seed, env_seed().as_deref(), loaded[0].manifest.config.seed)?;
    let mut labels: Vec<String> = Vec::new();
    for (k, p) in models.iter().enumerate() {
        let base = p
            .file_name()
            .map(|s| s.to_string_lossy().replace(|c: char| !c.is_ascii_alphanumeric() && c != '-' && c != '_', "_"))
            .unwrap_or_else(|| format!("model{k}"));
        let label = if base == "oracle" || base == "ignore" || labels.contains(&base) {
            format!("{base}-{k}")
        } else {
            base
        };
        labels.push(label);
    }
    let adapters: Vec<ModelAdapter> = loaded
        .iter()
        .zip(&labels)
        .map(|(m, l)| ModelAdapter {
            label: l.clone(),
            model: m,
            pi: m.manifest.config.pi,
        })
        .collect();
    let suite = Suite {
        data: &data,
        noise: &noise,
        ids: (0..n.min(data.len())).collect(),
        predictors: &loaded[0].predictors,
        seed,
    };
    let oracle = suite.oracle();
    let mut all: Vec<&dyn Adapter> = vec![&oracle, &IgnoreAdapter];
    all.extend(adapters.iter().map(|a| a as &dyn Adapter));
    let (mut report, outputs) = suite.run(&all, &CYCLES)?;
    report.predictors_from = labels[0].clone();
    mkdir(out)?;
    let json_text = report.to_json()?;
    let path = out.join("report.json");
    fs::write(&path, json_text + "\n").map_err(|e| Error::io(path, e))?;
    let path = out.join("report.csv");
    fs::write(&path, report.to_csv()?).map_err(|e| Error::io(path, e))?;
    if let Some(count) = pgm {
        soundness::write_grids(&out.join("grids"), &suite.images(), &outputs, count)?;
    }
    let models_json: BTreeMap<&str, String> = labels
        .iter()
        .zip(models)
        .map(|(l, p)| (l.as_str(), p.display().to_string()))
        .collect();
    println!(
        "{}",
        json!({ "out": out, "samples": report.samples, "models": models_json, "control_violations": report.control_violations })
    );
    if !report.control_violations.is_empty() {
        eprintln!(
            "warning: ignore control matched the oracle on {}",
            report.control_violations.join(", ")
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlmSidecar {
    pub mode: DesignMode,
    pub stats: Option<DesignStats>,
    pub jitter: f64,
}

fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let t = Tensor::load(path)?;
    match t.dims.len() {
        2 => vqglm::matrix(t.dims[0], t.dims[1], &t.data),
        1 => vqglm::matrix(t.dims[0], 1, &t.data),
        _ => Err(Error::Shape(format!("{} has dims {:?}", path.display(), t.dims))),
    }
}

fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    Tensor::matrix(m.nrows(), m.ncols(), vqglm::row_major(m))?.save(path)
}

/// Reads a numeric CSV with a header row.
pub fn read_csv_matrix(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for (c, field) in rec.iter().enumerate() {
            data.push(field.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("{} row {r}, column {c}: `{field}` is not a number", path.display()))
            })?);
        }
        rows += 1;
    }
    Ok((header.clone(), vqglm::matrix(rows, header.len(), &data)?))
}

fn design_from(side: &GlmSidecar, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match (&side.mode, &side.stats) {
        (DesignMode::Given, _) => Ok(raw.clone()),
        (_, Some(stats)) => stats.design(raw),
        (_, None) => Err(Error::Format("design.json lacks column statistics".into())),
    }
}

fn load_params(dir: &Path) -> Result<(GlmSidecar, GlmParams)> {
    let path = dir.join("design.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let side: GlmSidecar = serde_json::from_str(&text).map_err(|e| Error::Format(format!("design.json: {e}")))?;
    let b = load_matrix(&dir.join("B.cft"))?;
    let jitter = side.jitter;
    Ok((side, GlmParams { b, jitter }))
}

fn glm(cmd: GlmCommand) -> Result<()> {
    match cmd {
        GlmCommand::Fit {
            z,
            p,
            out,
            jitter,
            design,
        } => {
            let zm = load_matrix(&z)?;
            let (names, raw) = read_csv_matrix(&p)?;
            let stats = match design {
                DesignMode::Standardized => Some(DesignStats::fit(names, &raw)?),
                DesignMode::Raw => Some(DesignStats::identity(names)),
                DesignMode::Given => None,
            };
            let side = GlmSidecar {
                mode: design,
                stats,
                jitter,
            };
            let pm = design_from(&side, &raw)?;
            let params = vqglm::glm_fit(&zm, &pm, jitter)?;
            mkdir(&out)?;
            save_matrix(&out.join("B.cft"), &params.b)?;
            write_json(&out.join("design.json"), &side)?;
            let u = vqglm::glm_abduct(&params, &zm, &pm)?;
            let ortho = (pm.transpose() * &u).amax();
            println!(
                "{}",
                json!({ "out": out, "rows": zm.nrows(), "coefficients": [params.b.nrows(), params.b.ncols()], "orthogonality": ortho })
            );
        }
        GlmCommand::Abduct { params, z, p, out } => {
            let (side, params) = load_params(&params)?;
            let pm = design_from(&side, &read_csv_matrix(&p)?.1)?;
            save_matrix(&out, &vqglm::glm_abduct(&params, &load_matrix(&z)?, &pm)?)?;
        }
        GlmCommand::Predict { params, u, p, out } => {
            let (side, params) = load_params(&params)?;
            let pm = design_from(&side, &read_csv_matrix(&p)?.1)?;
            save_matrix(&out, &vqglm::glm_predict(&params, &load_matrix(&u)?, &pm)?)?;
        }
        GlmCommand::Counterfactual {
            params,
            z,
            p,
            p_cf,
            out,
        } => {
            let (side, params) = load_params(&params)?;
            let pm = design_from(&side, &read_csv_matrix(&p)?.1)?;
            let pcf = design_from(&side, &read_csv_matrix(&p_cf)?.1)?;
            let u = vqglm::glm_abduct(&params, &load_matrix(&z)?, &pm)?;
            save_matrix(&out, &vqglm::glm_predict(&params, &u, &pcf)?)?;
        }
    }
    Ok(())
}
