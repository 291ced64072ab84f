//! Synthetic ground-truth population: class `y`, thickness `t`, intensity
//! `i` and a 16×16 image `x`, with the exogenous noise of every sample kept
//! on record so exact counterfactuals can be computed.
//!
//! ```text
//! y ~ uniform{bar, cross, ring}
//! t := exp(0.4 + 0.3·u_t)
//! i := 64 + 191·sigmoid(2t − 5 + 0.5·u_i)
//! x := render(y, t, i) + (2/255)·u_x
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::format::Tensor;
use crate::rng::{self, streams, StreamRng};
use crate::scm::{
    Intervention, LatentNoise, Mechanism, NodeDef, Noise, Provenance, ScmGraph, Value, VariableKind,
    VariableSpec, World,
};

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;
pub const SIGMA_PX: f64 = 2.0 / 255.0;
pub const CLASSES: [&str; 3] = ["bar", "cross", "ring"];
/// Columns of the noise record: `u_y, u_t, u_i, u_x[0..256]`.
pub const NOISE_WIDTH: usize = 3 + PIXELS;

const CENTER: f64 = 7.5;
const ARM: f64 = 5.0;
const RADIUS: f64 = 4.5;

pub fn thickness(u_t: f64) -> f64 {
    (0.4 + 0.3 * u_t).exp()
}

pub fn intensity(t: f64, u_i: f64) -> f64 {
    64.0 + 191.0 / (1.0 + (-(2.0 * t - 5.0 + 0.5 * u_i)).exp())
}

fn class_of(u_y: f64) -> usize {
    ((u_y * 3.0) as usize).min(2)
}

fn check_inputs(y: usize, t: f64, i: f64) -> Result<()> {
    if y >= CLASSES.len() {
        return Err(Error::OutOfRange(format!("class {y}")));
    }
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::OutOfRange(format!("thickness {t} must be positive")));
    }
    if !(i.is_finite() && (0.0..=255.0).contains(&i)) {
        return Err(Error::OutOfRange(format!("intensity {i} outside [0, 255]")));
    }
    Ok(())
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let s = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + s * dx, a.1 + s * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Distance from a point `(row, col)` to the stroke skeleton of class `y`.
fn skeleton_distance(y: usize, p: (f64, f64)) -> f64 {
    let horizontal = segment_distance(p, (CENTER, CENTER - ARM), (CENTER, CENTER + ARM));
    match y {
        0 => horizontal,
        1 => horizontal.min(segment_distance(p, (CENTER - ARM, CENTER), (CENTER + ARM, CENTER))),
        _ => {
            let r = ((p.0 - CENTER).powi(2) + (p.1 - CENTER).powi(2)).sqrt();
            (r - RADIUS).abs()
        }
    }
}

/// The unsmoothed stroke image: value `i/255` within half-width `0.75·t` of
/// the skeleton, falling linearly to zero over the next pixel.
pub fn template(y: usize, t: f64, i: f64) -> Result<Vec<f64>> {
    check_inputs(y, t, i)?;
    let w = 0.75 * t;
    let peak = i / 255.0;
    Ok((0..PIXELS)
        .map(|k| {
            let p = ((k / SIDE) as f64 + 0.5, (k % SIDE) as f64 + 0.5);
            let d = skeleton_distance(y, p);
            peak * (1.0 + w - d).clamp(0.0, 1.0)
        })
        .collect())
}

/// 3×3 binomial smoothing with zero padding.
pub fn smooth(img: &[f64]) -> Vec<f64> {
    const K: [f64; 3] = [1.0, 2.0, 1.0];
    let mut out = vec![0.0; PIXELS];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let mut acc = 0.0;
            for (dr, kr) in K.iter().enumerate() {
                for (dc, kc) in K.iter().enumerate() {
                    let (rr, cc) = (r + dr, c + dc);
                    if (1..=SIDE).contains(&rr) && (1..=SIDE).contains(&cc) {
                        acc += kr * kc * img[(rr - 1) * SIDE + cc - 1];
                    }
                }
            }
            out[r * SIDE + c] = acc / 16.0;
        }
    }
    out
}

/// Noise-free image of `(y, t, i)`.
pub fn render(y: usize, t: f64, i: f64) -> Result<Vec<f64>> {
    Ok(smooth(&template(y, t, i)?))
}

pub fn image(y: usize, t: f64, i: f64, u_x: &[f64]) -> Result<Vec<f64>> {
    if u_x.len() != PIXELS {
        return Err(Error::Shape(format!("pixel noise has {} entries", u_x.len())));
    }
    let mut x = render(y, t, i)?;
    for (v, u) in x.iter_mut().zip(u_x) {
        *v += SIGMA_PX * u;
    }
    Ok(x)
}

/// Observed variables of a population, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × 256`, row-major.
    pub images: Vec<f64>,
    pub y: Vec<usize>,
    pub t: Vec<f64>,
    pub i: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn image(&self, k: usize) -> &[f64] {
        &self.images[k * PIXELS..(k + 1) * PIXELS]
    }

    /// `[y, t, i]` of sample `k`.
    pub fn parents(&self, k: usize) -> Vec<Value> {
        vec![
            Value::Category(self.y[k]),
            Value::Scalar(self.t[k]),
            Value::Scalar(self.i[k]),
        ]
    }

    pub fn subset(&self, ids: &[usize]) -> Dataset {
        Dataset {
            images: ids.iter().flat_map(|&k| self.image(k).to_vec()).collect(),
            y: ids.iter().map(|&k| self.y[k]).collect(),
            t: ids.iter().map(|&k| self.t[k]).collect(),
            i: ids.iter().map(|&k| self.i[k]).collect(),
        }
    }

    /// Rejects non-finite entries before any model sees them.
    pub fn check_finite(&self) -> Result<()> {
        if self.images.iter().chain(&self.t).chain(&self.i).any(|v| !v.is_finite()) {
            return Err(Error::Divergence("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Tensor::new(vec![self.len(), SIDE, SIDE], self.images.clone())?.save(dir.join("images.cft"))?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["id", "y", "t", "i"]).map_err(io)?;
        for k in 0..self.len() {
            w.write_record([
                k.to_string(),
                CLASSES[self.y[k]].to_string(),
                format!("{:?}", self.t[k]),
                format!("{:?}", self.i[k]),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        let path = dir.join("attributes.csv");
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let img = Tensor::load(dir.join("images.cft"))?;
        if img.dims.len() != 3 || img.dims[1] != SIDE || img.dims[2] != SIDE {
            return Err(Error::Shape(format!("images.cft has dims {:?}", img.dims)));
        }
        let path = dir.join("attributes.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let (mut y, mut t, mut i) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(format!("attributes.csv: {e}")))?;
            let get = |c: usize| rec.get(c).ok_or_else(|| Error::Format(format!("row {row} is short")));
            let label = get(1)?;
            let class = CLASSES
                .iter()
                .position(|l| *l == label)
                .or_else(|| label.parse().ok().filter(|c: &usize| *c < CLASSES.len()))
                .ok_or_else(|| Error::Format(format!("row {row}: unknown class `{label}`")))?;
            let num = |c: usize| -> Result<f64> {
                get(c)?
                    .parse()
                    .map_err(|_| Error::Format(format!("row {row}, column {c} is not a number")))
            };
            y.push(class);
            t.push(num(2)?);
            i.push(num(3)?);
        }
        if y.len() != img.dims[0] {
            return Err(Error::Shape(format!(
                "{} attribute rows for {} images",
                y.len(),
                img.dims[0]
            )));
        }
        Ok(Dataset {
            images: img.data,
            y,
            t,
            i,
        })
    }
}

/// Exogenous values of every sample, hidden from the models.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    /// `n × NOISE_WIDTH`, row-major.
    pub data: Vec<f64>,
}

impl NoiseRecord {
    pub fn len(&self) -> usize {
        self.data.len() / NOISE_WIDTH
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, k: usize) -> Result<&[f64]> {
        if k >= self.len() {
            return Err(Error::UnknownId(k));
        }
        Ok(&self.data[k * NOISE_WIDTH..(k + 1) * NOISE_WIDTH])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        Tensor::matrix(self.len(), NOISE_WIDTH, self.data.clone())?.save(dir.join("noises.cft"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let t = Tensor::load(dir.join("noises.cft"))?;
        if t.dims.len() != 2 || t.dims[1] != NOISE_WIDTH {
            return Err(Error::Shape(format!("noises.cft has dims {:?}", t.dims)));
        }
        Ok(NoiseRecord { data: t.data })
    }
}

/// Draws `n` samples; sample `j` uses only the stream `(seed, SYNTH, j)`.
pub fn generate(seed: u64, n: usize) -> (Dataset, NoiseRecord) {
    let rows: Vec<(usize, f64, f64, Vec<f64>, Vec<f64>)> = (0..n as u64)
        .into_par_iter()
        .map(|j| {
            let mut r = rng::stream(seed, streams::SYNTH, j);
            let u_y = rng::open01(&mut r);
            let u_t = rng::normal(&mut r);
            let u_i = rng::normal(&mut r);
            let u_x = rng::normals(&mut r, PIXELS);
            let y = class_of(u_y);
            let t = thickness(u_t);
            let i = intensity(t, u_i);
            let x = image(y, t, i, &u_x).expect("generator stays in range");
            let mut u = Vec::with_capacity(NOISE_WIDTH);
            u.extend([u_y, u_t, u_i]);
            u.extend(u_x);
            (y, t, i, x, u)
        })
        .collect();
    let mut ds = Dataset {
        images: Vec::with_capacity(n * PIXELS),
        y: Vec::with_capacity(n),
        t: Vec::with_capacity(n),
        i: Vec::with_capacity(n),
    };
    let mut noise = Vec::with_capacity(n * NOISE_WIDTH);
    for (y, t, i, x, u) in rows {
        ds.y.push(y);
        ds.t.push(t);
        ds.i.push(i);
        ds.images.extend(x);
        noise.extend(u);
    }
    (ds, NoiseRecord { data: noise })
}

/// Writes `images.cft`, `attributes.csv` and `noises.cft` into `dir`.
pub fn write_dataset(dir: &Path, seed: u64, n: usize) -> Result<(Dataset, NoiseRecord)> {
    let (ds, noise) = generate(seed, n);
    ds.save(dir)?;
    noise.save(dir)?;
    Ok((ds, noise))
}

#[derive(Debug)]
struct ClassMechanism;

impl Mechanism for ClassMechanism {
    fn arity(&self) -> usize {
        0
    }

    fn forward(&self, _parents: &[Value], noise: &Noise) -> Result<Value> {
        match noise {
            Noise::Scalar(u) if (0.0..1.0).contains(u) => Ok(Value::Category(class_of(*u))),
            other => Err(Error::Shape(format!("class noise {other:?}"))),
        }
    }

    fn sample_noise(&self, rng: &mut StreamRng) -> Noise {
        Noise::Scalar(rng::open01(rng))
    }

    /// Uniform posterior over the slice of (0, 1) that maps to the class.
    fn abduct(&self, _parents: &[Value], value: &Value, seed: u64) -> Result<Noise> {
        let c = value
            .as_category()
            .filter(|c| *c < 3)
            .ok_or_else(|| Error::OutOfRange(format!("class {value:?}")))?;
        let mut r = rng::stream(seed, streams::ABDUCTION, 0);
        let u = (c as f64 + rng::open01(&mut r)) / 3.0;
        Ok(Noise::Scalar(u.min((c as f64 + 1.0) / 3.0 - 1e-12)))
    }
}

#[derive(Debug)]
struct ThicknessMechanism;

impl Mechanism for ThicknessMechanism {
    fn arity(&self) -> usize {
        0
    }

    fn forward(&self, _parents: &[Value], noise: &Noise) -> Result<Value> {
        match noise {
            Noise::Scalar(u) => Ok(Value::Scalar(thickness(*u))),
            other => Err(Error::Shape(format!("thickness noise {other:?}"))),
        }
    }

    fn sample_noise(&self, rng: &mut StreamRng) -> Noise {
        Noise::Scalar(rng::normal(rng))
    }

    fn abduct(&self, _parents: &[Value], value: &Value, _seed: u64) -> Result<Noise> {
        let t = scalar(value)?;
        Ok(Noise::Scalar((t.ln() - 0.4) / 0.3))
    }
}

#[derive(Debug)]
struct IntensityMechanism;

impl Mechanism for IntensityMechanism {
    fn arity(&self) -> usize {
        1
    }

    fn forward(&self, parents: &[Value], noise: &Noise) -> Result<Value> {
        match noise {
            Noise::Scalar(u) => Ok(Value::Scalar(intensity(scalar(&parents[0])?, *u))),
            other => Err(Error::Shape(format!("intensity noise {other:?}"))),
        }
    }

    fn sample_noise(&self, rng: &mut StreamRng) -> Noise {
        Noise::Scalar(rng::normal(rng))
    }

    fn abduct(&self, parents: &[Value], value: &Value, _seed: u64) -> Result<Noise> {
        let t = scalar(&parents[0])?;
        let p = (scalar(value)? - 64.0) / 191.0;
        let u = ((p / (1.0 - p)).ln() - 2.0 * t + 5.0) / 0.5;
        if u.is_finite() {
            Ok(Noise::Scalar(u))
        } else {
            Err(Error::NonFinite("intensity inverse".into()))
        }
    }
}

#[derive(Debug)]
struct ImageMechanism;

impl Mechanism for ImageMechanism {
    fn arity(&self) -> usize {
        3
    }

    fn forward(&self, parents: &[Value], noise: &Noise) -> Result<Value> {
        let Noise::Latent(n) = noise else {
            return Err(Error::Shape(format!("image noise {noise:?}")));
        };
        let (y, t, i) = unpack_parents(parents)?;
        Ok(Value::Tensor(image(y, t, i, &n.u_x)?))
    }

    fn sample_noise(&self, rng: &mut StreamRng) -> Noise {
        Noise::Latent(LatentNoise {
            z: None,
            u_z: None,
            u_x: rng::normals(rng, PIXELS),
        })
    }

    fn abduct(&self, parents: &[Value], value: &Value, _seed: u64) -> Result<Noise> {
        let (y, t, i) = unpack_parents(parents)?;
        let x = value
            .as_tensor()
            .ok_or_else(|| Error::Shape("image must be a tensor".into()))?;
        let mu = render(y, t, i)?;
        Ok(Noise::Latent(LatentNoise {
            z: None,
            u_z: None,
            u_x: x.iter().zip(&mu).map(|(x, m)| (x - m) / SIGMA_PX).collect(),
        }))
    }
}

fn scalar(v: &Value) -> Result<f64> {
    v.as_scalar()
        .ok_or_else(|| Error::Shape(format!("expected a scalar, got {v:?}")))
}

/// `(y, t, i)` from a `[y, t, i]` parent row.
pub fn unpack_parents(pa: &[Value]) -> Result<(usize, f64, f64)> {
    if pa.len() != 3 {
        return Err(Error::Arity {
            expected: 3,
            got: pa.len(),
        });
    }
    let y = pa[0]
        .as_category()
        .ok_or_else(|| Error::Shape("y must be categorical".into()))?;
    Ok((y, scalar(&pa[1])?, scalar(&pa[2])?))
}

pub fn class_spec() -> VariableSpec {
    VariableSpec::new(
        "y",
        VariableKind::Categorical {
            labels: CLASSES.iter().map(|s| s.to_string()).collect(),
        },
    )
}

pub fn image_spec() -> VariableSpec {
    VariableSpec::new(
        "x",
        VariableKind::Tensor {
            shape: vec![SIDE, SIDE],
        },
    )
}

/// The generating process as an SCM over `y, t, i, x`.
pub fn ground_truth_graph() -> ScmGraph {
    ScmGraph::new(vec![
        NodeDef::new(class_spec(), &[], Arc::new(ClassMechanism)),
        NodeDef::new(VariableSpec::continuous("t"), &[], Arc::new(ThicknessMechanism)),
        NodeDef::new(VariableSpec::continuous("i"), &["t"], Arc::new(IntensityMechanism)),
        NodeDef::new(image_spec(), &["y", "t", "i"], Arc::new(ImageMechanism)),
    ])
    .expect("ground-truth graph is acyclic")
}

/// A recorded world and its counterfactual under one intervention.
#[derive(Debug, Clone)]
pub struct OraclePair {
    pub factual: World,
    pub counterfactual: World,
}

/// The recorded world of sample `id`, with its true exogenous values.
pub fn recorded_world(data: &Dataset, noise: &NoiseRecord, id: usize) -> Result<World> {
    if id >= data.len() {
        return Err(Error::UnknownId(id));
    }
    let u = noise.row(id)?;
    let endogenous = BTreeMap::from([
        ("y".to_string(), Value::Category(data.y[id])),
        ("t".to_string(), Value::Scalar(data.t[id])),
        ("i".to_string(), Value::Scalar(data.i[id])),
        ("x".to_string(), Value::Tensor(data.image(id).to_vec())),
    ]);
    let exogenous = BTreeMap::from([
        ("y".to_string(), Noise::Scalar(u[0])),
        ("t".to_string(), Noise::Scalar(u[1])),
        ("i".to_string(), Noise::Scalar(u[2])),
        (
            "x".to_string(),
            Noise::Latent(LatentNoise {
                z: None,
                u_z: None,
                u_x: u[3..].to_vec(),
            }),
        ),
    ]);
    Ok(World {
        endogenous,
        exogenous,
        provenance: Provenance::Observed,
    })
}

/// Exact counterfactual of a recorded sample: the stored noise is re-run
/// through the intervened generating process.
pub fn oracle_counterfactual(
    data: &Dataset,
    noise: &NoiseRecord,
    id: usize,
    iv: &Intervention,
) -> Result<OraclePair> {
    let factual = recorded_world(data, noise, id)?;
    let counterfactual = ground_truth_graph().counterfactual_world(&factual, iv)?;
    Ok(OraclePair {
        factual,
        counterfactual,
    })
}

/// Oracle image for sample `id` rendered at explicit parents `(y, t, i)`.
pub fn oracle_image(noise: &NoiseRecord, id: usize, y: usize, t: f64, i: f64) -> Result<Vec<f64>> {
    image(y, t, i, &noise.row(id)?[3..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_center_row_is_at_peak_before_smoothing() {
        for t in [0.3, 1.0, 2.5] {
            let img = template(0, t, 200.0).unwrap();
            for c in 3..=12 {
                assert_eq!(img[7 * SIDE + c], 200.0 / 255.0);
            }
        }
    }

    #[test]
    fn render_is_linear_in_intensity() {
        for y in 0..3 {
            let a = render(y, 1.3, 64.0).unwrap();
            let b = render(y, 1.3, 255.0).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p * 255.0 / 64.0 - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lit_area_grows_with_thickness() {
        for y in 0..3 {
            let mut last = 0;
            for k in 1..40 {
                let t = 0.1 * k as f64;
                let lit = render(y, t, 255.0).unwrap().iter().filter(|v| **v > 0.25).count();
                assert!(lit >= last, "class {y}, t {t}: {lit} < {last}");
                last = lit;
            }
        }
    }

    #[test]
    fn render_rejects_bad_inputs() {
        assert!(matches!(render(0, 0.0, 100.0), Err(Error::OutOfRange(_))));
        assert!(matches!(render(0, 1.0, 256.0), Err(Error::OutOfRange(_))));
        assert!(matches!(render(3, 1.0, 100.0), Err(Error::OutOfRange(_))));
        assert!(render(0, f64::NAN, 100.0).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let (a, na) = generate(3, 300);
        let (b, nb) = generate(3, 300);
        assert_eq!(a, b);
        assert_eq!(na, nb);
        assert!(a.i.iter().all(|v| *v > 64.0 && *v < 255.0));
        assert!(a.t.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn thickness_mean_matches_lognormal() {
        let (d, _) = generate(11, 100_000);
        let mean = d.t.iter().sum::<f64>() / d.len() as f64;
        let want = (0.4f64 + 0.3 * 0.3 / 2.0).exp();
        assert!((mean / want - 1.0).abs() < 0.01, "{mean} vs {want}");
    }

    #[test]
    fn oracle_null_and_idempotent_interventions() {
        let (d, n) = generate(5, 20);
        let g = ground_truth_graph();
        for id in 0..20 {
            let p = oracle_counterfactual(&d, &n, id, &Intervention::none()).unwrap();
            assert_eq!(p.counterfactual.endogenous, p.factual.endogenous);
            assert!(g.consistency_error(&p.factual).unwrap() < 1e-9);
            let same = Intervention::none().set("t", Value::Scalar(d.t[id]));
            let q = oracle_counterfactual(&d, &n, id, &same).unwrap();
            assert_eq!(q.counterfactual.value("x").unwrap(), p.factual.value("x").unwrap());
        }
    }

    #[test]
    fn doubling_thickness_raises_intensity_and_keeps_ancestors() {
        let (d, n) = generate(6, 50);
        for id in 0..50 {
            let iv = Intervention::none().set("t", Value::Scalar(2.0 * d.t[id]));
            let p = oracle_counterfactual(&d, &n, id, &iv).unwrap();
            assert!(p.counterfactual.scalar("i").unwrap() > d.i[id]);
            let iv = Intervention::none().set("i", Value::Scalar(100.0));
            let p = oracle_counterfactual(&d, &n, id, &iv).unwrap();
            assert_eq!(p.counterfactual.scalar("t").unwrap(), d.t[id]);
        }
    }

    #[test]
    fn unknown_id() {
        let (d, n) = generate(1, 3);
        assert!(matches!(
            oracle_counterfactual(&d, &n, 3, &Intervention::none()),
            Err(Error::UnknownId(3))
        ));
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (d, n) = write_dataset(dir.path(), 9, 17).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
        assert_eq!(NoiseRecord::load(dir.path()).unwrap(), n);
    }
}
