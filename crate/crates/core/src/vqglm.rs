//! Latent-space counterfactuals: a linear autoencoder, a codebook with
//! two-stage residual quantization of half-vectors, and a closed-form GLM
//! that splits latents into a parent-explained part and a residual.
//!
//! ```text
//! z      = Q(E(x))
//! U_Z    = Z − P·B              B = (PᵀP + δI)⁻¹PᵀZ
//! Ẑ      = U_Z + P̂·B
//! x̂      = D(Ẑ)
//! ```

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::Tensor;
use crate::rng::{self, streams};

/// Relative pivot below which a normal-equation system counts as singular.
const PIVOT_TOL: f64 = 1e-13;

/// Row-major `rows × cols` slice as a matrix.
pub fn matrix(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Shape(format!("{} values for a {rows}×{cols} matrix", data.len())));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

/// Row-major copy of a matrix.
pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Numerical rank by column-pivoted QR.
fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let r = m.clone().col_piv_qr().r();
    let top = r[(0, 0)].abs();
    if top == 0.0 {
        return 0;
    }
    let tol = top * f64::EPSILON * m.nrows().max(m.ncols()) as f64 * 10.0;
    (0..r.nrows().min(r.ncols())).filter(|&i| r[(i, i)].abs() > tol).count()
}

/// Square-root-free Cholesky factors `A = L·D·Lᵀ` with unit lower `L`.
struct Ldl {
    l: DMatrix<f64>,
    d: Vec<f64>,
}

impl Ldl {
    fn new(a: &DMatrix<f64>, what: &str) -> Result<Self> {
        let n = a.nrows();
        let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut l = DMatrix::identity(n, n);
        let mut d = vec![0.0; n];
        for j in 0..n {
            let dj = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)] * d[k]).sum::<f64>();
            if !(dj > PIVOT_TOL * scale) {
                return Err(Error::SingularMatrix(what.to_string()));
            }
            d[j] = dj;
            for i in j + 1..n {
                let s = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)] * d[k]).sum::<f64>();
                l[(i, j)] = s / dj;
            }
        }
        Ok(Ldl { l, d })
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.d.len();
        let mut x = b.clone();
        for c in 0..x.ncols() {
            for i in 0..n {
                let s: f64 = (0..i).map(|k| self.l[(i, k)] * x[(k, c)]).sum();
                x[(i, c)] -= s;
            }
            for i in 0..n {
                x[(i, c)] /= self.d[i];
            }
            for i in (0..n).rev() {
                let s: f64 = (i + 1..n).map(|k| self.l[(k, i)] * x[(k, c)]).sum();
                x[(i, c)] -= s;
            }
        }
        x
    }
}

/// Solves the symmetric positive-definite system `A·X = B`, rejecting
/// pivots that vanish relative to the largest diagonal entry.
fn spd_solve(a: DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    let f = Ldl::new(&a, what)?;
    let mut x = f.solve(b);
    // Two rounds of iterative refinement against the unfactored system.
    for _ in 0..2 {
        let r = b - &a * &x;
        x += f.solve(&r);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularMatrix(what.to_string()));
    }
    Ok(x)
}

/// Affine encoder/decoder pair `E(x) = W_e(x − μ)`, `D(z) = μ + W_d z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAutoencoder {
    pub mean: DVector<f64>,
    /// `K × D`
    pub encoder: DMatrix<f64>,
    /// `D × K`
    pub decoder: DMatrix<f64>,
    /// Reconstruction MSE after every iteration.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlsConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        AlsConfig {
            max_iterations: 200,
            tolerance: 1e-8,
            seed: 0,
        }
    }
}

fn mse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm_squared() / (a.len().max(1) as f64)
}

/// Alternating least squares for `min ‖X_c − Z·W‖²` over `Z` (`N × K`) and
/// `W` (`K × D`), `X_c` the column-centered data.
pub fn fit_linear_autoencoder(x: &DMatrix<f64>, k: usize, cfg: &AlsConfig) -> Result<LinearAutoencoder> {
    let (n, d) = x.shape();
    if k == 0 || k > d {
        return Err(Error::Precondition(format!("latent dimension {k} for data of width {d}")));
    }
    if n <= k {
        return Err(Error::Precondition(format!("{n} rows cannot fit {k} latent dimensions")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("autoencoder data".into()));
    }
    let mean = x.row_mean().transpose();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= mean.transpose();
    }
    let r = rank(&xc);
    if r < k {
        return Err(Error::RankDeficient { rank: r, wanted: k });
    }
    let mut g = rng::stream(cfg.seed, streams::INIT, 3);
    let mut w = DMatrix::from_fn(k, d, |_, _| rng::normal(&mut g));
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    let mut z = DMatrix::zeros(n, k);
    for _ in 0..cfg.max_iterations.max(1) {
        // Orthonormal rows keep both half-steps well conditioned.
        w = w.transpose().qr().q().transpose();
        z = &xc * w.transpose();
        let ztz = z.transpose() * &z;
        w = spd_solve(ztz, &(z.transpose() * &xc), "autoencoder decoder step")?;
        let loss = mse(&xc, &(&z * &w));
        trace.push(loss);
        if prev - loss < cfg.tolerance {
            break;
        }
        prev = loss;
    }
    let _ = z;
    // Encoder: least-squares coordinates in the decoder's row space.
    let wwt = &w * w.transpose();
    let encoder = spd_solve(wwt, &w, "autoencoder encoder")?;
    Ok(LinearAutoencoder {
        mean,
        encoder,
        decoder: w.transpose(),
        trace,
    })
}

impl LinearAutoencoder {
    pub fn latent_dim(&self) -> usize {
        self.encoder.nrows()
    }

    pub fn data_dim(&self) -> usize {
        self.mean.len()
    }

    /// Rows of `x` (`N × D`) to latents (`N × K`).
    pub fn encode(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.data_dim() {
            return Err(Error::Shape(format!("data width {} for encoder of width {}", x.ncols(), self.data_dim())));
        }
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(xc * self.encoder.transpose())
    }

    pub fn decode(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::Shape(format!("latent width {} for decoder of width {}", z.ncols(), self.latent_dim())));
        }
        let mut x = z * self.decoder.transpose();
        for mut row in x.row_iter_mut() {
            row += self.mean.transpose();
        }
        Ok(x)
    }

    pub fn reconstruction_mse(&self, x: &DMatrix<f64>) -> Result<f64> {
        Ok(mse(x, &self.decode(&self.encode(x)?)?))
    }
}

/// Codewords of dimension `dim`; entry 0 is the zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub dim: usize,
    pub entries: Vec<Vec<f64>>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn new(entries: Vec<Vec<f64>>) -> Result<Self> {
        let dim = entries.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(Error::Precondition("a codebook needs at least the zero entry".into()));
        }
        if entries.iter().any(|e| e.len() != dim) {
            return Err(Error::Shape("codewords differ in length".into()));
        }
        if entries[0].iter().any(|v| *v != 0.0) {
            return Err(Error::Precondition("codebook entry 0 must be the zero vector".into()));
        }
        if entries.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook".into()));
        }
        Ok(Codebook { dim, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Nearest codeword; ties go to the lowest index.
    pub fn quantize(&self, z: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, e) in self.entries.iter().enumerate() {
            let d = dist2(z, e);
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// `Q(z) = e(I(z)) + e(I(z − e(I(z))))`.
    pub fn quantize_residual(&self, z: &[f64]) -> Vec<f64> {
        let first = &self.entries[self.quantize(z)];
        let rest: Vec<f64> = z.iter().zip(first).map(|(a, b)| a - b).collect();
        let second = &self.entries[self.quantize(&rest)];
        first.iter().zip(second).map(|(a, b)| a + b).collect()
    }

    /// Residual-quantizes a flat latent split into consecutive half-vectors.
    pub fn quantize_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        if !z.len().is_multiple_of(self.dim) {
            return Err(Error::Shape(format!("latent of width {} in half-vectors of {}", z.len(), self.dim)));
        }
        Ok(z.chunks(self.dim).flat_map(|h| self.quantize_residual(h)).collect())
    }
}

/// Lloyd iterations on half-vectors with entry 0 pinned at the origin.
///
/// Returns the codebook and the total squared quantization error after
/// seeding and after every iteration. Empty clusters are re-seeded at the
/// point with the largest current error.
pub fn fit_codebook(points: &[Vec<f64>], n_c: usize, iterations: usize, seed: u64) -> Result<(Codebook, Vec<f64>)> {
    if n_c == 0 {
        return Err(Error::Precondition("codebook size must be at least 1".into()));
    }
    let dim = points.first().map(Vec::len).unwrap_or(0);
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("codebook points must share a nonzero width".into()));
    }
    if points.len() < n_c {
        return Err(Error::Precondition(format!("{} points for {n_c} codewords", points.len())));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("codebook points".into()));
    }
    let mut entries = vec![vec![0.0; dim]];
    let mut r = rng::stream(seed, streams::KMEANS, 0);
    if n_c > 1 {
        entries.push(points[r.gen_range(0..points.len())].clone());
    }
    while entries.len() < n_c {
        let far = farthest(points, &entries);
        entries.push(points[far].clone());
    }
    let assign = |entries: &[Vec<f64>]| -> Vec<(usize, f64)> {
        points
            .par_iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (k, e) in entries.iter().enumerate() {
                    let d = dist2(p, e);
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                best
            })
            .collect()
    };
    let mut a = assign(&entries);
    let mut trace = vec![a.iter().map(|x| x.1).sum::<f64>()];
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; dim]; n_c];
        let mut counts = vec![0usize; n_c];
        for (p, (k, _)) in points.iter().zip(&a) {
            counts[*k] += 1;
            for (s, v) in sums[*k].iter_mut().zip(p) {
                *s += v;
            }
        }
        for k in 1..n_c {
            if counts[k] > 0 {
                entries[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
        a = assign(&entries);
        for k in 1..n_c {
            if !a.iter().any(|x| x.0 == k) {
                let (worst, _) = a
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |m, (j, x)| if x.1 > m.1 { (j, x.1) } else { m });
                entries[k] = points[worst].clone();
                a[worst] = (k, 0.0);
            }
        }
        trace.push(a.iter().map(|x| x.1).sum::<f64>());
    }
    Ok((Codebook::new(entries)?, trace))
}

fn farthest(points: &[Vec<f64>], entries: &[Vec<f64>]) -> usize {
    let mut best = (0, -1.0);
    for (j, p) in points.iter().enumerate() {
        let d = entries.iter().map(|e| dist2(p, e)).fold(f64::INFINITY, f64::min);
        if d > best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Column statistics used to build a design matrix from raw parents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignStats {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DesignStats {
    /// Population mean and standard deviation per column; constant
    /// columns keep a unit scale.
    pub fn fit(columns: Vec<String>, raw: &DMatrix<f64>) -> Result<Self> {
        if columns.len() != raw.ncols() {
            return Err(Error::Shape(format!("{} names for {} columns", columns.len(), raw.ncols())));
        }
        let n = raw.nrows().max(1) as f64;
        let mean: Vec<f64> = raw.column_iter().map(|c| c.sum() / n).collect();
        let std = raw
            .column_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(DesignStats { columns, mean, std })
    }

    /// Statistics that leave raw values unchanged.
    pub fn identity(columns: Vec<String>) -> Self {
        let m = columns.len();
        DesignStats {
            columns,
            mean: vec![0.0; m],
            std: vec![1.0; m],
        }
    }

    /// `[1, (raw − mean)/std]` row by row.
    pub fn design(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = self.mean.len();
        if raw.ncols() != m {
            return Err(Error::Shape(format!("{} parent columns, design expects {m}", raw.ncols())));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parent matrix".into()));
        }
        Ok(DMatrix::from_fn(raw.nrows(), m + 1, |r, c| {
            if c == 0 {
                1.0
            } else {
                (raw[(r, c - 1)] - self.mean[c - 1]) / self.std[c - 1]
            }
        }))
    }
}

/// GLM coefficients `B` (`(m+1) × K`, intercept row first).
#[derive(Debug, Clone, PartialEq)]
pub struct GlmParams {
    pub b: DMatrix<f64>,
    pub jitter: f64,
}

/// Solves `(PᵀP + δI)·B = PᵀZ`.
pub fn glm_fit(z: &DMatrix<f64>, p: &DMatrix<f64>, jitter: f64) -> Result<GlmParams> {
    if z.nrows() != p.nrows() {
        return Err(Error::Shape(format!("{} latent rows for {} design rows", z.nrows(), p.nrows())));
    }
    if p.nrows() < p.ncols() {
        return Err(Error::Precondition(format!(
            "{} rows cannot determine {} coefficients",
            p.nrows(),
            p.ncols()
        )));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::OutOfRange(format!("ridge jitter {jitter}")));
    }
    if z.iter().chain(p.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("GLM inputs".into()));
    }
    let mut ptp = p.transpose() * p;
    for i in 0..ptp.nrows() {
        ptp[(i, i)] += jitter;
    }
    let b = spd_solve(ptp, &(p.transpose() * z), "GLM normal equations")?;
    Ok(GlmParams { b, jitter })
}

fn check_design(params: &GlmParams, z_or_u: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<()> {
    if p.ncols() != params.b.nrows() || z_or_u.ncols() != params.b.ncols() || z_or_u.nrows() != p.nrows() {
        return Err(Error::Shape(format!(
            "latents {:?} and design {:?} against coefficients {:?}",
            z_or_u.shape(),
            p.shape(),
            params.b.shape()
        )));
    }
    Ok(())
}

/// `U_Z = Z − P·B`.
pub fn glm_abduct(params: &GlmParams, z: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_design(params, z, p)?;
    Ok(z - p * &params.b)
}

/// `Ẑ = U_Z + P̂·B`.
pub fn glm_predict(params: &GlmParams, u: &DMatrix<f64>, p_cf: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_design(params, u, p_cf)?;
    Ok(u + p_cf * &params.b)
}

/// `B̄ ← γ·B̄ + (1 − γ)·B_batch` with `B_batch` fit on the batch.
pub fn glm_momentum_update(params: &GlmParams, z: &DMatrix<f64>, p: &DMatrix<f64>, gamma: f64) -> Result<GlmParams> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::OutOfRange(format!("momentum {gamma} outside [0, 1)")));
    }
    let batch = glm_fit(z, p, params.jitter)?;
    if batch.b.shape() != params.b.shape() {
        return Err(Error::Shape("batch coefficients differ in shape".into()));
    }
    Ok(GlmParams {
        b: &params.b * gamma + batch.b * (1.0 - gamma),
        jitter: params.jitter,
    })
}

/// A fitted latent counterfactual pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct VqGlm {
    pub autoencoder: LinearAutoencoder,
    pub codebook: Codebook,
    pub design: DesignStats,
    pub glm: GlmParams,
}

impl VqGlm {
    /// `Q(E(x))` for every row of `x`.
    pub fn latents(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let z = self.autoencoder.encode(x)?;
        let rows: Vec<Vec<f64>> = z
            .row_iter()
            .map(|r| {
                let v: Vec<f64> = r.iter().copied().collect();
                self.codebook.quantize_latent(&v)
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| rows[i][j]))
    }

    /// `D(Q(E(x)))`, the pipeline's reconstruction.
    pub fn reconstruct(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.autoencoder.decode(&self.latents(x)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VqGlmDoc {
    design: DesignStats,
    jitter: f64,
    codeword: usize,
}

fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let t = Tensor::load(path)?;
    if t.dims.len() != 2 {
        return Err(Error::Shape(format!("{} has dims {:?}", path.display(), t.dims)));
    }
    matrix(t.dims[0], t.dims[1], &t.data)
}

fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    Tensor::matrix(m.nrows(), m.ncols(), row_major(m))?.save(path)
}

impl VqGlm {
    /// Writes `mean.cft`, `encoder.cft`, `decoder.cft`, `codebook.cft`,
    /// `B.cft` and `design.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ae = &self.autoencoder;
        save_matrix(&dir.join("mean.cft"), &DMatrix::from_row_slice(1, ae.mean.len(), ae.mean.as_slice()))?;
        save_matrix(&dir.join("encoder.cft"), &ae.encoder)?;
        save_matrix(&dir.join("decoder.cft"), &ae.decoder)?;
        let cb = &self.codebook;
        let flat: Vec<f64> = cb.entries.iter().flatten().copied().collect();
        Tensor::matrix(cb.len(), cb.dim, flat)?.save(dir.join("codebook.cft"))?;
        save_matrix(&dir.join("B.cft"), &self.glm.b)?;
        let doc = VqGlmDoc {
            design: self.design.clone(),
            jitter: self.glm.jitter,
            codeword: cb.dim,
        };
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
        let path = dir.join("design.json");
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("design.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc: VqGlmDoc = serde_json::from_str(&text).map_err(|e| Error::Format(format!("design.json: {e}")))?;
        let mean = load_matrix(&dir.join("mean.cft"))?;
        let encoder = load_matrix(&dir.join("encoder.cft"))?;
        let decoder = load_matrix(&dir.join("decoder.cft"))?;
        if mean.nrows() != 1 || encoder.ncols() != mean.ncols() || decoder.shape() != (encoder.ncols(), encoder.nrows()) {
            return Err(Error::Shape("autoencoder tensors disagree in shape".into()));
        }
        let cb = Tensor::load(dir.join("codebook.cft"))?;
        if cb.dims.len() != 2 || cb.dims[1] != doc.codeword {
            return Err(Error::Shape(format!("codebook dims {:?}", cb.dims)));
        }
        let codebook = Codebook::new(cb.data.chunks(doc.codeword).map(<[f64]>::to_vec).collect())?;
        let b = load_matrix(&dir.join("B.cft"))?;
        if b.nrows() != doc.design.mean.len() + 1 || b.ncols() != encoder.nrows() {
            return Err(Error::Shape(format!("coefficients {:?}", b.shape())));
        }
        Ok(VqGlm {
            autoencoder: LinearAutoencoder {
                mean: mean.row(0).transpose(),
                encoder,
                decoder,
                trace: Vec::new(),
            },
            codebook,
            design: doc.design,
            glm: GlmParams { b, jitter: doc.jitter },
        })
    }
}

/// Abduction, action and prediction in latent space for rows of `x`, with
/// raw parent rows `pa` and counterfactual parents `pa_cf`.
pub fn latent_counterfactual(
    model: &VqGlm,
    x: &DMatrix<f64>,
    pa: &DMatrix<f64>,
    pa_cf: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let z = model.latents(x)?;
    let p = model.design.design(pa)?;
    let u = glm_abduct(&model.glm, &z, &p)?;
    let p_cf = model.design.design(pa_cf)?;
    let z_cf = glm_predict(&model.glm, &u, &p_cf)?;
    model.autoencoder.decode(&z_cf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    /// Latent width `K`.
    pub latent: usize,
    /// Codewords `N_C`, including the pinned zero.
    pub entries: usize,
    /// Width `n_D` of each latent vector; codewords have `n_D / 2`.
    pub vector: usize,
    pub iterations: usize,
    /// Ridge jitter `δ` on `PᵀP`.
    pub jitter: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            latent: 16,
            entries: 64,
            vector: 4,
            iterations: 50,
            jitter: 1e-8,
        }
    }
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vector < 2 || !self.vector.is_multiple_of(2) {
            return Err(Error::Config(format!("latent vector width {} must be even", self.vector)));
        }
        if self.latent == 0 || !self.latent.is_multiple_of(self.vector) {
            return Err(Error::Config(format!(
                "latent width {} is not a multiple of the vector width {}",
                self.latent, self.vector
            )));
        }
        if self.entries == 0 {
            return Err(Error::Config("codebook needs at least one entry".into()));
        }
        Ok(())
    }
}

/// Fits autoencoder, codebook and GLM on images `x` (`N × D`) with raw
/// parent matrix `pa` (`N × m`).
pub fn fit_vqglm(
    x: &DMatrix<f64>,
    pa: &DMatrix<f64>,
    columns: Vec<String>,
    cfg: &CodebookConfig,
    seed: u64,
) -> Result<VqGlm> {
    cfg.validate()?;
    let autoencoder = fit_linear_autoencoder(
        x,
        cfg.latent,
        &AlsConfig {
            seed,
            ..AlsConfig::default()
        },
    )?;
    let z = autoencoder.encode(x)?;
    let half = cfg.vector / 2;
    let points: Vec<Vec<f64>> = z
        .row_iter()
        .flat_map(|r| r.iter().copied().collect::<Vec<f64>>().chunks(half).map(<[f64]>::to_vec).collect::<Vec<_>>())
        .collect();
    let (codebook, _) = fit_codebook(&points, cfg.entries, cfg.iterations, seed)?;
    let design = DesignStats::fit(columns, pa)?;
    let mut model = VqGlm {
        autoencoder,
        codebook,
        design,
        glm: GlmParams {
            b: DMatrix::zeros(pa.ncols() + 1, cfg.latent),
            jitter: cfg.jitter,
        },
    };
    let zq = model.latents(x)?;
    model.glm = glm_fit(&zq, &model.design.design(pa)?, cfg.jitter)?;
    Ok(model)
}

#[cfg(test)]
mod tests;
