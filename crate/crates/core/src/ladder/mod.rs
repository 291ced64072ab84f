//! Hierarchical latent model for the image variable.
//!
//! Generative top-down pass: `h_{L+1} = h_init`, then for `i = L..1`
//! `z_i ~ p(z_i | ·)` and `h_i = h_{i+1} + f_i(z_i, pa)`, and finally
//! `x ~ N(μ(h_1), σ(h_1))`. Inference runs bottom-up deterministic features
//! `d_i` followed by a top-down posterior `q(z_i | d_i, h_{i+1}, pa)`.
//!
//! Two variants differ only in the prior. In the exogenous variant the
//! prior of layer `i` reads the latents above it (`h_init` at the top) and
//! never `pa`, so the whole latent stack is exogenous noise. In the mediator
//! variant it reads `(h_{i+1}, pa)` and the latents become mediators.

mod infer;
mod mechanism;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mechanisms::{LOG_SCALE_MAX, LOG_SCALE_MIN};
use crate::nn::{Bound, ParamFn, ParamSet, SlotId};
use crate::rng::{self, streams};

pub use infer::{abduct_epsilon, mixture_params, EffectNorms, EffectReport, LatentStack, LayerParams};
pub use mechanism::LadderMechanism;
pub use train::{TrainConfig, TrainReport};
pub(crate) use train::{combine, permutation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Exogenous,
    Mediator,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exogenous" => Ok(Variant::Exogenous),
            "mediator" => Ok(Variant::Mediator),
            other => Err(Error::Config(format!(
                "unknown ladder variant `{other}` (expected exogenous or mediator)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Exogenous => "exogenous",
            Variant::Mediator => "mediator",
        })
    }
}

/// Layer sizes. `z[0]` is the bottom layer `z_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderDims {
    pub x: usize,
    pub pa: usize,
    pub z: Vec<usize>,
    pub h: usize,
    pub hidden: usize,
}

impl Default for LadderDims {
    fn default() -> Self {
        LadderDims {
            x: 256,
            pa: 5,
            z: vec![4, 8, 16],
            h: 32,
            hidden: 64,
        }
    }
}

impl LadderDims {
    pub fn layers(&self) -> usize {
        self.z.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.z.is_empty() || self.z.contains(&0) || self.x == 0 || self.h == 0 {
            return Err(Error::Config(format!("invalid ladder dimensions {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerNets {
    up: ParamFn,
    prior: ParamFn,
    posterior: ParamFn,
    residual: ParamFn,
}

#[derive(Debug, Clone)]
pub struct LadderModel {
    pub variant: Variant,
    pub dims: LadderDims,
    pub params: ParamSet,
    h_init: SlotId,
    layers: Vec<LayerNets>,
    decoder: ParamFn,
}

/// Tape nodes of the factual inference and generative pass over a batch.
pub(crate) struct Pass {
    pub n: usize,
    pub z: Vec<Var>,
    pub mu_q: Vec<Var>,
    pub ls_q: Vec<Var>,
    pub mu_p: Vec<Var>,
    pub ls_p: Vec<Var>,
    pub x_mu: Var,
    pub x_ls: Var,
    /// `n × 1` per-sample free energy.
    pub free_energy: Var,
    /// `n × 1` per-sample KL of each layer.
    pub kl: Vec<Var>,
    /// `n × 1` per-sample negative log-likelihood.
    pub nll: Var,
}

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

impl LadderModel {
    pub fn new(variant: Variant, dims: LadderDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, streams::INIT, 0);
        let l = dims.layers();
        let h_init = params.add("h_init", 1, dims.h, || 0.0);
        let mut layers = Vec::with_capacity(l);
        for i in 0..l {
            let zi = dims.z[i];
            let up_in = if i == 0 { dims.x } else { dims.h };
            let prior_in = match variant {
                Variant::Exogenous if i + 1 == l => dims.h,
                Variant::Exogenous => dims.z[i + 1..].iter().sum(),
                Variant::Mediator => dims.h + dims.pa,
            };
            let k = i + 1;
            layers.push(LayerNets {
                up: ParamFn::new(&mut params, &format!("up{k}"), up_in, dims.h, None, 1.0, &mut r),
                prior: ParamFn::new(
                    &mut params,
                    &format!("prior{k}"),
                    prior_in,
                    2 * zi,
                    Some(dims.hidden),
                    0.1,
                    &mut r,
                ),
                posterior: ParamFn::new(
                    &mut params,
                    &format!("posterior{k}"),
                    2 * dims.h + dims.pa,
                    2 * zi,
                    Some(dims.hidden),
                    0.1,
                    &mut r,
                ),
                residual: ParamFn::new(
                    &mut params,
                    &format!("residual{k}"),
                    zi + dims.pa,
                    dims.h,
                    Some(dims.hidden),
                    0.5,
                    &mut r,
                ),
            });
        }
        let decoder = ParamFn::new(&mut params, "decoder", dims.h, 2 * dims.x, Some(dims.hidden), 0.1, &mut r);
        Ok(LadderModel {
            variant,
            dims,
            params,
            h_init,
            layers,
            decoder,
        })
    }

    pub fn layers(&self) -> usize {
        self.dims.layers()
    }

    pub(crate) fn require(&self, v: Variant) -> Result<()> {
        if self.variant == v {
            Ok(())
        } else {
            Err(Error::Variant(format!(
                "operation needs the {v} variant, model is {}",
                self.variant
            )))
        }
    }

    /// Slot ids of every residual net `f_i`.
    pub fn residual_slots(&self) -> Vec<SlotId> {
        self.layers.iter().flat_map(|l| l.residual.slot_ids()).collect()
    }

    /// Slot ids of the posterior nets and their `(d_i, h_{i+1}, pa)` input
    /// widths; together with the prior slots this lets tests tie the two.
    pub fn prior_posterior_slots(&self, layer: usize) -> (Vec<SlotId>, Vec<SlotId>) {
        (
            self.layers[layer].prior.slot_ids(),
            self.layers[layer].posterior.slot_ids(),
        )
    }

    fn heads(tape: &mut Tape, net: &ParamFn, p: &Bound, input: Var, d: usize) -> (Var, Var) {
        let o = net.apply(tape, p, input);
        let mu = tape.slice(o, 0, d);
        let raw = tape.slice(o, d, d);
        (mu, tape.clamp(raw, LOG_SCALE_MIN, LOG_SCALE_MAX))
    }

    fn h_top(&self, tape: &mut Tape, p: &Bound, n: usize) -> Var {
        tape.repeat_rows(p.var(self.h_init), n)
    }

    /// Prior heads of layer `i`. `z_above` holds `z_{i+1..L}` in layer order.
    fn prior(&self, tape: &mut Tape, p: &Bound, i: usize, h_above: Var, z_above: &[Var], pa: Var) -> (Var, Var) {
        let input = match self.variant {
            Variant::Exogenous if z_above.is_empty() => h_above,
            Variant::Exogenous => tape.concat(z_above),
            Variant::Mediator => tape.concat(&[h_above, pa]),
        };
        Self::heads(tape, &self.layers[i].prior, p, input, self.dims.z[i])
    }

    fn residual(&self, tape: &mut Tape, p: &Bound, i: usize, h_above: Var, z: Var, pa: Var) -> Var {
        let input = tape.concat(&[z, pa]);
        let f = self.layers[i].residual.apply(tape, p, input);
        tape.add(h_above, f)
    }

    fn decode_h(&self, tape: &mut Tape, p: &Bound, h1: Var) -> (Var, Var) {
        Self::heads(tape, &self.decoder, p, h1, self.dims.x)
    }

    fn bottom_up(&self, tape: &mut Tape, p: &Bound, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layers());
        let mut cur = x;
        for l in &self.layers {
            let a = l.up.apply(tape, p, cur);
            cur = tape.tanh(a);
            out.push(cur);
        }
        out
    }

    /// `h_1` for a given latent stack.
    fn h_from_z(&self, tape: &mut Tape, p: &Bound, z: &[Var], pa: Var) -> Var {
        let n = tape.shape(pa).0;
        let mut h = self.h_top(tape, p, n);
        for i in (0..self.layers()).rev() {
            h = self.residual(tape, p, i, h, z[i], pa);
        }
        h
    }

    /// Ancestral draw of the latents from the prior with standardized noise `u_z`.
    fn prior_sample(&self, tape: &mut Tape, p: &Bound, pa: Var, u_z: &[Var]) -> Vec<Var> {
        let n = tape.shape(pa).0;
        let l = self.layers();
        let mut z: Vec<Option<Var>> = vec![None; l];
        let mut h = self.h_top(tape, p, n);
        for i in (0..l).rev() {
            let above: Vec<Var> = z[i + 1..].iter().map(|v| v.unwrap()).collect();
            let (mu, ls) = self.prior(tape, p, i, h, &above, pa);
            let s = tape.exp(ls);
            let e = tape.mul(s, u_z[i]);
            let zi = tape.add(mu, e);
            z[i] = Some(zi);
            h = self.residual(tape, p, i, h, zi, pa);
        }
        z.into_iter().map(Option::unwrap).collect()
    }

    /// Factual pass with posterior noise `eps[i]` (`n × d_i`, row-major).
    pub(crate) fn factual(&self, tape: &mut Tape, p: &Bound, x: Var, pa: Var, eps: &[Vec<f64>]) -> Pass {
        let n = tape.shape(x).0;
        let l = self.layers();
        let d = self.bottom_up(tape, p, x);
        let mut h = self.h_top(tape, p, n);
        let mut z: Vec<Option<Var>> = vec![None; l];
        let (mut mu_q, mut ls_q, mut mu_p, mut ls_p, mut kl) =
            (vec![None; l], vec![None; l], vec![None; l], vec![None; l], vec![None; l]);
        for i in (0..l).rev() {
            let above: Vec<Var> = z[i + 1..].iter().map(|v| v.unwrap()).collect();
            let (mp, lp) = self.prior(tape, p, i, h, &above, pa);
            let q_in = tape.concat(&[d[i], h, pa]);
            let (mq, lq) = Self::heads(tape, &self.layers[i].posterior, p, q_in, self.dims.z[i]);
            let sq = tape.exp(lq);
            let e = tape.constant(n, self.dims.z[i], eps[i].clone());
            let noise = tape.mul(sq, e);
            let zi = tape.add(mq, noise);
            kl[i] = Some(gaussian_kl(tape, mq, lq, mp, lp));
            h = self.residual(tape, p, i, h, zi, pa);
            z[i] = Some(zi);
            mu_q[i] = Some(mq);
            ls_q[i] = Some(lq);
            mu_p[i] = Some(mp);
            ls_p[i] = Some(lp);
        }
        let (x_mu, x_ls) = self.decode_h(tape, p, h);
        let nll = gaussian_nll(tape, x, x_mu, x_ls);
        let mut fe = nll;
        for k in kl.iter().flatten() {
            fe = tape.add(fe, *k);
        }
        let un = |v: Vec<Option<Var>>| v.into_iter().map(Option::unwrap).collect::<Vec<_>>();
        Pass {
            n,
            z: un(z),
            mu_q: un(mu_q),
            ls_q: un(ls_q),
            mu_p: un(mu_p),
            ls_p: un(ls_p),
            x_mu,
            x_ls,
            free_energy: fe,
            kl: un(kl),
            nll,
        }
    }

    /// Counterfactual generation on the tape from a factual pass.
    ///
    /// Returns `(x_cf, z_cf, u_x)`. The exogenous variant reuses the factual
    /// latents; the mediator variant re-samples each layer from the mixture
    /// of counterfactual prior and factual posterior with the abducted
    /// standardized noise of that layer.
    pub(crate) fn counterfactual_pass(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pass: &Pass,
        x: Var,
        pa_cf: Var,
        pi: f64,
    ) -> (Var, Vec<Var>, Var) {
        let diff = tape.sub(x, pass.x_mu);
        let neg = tape.scale(pass.x_ls, -1.0);
        let inv = tape.exp(neg);
        let u_x = tape.mul(diff, inv);
        let z_cf = match self.variant {
            Variant::Exogenous => pass.z.clone(),
            // With π = 0 the mixture is the factual posterior and the
            // reparameterization returns the factual latents exactly.
            Variant::Mediator if pi == 0.0 => pass.z.clone(),
            Variant::Mediator => {
                let l = self.layers();
                let mut z: Vec<Option<Var>> = vec![None; l];
                let mut h = self.h_top(tape, p, pass.n);
                for i in (0..l).rev() {
                    let above: Vec<Var> = z[i + 1..].iter().map(|v| v.unwrap()).collect();
                    let (mp, lp) = self.prior(tape, p, i, h, &above, pa_cf);
                    let dz = tape.sub(pass.z[i], pass.mu_q[i]);
                    let nq = tape.scale(pass.ls_q[i], -1.0);
                    let iq = tape.exp(nq);
                    let u_z = tape.mul(dz, iq);
                    let (mr, sr) = mixture_on_tape(tape, mp, lp, pass.mu_q[i], pass.ls_q[i], pi);
                    let e = tape.mul(sr, u_z);
                    let zi = tape.add(mr, e);
                    h = self.residual(tape, p, i, h, zi, pa_cf);
                    z[i] = Some(zi);
                }
                z.into_iter().map(Option::unwrap).collect()
            }
        };
        let h = self.h_from_z(tape, p, &z_cf, pa_cf);
        let (mu, ls) = self.decode_h(tape, p, h);
        let s = tape.exp(ls);
        let e = tape.mul(s, u_x);
        (tape.add(mu, e), z_cf, u_x)
    }

    /// Posterior noise of one sample: layer `i` gets `d_i` standard normals.
    pub fn posterior_noise(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, streams::POSTERIOR, 0);
        self.dims.z.iter().map(|&d| rng::normals(&mut r, d)).collect()
    }

    /// Stacks per-sample posterior noise into per-layer `n × d_i` blocks.
    pub(crate) fn batch_noise(&self, seeds: &[u64]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self
            .dims
            .z
            .iter()
            .map(|&d| Vec::with_capacity(d * seeds.len()))
            .collect();
        for &s in seeds {
            for (o, e) in out.iter_mut().zip(self.posterior_noise(s)) {
                o.extend(e);
            }
        }
        out
    }

    pub(crate) fn check_batch(&self, x: &[f64], pa: &[f64]) -> Result<usize> {
        if !x.len().is_multiple_of(self.dims.x) {
            return Err(Error::Shape(format!("x length {} is not a multiple of {}", x.len(), self.dims.x)));
        }
        let n = x.len() / self.dims.x;
        if pa.len() != n * self.dims.pa {
            return Err(Error::Shape(format!(
                "{} parent values for {n} samples of width {}",
                pa.len(),
                self.dims.pa
            )));
        }
        if x.iter().chain(pa).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        Ok(n)
    }

    /// Free energy (negative ELBO) per sample with its likelihood and KL split.
    pub fn elbo(&self, x: &[f64], pa: &[f64], seeds: &[u64]) -> Result<ElboReport> {
        let n = self.check_batch(x, pa)?;
        if seeds.len() != n {
            return Err(Error::Shape(format!("{} seeds for {n} samples", seeds.len())));
        }
        let eps = self.batch_noise(seeds);
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(n, self.dims.x, x.to_vec());
        let pv = tape.constant(n, self.dims.pa, pa.to_vec());
        let pass = self.factual(&mut tape, &p, xv, pv, &eps);
        let fe = tape.value(pass.free_energy).to_vec();
        if fe.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("free energy".into()));
        }
        Ok(ElboReport {
            free_energy: fe,
            nll: tape.value(pass.nll).to_vec(),
            kl: pass.kl.iter().map(|k| tape.value(*k).to_vec()).collect(),
        })
    }

    /// Mean free energy and its gradient with respect to all parameters.
    pub fn free_energy_grad(&self, x: &[f64], pa: &[f64], seeds: &[u64]) -> Result<(f64, Vec<f64>)> {
        let n = self.check_batch(x, pa)?;
        let eps = self.batch_noise(seeds);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.constant(n, self.dims.x, x.to_vec());
        let pv = tape.constant(n, self.dims.pa, pa.to_vec());
        let pass = self.factual(&mut tape, &p, xv, pv, &eps);
        let f = tape.mean(pass.free_energy);
        let g = tape.backward(f);
        Ok((tape.scalar(f), self.params.gather(&p, &g)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("params"), "")
    }

    pub fn load(variant: Variant, dims: LadderDims, dir: &Path) -> Result<Self> {
        let mut m = LadderModel::new(variant, dims, 0)?;
        m.params.load_into(&dir.join("params"), "")?;
        Ok(m)
    }
}

/// Per-sample outputs of [`LadderModel::elbo`].
#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    pub free_energy: Vec<f64>,
    pub nll: Vec<f64>,
    /// `kl[i][j]`: layer `i + 1`, sample `j`.
    pub kl: Vec<Vec<f64>>,
}

impl ElboReport {
    pub fn mean_free_energy(&self) -> f64 {
        self.free_energy.iter().sum::<f64>() / self.free_energy.len().max(1) as f64
    }

    pub fn elbo(&self) -> Vec<f64> {
        self.free_energy.iter().map(|f| -f).collect()
    }
}

/// `KL(N(μq, σq) ‖ N(μp, σp))` summed over columns, as `n × 1`.
fn gaussian_kl(tape: &mut Tape, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
    let a = tape.sub(lp, lq);
    let lq2 = tape.scale(lq, 2.0);
    let vq = tape.exp(lq2);
    let dm = tape.sub(mq, mp);
    let dm2 = tape.square(dm);
    let num = tape.add(vq, dm2);
    let lp2 = tape.scale(lp, -2.0);
    let inv_vp = tape.exp(lp2);
    let r = tape.mul(num, inv_vp);
    let half = tape.scale(r, 0.5);
    let s = tape.add(a, half);
    let s = tape.offset(s, -0.5);
    tape.sum_cols(s)
}

/// Gaussian negative log-density summed over columns, as `n × 1`.
fn gaussian_nll(tape: &mut Tape, x: Var, mu: Var, ls: Var) -> Var {
    let diff = tape.sub(x, mu);
    let neg = tape.scale(ls, -1.0);
    let inv = tape.exp(neg);
    let u = tape.mul(diff, inv);
    let u2 = tape.square(u);
    let half = tape.scale(u2, 0.5);
    let s = tape.add(half, ls);
    let s = tape.offset(s, HALF_LN_2PI);
    tape.sum_cols(s)
}

/// Moment-matched mixture `π·N(μp, σp²) + (1 − π)·N(μq, σq²)` on the tape,
/// returning `(μr, σr)`. The endpoints return the exact component.
fn mixture_on_tape(tape: &mut Tape, mp: Var, lp: Var, mq: Var, lq: Var, pi: f64) -> (Var, Var) {
    if pi == 0.0 {
        return (mq, tape.exp(lq));
    }
    if pi == 1.0 {
        return (mp, tape.exp(lp));
    }
    let a = tape.scale(mp, pi);
    let b = tape.scale(mq, 1.0 - pi);
    let mu = tape.add(a, b);
    let lp2 = tape.scale(lp, 2.0);
    let vp = tape.exp(lp2);
    let lq2 = tape.scale(lq, 2.0);
    let vq = tape.exp(lq2);
    let vp = tape.scale(vp, pi);
    let vq = tape.scale(vq, 1.0 - pi);
    let dm = tape.sub(mp, mq);
    let dm2 = tape.square(dm);
    let spread = tape.scale(dm2, pi * (1.0 - pi));
    let v = tape.add(vp, vq);
    let v = tape.add(v, spread);
    (mu, tape.sqrt(v))
}

#[cfg(test)]
mod tests;
