//! Abduction, counterfactual generation and mediation effects.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LadderModel, Variant};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// A latent stack, bottom layer first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStack {
    pub z: Vec<Vec<f64>>,
    /// Standardized posterior noise `(z_i − μq_i) / σq_i`, when abducted.
    pub u_z: Option<Vec<Vec<f64>>>,
    /// Encoded parents the stack was inferred under.
    pub pa: Vec<f64>,
}

/// Posterior and prior Gaussians of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub mu_q: Vec<f64>,
    pub sigma_q: Vec<f64>,
    pub mu_p: Vec<f64>,
    pub sigma_p: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectNorms {
    pub de: f64,
    pub ie: f64,
    pub te: f64,
}

/// Direct, indirect and total effect images with their L1 norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub de: Vec<f64>,
    pub ie: Vec<f64>,
    pub te: Vec<f64>,
    pub norms: EffectNorms,
    /// Largest deviation from `te = ie + (g(p̃a, z̃) − g(pa, z̃))`.
    pub telescoping_error: f64,
}

/// `ε = (x − μ) / σ`.
pub fn abduct_epsilon(x: &[f64], mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    if x.len() != mu.len() || x.len() != sigma.len() {
        return Err(Error::Shape("abduct_epsilon operands differ in length".into()));
    }
    let e: Vec<f64> = x
        .iter()
        .zip(mu.iter().zip(sigma))
        .map(|(x, (m, s))| (x - m) / s)
        .collect();
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("abducted pixel noise".into()));
    }
    Ok(e)
}

/// Moment-matched Gaussian for `π·N(μp, σp²) + (1 − π)·N(μq, σq²)`.
///
/// `σr² = π·σp² + (1 − π)·σq² + π(1 − π)(μp − μq)²`, which equals the
/// second-moment form `π(σp² + μp²) + (1 − π)(σq² + μq²) − μr²` without its
/// cancellation. At `π = 0` and `π = 1` the component is returned as is.
pub fn mixture_params(
    mu_p: &[f64],
    sigma_p: &[f64],
    mu_q: &[f64],
    sigma_q: &[f64],
    pi: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::OutOfRange(format!("mixture weight {pi} outside [0, 1]")));
    }
    let n = mu_p.len();
    if [sigma_p.len(), mu_q.len(), sigma_q.len()].iter().any(|&l| l != n) {
        return Err(Error::Shape("mixture operands differ in length".into()));
    }
    if pi == 0.0 {
        return Ok((mu_q.to_vec(), sigma_q.to_vec()));
    }
    if pi == 1.0 {
        return Ok((mu_p.to_vec(), sigma_p.to_vec()));
    }
    let mut mu = Vec::with_capacity(n);
    let mut sd = Vec::with_capacity(n);
    for k in 0..n {
        mu.push(pi * mu_p[k] + (1.0 - pi) * mu_q[k]);
        let d = mu_p[k] - mu_q[k];
        sd.push(
            (pi * sigma_p[k] * sigma_p[k] + (1.0 - pi) * sigma_q[k] * sigma_q[k] + pi * (1.0 - pi) * d * d).sqrt(),
        );
    }
    Ok((mu, sd))
}

const CHUNK: usize = 64;

impl LadderModel {
    fn check_pi(pi: f64) -> Result<()> {
        if (0.0..=1.0).contains(&pi) {
            Ok(())
        } else {
            Err(Error::OutOfRange(format!("mixture weight {pi} outside [0, 1]")))
        }
    }

    fn constants(&self, tape: &mut Tape, x: &[f64], pa: &[f64]) -> (Var, Var) {
        let n = x.len() / self.dims.x;
        let xv = tape.constant(n, self.dims.x, x.to_vec());
        let pv = tape.constant(n, self.dims.pa, pa.to_vec());
        (xv, pv)
    }

    fn stack_vars(&self, tape: &mut Tape, z: &[Vec<f64>]) -> Result<Vec<Var>> {
        if z.len() != self.layers() {
            return Err(Error::Shape(format!("{} latent layers, model has {}", z.len(), self.layers())));
        }
        z.iter()
            .zip(&self.dims.z)
            .map(|(v, &d)| {
                if v.len() != d {
                    Err(Error::Shape(format!("latent layer has {} values, expected {d}", v.len())))
                } else {
                    Ok(tape.constant(1, d, v.clone()))
                }
            })
            .collect()
    }

    /// Decoder `(μ, σ)` for a latent stack under encoded parents `pa`.
    pub fn decode(&self, z: &LatentStack, pa: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if pa.len() != self.dims.pa {
            return Err(Error::Shape(format!("{} parent values, expected {}", pa.len(), self.dims.pa)));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let zs = self.stack_vars(&mut tape, &z.z)?;
        let pv = tape.constant(1, self.dims.pa, pa.to_vec());
        let h = self.h_from_z(&mut tape, &p, &zs, pv);
        let (mu, ls) = self.decode_h(&mut tape, &p, h);
        let sigma = tape.value(ls).iter().map(|v| v.exp()).collect();
        Ok((tape.value(mu).to_vec(), sigma))
    }

    /// Draws the latents from the prior given standardized noise per layer.
    pub fn sample_prior(&self, pa: &[f64], u_z: &[Vec<f64>]) -> Result<LatentStack> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let us = self.stack_vars(&mut tape, u_z)?;
        let pv = tape.constant(1, self.dims.pa, pa.to_vec());
        let z = self.prior_sample(&mut tape, &p, pv, &us);
        Ok(LatentStack {
            z: z.iter().map(|v| tape.value(*v).to_vec()).collect(),
            u_z: Some(u_z.to_vec()),
            pa: pa.to_vec(),
        })
    }

    /// One posterior sample `z ~ q(z | x, pa)` together with its
    /// standardized noise recomputed as `(z − μq) / σq`.
    pub fn posterior_stack(&self, x: &[f64], pa: &[f64], seed: u64) -> Result<LatentStack> {
        self.check_batch(x, pa)?;
        if pa.len() != self.dims.pa {
            return Err(Error::Shape("posterior_stack takes one sample".into()));
        }
        let eps = self.posterior_noise(seed);
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let (xv, pv) = self.constants(&mut tape, x, pa);
        let pass = self.factual(&mut tape, &p, xv, pv, &eps);
        let mut z = Vec::new();
        let mut u = Vec::new();
        for i in 0..self.layers() {
            let zi = tape.value(pass.z[i]).to_vec();
            let mq = tape.value(pass.mu_q[i]);
            let lq = tape.value(pass.ls_q[i]);
            u.push(
                zi.iter()
                    .zip(mq.iter().zip(lq))
                    .map(|(z, (m, l))| (z - m) / l.exp())
                    .collect(),
            );
            z.push(zi);
        }
        Ok(LatentStack {
            z,
            u_z: Some(u),
            pa: pa.to_vec(),
        })
    }

    /// Mediator abduction: posterior latents and their standardized noise.
    pub fn abduct_mediator(&self, x: &[f64], pa: &[f64], seed: u64) -> Result<LatentStack> {
        self.require(Variant::Mediator)?;
        self.posterior_stack(x, pa, seed)
    }

    /// Posterior and prior Gaussians of every layer along the posterior
    /// sample drawn with `seed`.
    pub fn layer_params(&self, x: &[f64], pa: &[f64], seed: u64) -> Result<Vec<LayerParams>> {
        self.check_batch(x, pa)?;
        let eps = self.posterior_noise(seed);
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let (xv, pv) = self.constants(&mut tape, x, pa);
        let pass = self.factual(&mut tape, &p, xv, pv, &eps);
        let exp = |v: &[f64]| v.iter().map(|l| l.exp()).collect::<Vec<f64>>();
        Ok((0..self.layers())
            .map(|i| LayerParams {
                mu_q: tape.value(pass.mu_q[i]).to_vec(),
                sigma_q: exp(tape.value(pass.ls_q[i])),
                mu_p: tape.value(pass.mu_p[i]).to_vec(),
                sigma_p: exp(tape.value(pass.ls_p[i])),
            })
            .collect())
    }

    /// `log p(z_{1:L} | pa)` of a latent stack under the prior.
    pub fn prior_log_density(&self, z: &LatentStack, pa: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let zs = self.stack_vars(&mut tape, &z.z)?;
        let pv = tape.constant(1, self.dims.pa, pa.to_vec());
        let mut h = self.h_top(&mut tape, &p, 1);
        let mut total = 0.0;
        for i in (0..self.layers()).rev() {
            let (mu, ls) = self.prior(&mut tape, &p, i, h, &zs[i + 1..], pv);
            for ((zv, m), l) in z.z[i].iter().zip(tape.value(mu)).zip(tape.value(ls)) {
                let u = (zv - m) / l.exp();
                total -= 0.5 * u * u + l + super::HALF_LN_2PI;
            }
            h = self.residual(&mut tape, &p, i, h, zs[i], pv);
        }
        Ok(total)
    }

    /// Runs the factual and counterfactual passes over rows of `x`, in
    /// parallel chunks. Row `r` uses posterior seed `seeds[r]`.
    fn cf_rows(
        &self,
        x: &[f64],
        pa: &[f64],
        pa_cf: &[f64],
        pi: f64,
        seeds: &[u64],
    ) -> Result<(Vec<f64>, Vec<Vec<Vec<f64>>>)> {
        Self::check_pi(pi)?;
        let n = self.check_batch(x, pa)?;
        self.check_batch(x, pa_cf)?;
        if seeds.len() != n {
            return Err(Error::Shape(format!("{} seeds for {n} samples", seeds.len())));
        }
        let (dx, dp) = (self.dims.x, self.dims.pa);
        let parts: Vec<Result<(Vec<f64>, Vec<Vec<f64>>)>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let (a, b) = (c * CHUNK, ((c + 1) * CHUNK).min(n));
                let m = b - a;
                let eps = self.batch_noise(&seeds[a..b]);
                let mut tape = Tape::new();
                let p = self.params.bind_frozen(&mut tape);
                let xv = tape.constant(m, dx, x[a * dx..b * dx].to_vec());
                let pv = tape.constant(m, dp, pa[a * dp..b * dp].to_vec());
                let pc = tape.constant(m, dp, pa_cf[a * dp..b * dp].to_vec());
                let pass = self.factual(&mut tape, &p, xv, pv, &eps);
                let (xc, zc, _) = self.counterfactual_pass(&mut tape, &p, &pass, xv, pc, pi);
                let out = tape.value(xc).to_vec();
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("counterfactual image".into()));
                }
                Ok((out, zc.iter().map(|v| tape.value(*v).to_vec()).collect()))
            })
            .collect();
        let mut xs = Vec::with_capacity(n * dx);
        let mut zs = Vec::new();
        for part in parts {
            let (x, z) = part?;
            xs.extend(x);
            zs.push(z);
        }
        Ok((xs, zs))
    }

    /// Batched counterfactuals for either variant; `pi` is ignored by the
    /// exogenous variant.
    pub fn counterfactual_batch(
        &self,
        x: &[f64],
        pa: &[f64],
        pa_cf: &[f64],
        pi: f64,
        seeds: &[u64],
    ) -> Result<Vec<f64>> {
        Ok(self.cf_rows(x, pa, pa_cf, pi, seeds)?.0)
    }

    /// `x̃ = μ(z, p̃a) + σ(z, p̃a)·ε` with `z ~ q(z | x, pa)` drawn once.
    pub fn counterfactual_exogenous(&self, x: &[f64], pa: &[f64], pa_cf: &[f64], seed: u64) -> Result<Vec<f64>> {
        self.require(Variant::Exogenous)?;
        self.counterfactual_batch(x, pa, pa_cf, 0.0, &[seed])
    }

    /// Mediator counterfactual; returns `x̃` and the counterfactual latents `z̃`.
    pub fn counterfactual_mediator(
        &self,
        x: &[f64],
        pa: &[f64],
        pa_cf: &[f64],
        pi: f64,
        seed: u64,
    ) -> Result<(Vec<f64>, LatentStack)> {
        self.require(Variant::Mediator)?;
        let (xc, mut zs) = self.cf_rows(x, pa, pa_cf, pi, &[seed])?;
        Ok((
            xc,
            LatentStack {
                z: zs.remove(0),
                u_z: None,
                pa: pa_cf.to_vec(),
            },
        ))
    }

    /// Counterfactual latents `z̃` from abducted standardized noise `u_z`:
    /// the factual posterior is re-evaluated along `z = μq + σq·u_z` and
    /// each layer is re-sampled from the mixture with the same noise.
    pub fn mediate(&self, x: &[f64], pa: &[f64], pa_cf: &[f64], u_z: &[Vec<f64>], pi: f64) -> Result<LatentStack> {
        self.require(Variant::Mediator)?;
        Self::check_pi(pi)?;
        self.check_batch(x, pa)?;
        self.check_batch(x, pa_cf)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        self.stack_vars(&mut tape, u_z)?;
        let (xv, pv) = self.constants(&mut tape, x, pa);
        let pc = tape.constant(1, self.dims.pa, pa_cf.to_vec());
        let pass = self.factual(&mut tape, &p, xv, pv, u_z);
        let (_, z_cf, _) = self.counterfactual_pass(&mut tape, &p, &pass, xv, pc, pi);
        Ok(LatentStack {
            z: z_cf.iter().map(|v| tape.value(*v).to_vec()).collect(),
            u_z: None,
            pa: pa_cf.to_vec(),
        })
    }

    /// `g(pa, z) = μ(z, pa) + σ(z, pa)·u_x` for a fixed pixel noise.
    fn g(&self, z: &LatentStack, pa: &[f64], u_x: &[f64]) -> Result<Vec<f64>> {
        let (mu, sigma) = self.decode(z, pa)?;
        Ok(mu.iter().zip(&sigma).zip(u_x).map(|((m, s), u)| m + s * u).collect())
    }

    /// Direct, indirect and total effects of `pa → pa_cf` on one sample.
    pub fn effects(&self, x: &[f64], pa: &[f64], pa_cf: &[f64], pi: f64, seed: u64) -> Result<EffectReport> {
        self.require(Variant::Mediator)?;
        let z = self.abduct_mediator(x, pa, seed)?;
        let (mu, sigma) = self.decode(&z, pa)?;
        let u_x = abduct_epsilon(x, &mu, &sigma)?;
        let (_, z_cf) = self.counterfactual_mediator(x, pa, pa_cf, pi, seed)?;
        let g00 = self.g(&z, pa, &u_x)?;
        let g10 = self.g(&z, pa_cf, &u_x)?;
        let g01 = self.g(&z_cf, pa, &u_x)?;
        let g11 = self.g(&z_cf, pa_cf, &u_x)?;
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<f64>>();
        let de = diff(&g10, &g00);
        let ie = diff(&g01, &g00);
        let te = diff(&g11, &g00);
        let cross = diff(&g11, &g01);
        let telescoping_error = te
            .iter()
            .zip(ie.iter().zip(&cross))
            .map(|(t, (i, c))| (t - i - c).abs())
            .fold(0.0, f64::max);
        let l1 = |v: &[f64]| v.iter().map(|a| a.abs()).sum::<f64>();
        Ok(EffectReport {
            norms: EffectNorms {
                de: l1(&de),
                ie: l1(&ie),
                te: l1(&te),
            },
            de,
            ie,
            te,
            telescoping_error,
        })
    }
}
