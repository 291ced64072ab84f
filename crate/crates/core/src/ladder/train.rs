use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::LadderModel;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig {
                lr: 5e-4,
                ..AdamConfig::default()
            },
            epochs: 50,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch free energy per epoch.
    pub trace: Vec<f64>,
    /// Constraint level: mean free energy of the trained model over the data.
    pub c: f64,
}

/// Salt of the fixed posterior seeds used to score a dataset.
pub(crate) const EVAL_SALT: u64 = 0x5eed_e7a1;

const GRAD_CHUNK: usize = 16;

impl LadderModel {
    /// Posterior seeds used when scoring row `r` of a dataset.
    pub fn eval_seed(seed: u64, r: usize) -> u64 {
        rng::mix(rng::mix(seed, EVAL_SALT), r as u64)
    }

    /// Mean free energy over rows with fixed per-row posterior seeds.
    pub fn mean_free_energy(&self, x: &[f64], pa: &[f64], seed: u64) -> Result<f64> {
        let n = self.check_batch(x, pa)?;
        if n == 0 {
            return Err(Error::Precondition("free energy of an empty dataset".into()));
        }
        let (dx, dp) = (self.dims.x, self.dims.pa);
        let sums: Vec<Result<f64>> = (0..n.div_ceil(256))
            .into_par_iter()
            .map(|c| {
                let (a, b) = (c * 256, ((c + 1) * 256).min(n));
                let seeds: Vec<u64> = (a..b).map(|r| Self::eval_seed(seed, r)).collect();
                let rep = self.elbo(&x[a * dx..b * dx], &pa[a * dp..b * dp], &seeds)?;
                Ok(rep.free_energy.iter().sum())
            })
            .collect();
        let mut total = 0.0;
        for s in sums {
            total += s?;
        }
        Ok(total / n as f64)
    }

    /// Mean free energy and gradient of a minibatch, split across threads.
    pub(crate) fn batch_grad(&self, x: &[f64], pa: &[f64], seeds: &[u64]) -> Result<(f64, Vec<f64>)> {
        let n = seeds.len();
        let (dx, dp) = (self.dims.x, self.dims.pa);
        let parts: Vec<Result<(f64, Vec<f64>, usize)>> = (0..n.div_ceil(GRAD_CHUNK))
            .into_par_iter()
            .map(|c| {
                let (a, b) = (c * GRAD_CHUNK, ((c + 1) * GRAD_CHUNK).min(n));
                let (f, g) = self.free_energy_grad(&x[a * dx..b * dx], &pa[a * dp..b * dp], &seeds[a..b])?;
                Ok((f, g, b - a))
            })
            .collect();
        combine(parts, n, self.params.len())
    }

    /// ELBO training with minibatch Adam. Returns the per-epoch free energy
    /// and the constraint level `c` evaluated after the last epoch.
    pub fn train(&mut self, x: &[f64], pa: &[f64], cfg: &TrainConfig) -> Result<TrainReport> {
        let n = self.check_batch(x, pa).map_err(|e| match e {
            Error::NonFinite(m) => Error::Divergence(format!("{m} contains non-finite values")),
            other => other,
        })?;
        if n == 0 {
            return Err(Error::Precondition("cannot train on an empty dataset".into()));
        }
        let (dx, dp) = (self.dims.x, self.dims.pa);
        let mut opt = Adam::new(cfg.adam, self.params.len());
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let order = permutation(cfg.seed, epoch as u64, n);
            let mut total = 0.0;
            for (b, rows) in order.chunks(cfg.batch_size.max(1)).enumerate() {
                let xb: Vec<f64> = rows.iter().flat_map(|&r| x[r * dx..(r + 1) * dx].iter().copied()).collect();
                let pb: Vec<f64> = rows.iter().flat_map(|&r| pa[r * dp..(r + 1) * dp].iter().copied()).collect();
                let step = (epoch * n.div_ceil(cfg.batch_size.max(1)) + b) as u64;
                let seeds: Vec<u64> = (0..rows.len() as u64)
                    .map(|k| rng::mix(rng::mix(cfg.seed, step), k))
                    .collect();
                let (f, g) = self.batch_grad(&xb, &pb, &seeds)?;
                if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence(format!("free energy {f} at epoch {epoch}")));
                }
                opt.step(&mut self.params.values, &g);
                total += f * rows.len() as f64;
            }
            trace.push(total / n as f64);
        }
        let c = self.mean_free_energy(x, pa, cfg.seed)?;
        Ok(TrainReport { trace, c })
    }
}

/// Row order for one epoch, from the stream `(seed, MINIBATCH, epoch)`.
pub(crate) fn permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, streams::MINIBATCH, epoch);
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
    order
}

/// Row-weighted average of per-chunk means and gradients.
pub(crate) fn combine(parts: Vec<Result<(f64, Vec<f64>, usize)>>, n: usize, width: usize) -> Result<(f64, Vec<f64>)> {
    let mut f = 0.0;
    let mut g = vec![0.0; width];
    for part in parts {
        let (pf, pg, m) = part?;
        let w = m as f64 / n as f64;
        f += pf * w;
        for (a, b) in g.iter_mut().zip(pg) {
            *a += b * w;
        }
    }
    Ok((f, g))
}
