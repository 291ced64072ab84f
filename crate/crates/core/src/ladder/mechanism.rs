use std::sync::Arc;

use super::{abduct_epsilon, LadderModel, LatentStack, Variant};
use crate::error::{Error, Result};
use crate::mechanisms::FeatureMap;
use crate::rng::{self, StreamRng};
use crate::scm::{LatentNoise, Mechanism, Noise, Value};

/// The ladder model bound into a graph as the mechanism of the image node.
#[derive(Debug, Clone)]
pub struct LadderMechanism {
    pub model: Arc<LadderModel>,
    pub encoder: FeatureMap,
    pub pi: f64,
}

impl LadderMechanism {
    pub fn new(model: Arc<LadderModel>, encoder: FeatureMap, pi: f64) -> Result<Self> {
        if encoder.width() != model.dims.pa {
            return Err(Error::Shape(format!(
                "parent encoding has width {}, model expects {}",
                encoder.width(),
                model.dims.pa
            )));
        }
        if !(0.0..=1.0).contains(&pi) {
            return Err(Error::OutOfRange(format!("mixture weight {pi}")));
        }
        Ok(LadderMechanism { model, encoder, pi })
    }

    fn image<'a>(&self, v: &'a Value) -> Result<&'a [f64]> {
        let x = v
            .as_tensor()
            .ok_or_else(|| Error::Shape("image value must be a tensor".into()))?;
        if x.len() != self.model.dims.x {
            return Err(Error::Shape(format!("image has {} values", x.len())));
        }
        Ok(x)
    }

    fn latents(&self, pa: &[f64], n: &LatentNoise) -> Result<LatentStack> {
        match (&n.z, &n.u_z) {
            (Some(z), _) => Ok(LatentStack {
                z: z.clone(),
                u_z: n.u_z.clone(),
                pa: pa.to_vec(),
            }),
            (None, Some(u)) => self.model.sample_prior(pa, u),
            (None, None) => Err(Error::Shape("latent noise carries neither z nor u_z".into())),
        }
    }
}

fn latent(noise: &Noise) -> Result<&LatentNoise> {
    match noise {
        Noise::Latent(n) => Ok(n),
        other => Err(Error::Shape(format!("ladder mechanism got noise {other:?}"))),
    }
}

impl Mechanism for LadderMechanism {
    fn arity(&self) -> usize {
        self.encoder.features.len()
    }

    fn forward(&self, parents: &[Value], noise: &Noise) -> Result<Value> {
        let n = latent(noise)?;
        let pa = self.encoder.encode(parents)?;
        let z = self.latents(&pa, n)?;
        let (mu, sigma) = self.model.decode(&z, &pa)?;
        if n.u_x.len() != mu.len() {
            return Err(Error::Shape(format!("pixel noise has {} values", n.u_x.len())));
        }
        Ok(Value::Tensor(
            mu.iter().zip(&sigma).zip(&n.u_x).map(|((m, s), u)| m + s * u).collect(),
        ))
    }

    fn sample_noise(&self, rng: &mut StreamRng) -> Noise {
        Noise::Latent(LatentNoise {
            z: None,
            u_z: Some(self.model.dims.z.iter().map(|&d| rng::normals(rng, d)).collect()),
            u_x: rng::normals(rng, self.model.dims.x),
        })
    }

    /// Posterior latents drawn with `seed`, their standardized noise, and
    /// the pixel noise `u_x = (x − μ) / σ`.
    fn abduct(&self, parents: &[Value], value: &Value, seed: u64) -> Result<Noise> {
        let x = self.image(value)?;
        let pa = self.encoder.encode(parents)?;
        let z = self.model.posterior_stack(x, &pa, seed)?;
        let (mu, sigma) = self.model.decode(&z, &pa)?;
        let u_x = abduct_epsilon(x, &mu, &sigma)?;
        Ok(Noise::Latent(LatentNoise {
            z: Some(z.z),
            u_z: z.u_z,
            u_x,
        }))
    }

    fn counterfactual(&self, parents: &[Value], value: &Value, noise: &Noise, cf_parents: &[Value]) -> Result<Value> {
        let n = latent(noise)?;
        let pa_cf = self.encoder.encode(cf_parents)?;
        match self.model.variant {
            Variant::Exogenous => self.forward(cf_parents, noise),
            Variant::Mediator => {
                let x = self.image(value)?;
                let pa = self.encoder.encode(parents)?;
                let z = self.latents(&pa, n)?;
                let u_z = z
                    .u_z
                    .clone()
                    .ok_or_else(|| Error::Precondition("mediator counterfactual needs abducted u_z".into()))?;
                let z_cf = self.model.mediate(x, &pa, &pa_cf, &u_z, self.pi)?;
                let (mu, sigma) = self.model.decode(&z_cf, &pa_cf)?;
                Ok(Value::Tensor(
                    mu.iter().zip(&sigma).zip(&n.u_x).map(|((m, s), u)| m + s * u).collect(),
                ))
            }
        }
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "family": "ladder",
            "variant": self.model.variant,
            "pi": self.pi,
            "inputs": self.encoder,
        })
    }
}
