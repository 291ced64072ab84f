//! Parameter storage, small feed-forward maps and the Adam optimizer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::format::Tensor;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotId(usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

/// A flat parameter vector partitioned into named matrices.
///
/// Optimizers and finite-difference checks see the flat vector; networks
/// address their matrices through [`SlotId`]s.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub values: Vec<f64>,
    slots: Vec<Slot>,
}

/// Tape leaves for every slot of a [`ParamSet`], in slot order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: SlotId) -> Var {
        self.0[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, mut init: impl FnMut() -> f64) -> SlotId {
        let name = name.into();
        assert!(
            self.slots.iter().all(|s| s.name != name),
            "duplicate parameter slot {name}"
        );
        let offset = self.values.len();
        self.values.extend((0..rows * cols).map(|_| init()));
        self.slots.push(Slot {
            name,
            offset,
            rows,
            cols,
        });
        SlotId(self.slots.len() - 1)
    }

    pub fn get(&self, id: SlotId) -> &[f64] {
        let s = &self.slots[id.0];
        &self.values[s.offset..s.offset + s.rows * s.cols]
    }

    pub fn get_mut(&mut self, id: SlotId) -> &mut [f64] {
        let s = &self.slots[id.0];
        &mut self.values[s.offset..s.offset + s.rows * s.cols]
    }

    /// Registers every slot as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.slots
                .iter()
                .map(|s| {
                    tape.param(
                        s.rows,
                        s.cols,
                        self.values[s.offset..s.offset + s.rows * s.cols].to_vec(),
                    )
                })
                .collect(),
        )
    }

    /// Registers every slot as a constant (no gradient) leaf.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.slots
                .iter()
                .map(|s| {
                    tape.constant(
                        s.rows,
                        s.cols,
                        self.values[s.offset..s.offset + s.rows * s.cols].to_vec(),
                    )
                })
                .collect(),
        )
    }

    /// Flattens the adjoints of a bound set back into parameter order.
    pub fn gather(&self, bound: &Bound, grads: &Grads) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for (s, &v) in self.slots.iter().zip(&bound.0) {
            if let Some(g) = grads.get(v) {
                out[s.offset..s.offset + g.len()].copy_from_slice(g);
            }
        }
        out
    }

    /// Writes one CFT1 tensor per slot into `dir`, named `<prefix><slot>.cft`.
    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.slots {
            Tensor::matrix(
                s.rows,
                s.cols,
                self.values[s.offset..s.offset + s.rows * s.cols].to_vec(),
            )?
            .save(dir.join(format!("{prefix}{}.cft", s.name)))?;
        }
        Ok(())
    }

    /// Fills this (already laid-out) set from tensors written by [`ParamSet::save`].
    pub fn load_into(&mut self, dir: &Path, prefix: &str) -> Result<()> {
        for k in 0..self.slots.len() {
            let s = self.slots[k].clone();
            let t = Tensor::load(dir.join(format!("{prefix}{}.cft", s.name)))?;
            if t.dims != [s.rows, s.cols] {
                return Err(Error::Shape(format!(
                    "parameter {} has dims {:?}, expected [{}, {}]",
                    s.name, t.dims, s.rows, s.cols
                )));
            }
            self.values[s.offset..s.offset + s.rows * s.cols].copy_from_slice(&t.data);
        }
        Ok(())
    }
}

/// Affine map with an optional tanh hidden layer:
/// `W₂·tanh(W₁x + b₁) + b₂` or `Wx + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamFn {
    pub input: usize,
    pub output: usize,
    pub hidden: Option<usize>,
    first: (SlotId, SlotId),
    second: Option<(SlotId, SlotId)>,
}

impl ParamFn {
    /// Lays out the parameters in `set` with scaled-Gaussian initialization.
    /// `out_gain` scales the final layer so freshly built nets start near zero.
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        hidden: Option<usize>,
        out_gain: f64,
        rng: &mut StreamRng,
    ) -> Self {
        let gauss = |fan_in: usize, gain: f64| {
            let s = gain / (fan_in.max(1) as f64).sqrt();
            move |r: &mut StreamRng| rng::normal(r) * s
        };
        match hidden {
            Some(h) => {
                let g1 = gauss(input, 1.0);
                let w1 = set.add(format!("{name}.w1"), h, input, || g1(rng));
                let b1 = set.add(format!("{name}.b1"), 1, h, || 0.0);
                let g2 = gauss(h, out_gain);
                let w2 = set.add(format!("{name}.w2"), output, h, || g2(rng));
                let b2 = set.add(format!("{name}.b2"), 1, output, || 0.0);
                ParamFn {
                    input,
                    output,
                    hidden,
                    first: (w1, b1),
                    second: Some((w2, b2)),
                }
            }
            None => {
                let g = gauss(input, out_gain);
                let w = set.add(format!("{name}.w"), output, input, || g(rng));
                let b = set.add(format!("{name}.b"), 1, output, || 0.0);
                ParamFn {
                    input,
                    output,
                    hidden,
                    first: (w, b),
                    second: None,
                }
            }
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.linear(x, p.var(self.first.0), p.var(self.first.1));
        match self.second {
            Some((w, b)) => {
                let a = tape.tanh(y);
                tape.linear(a, p.var(w), p.var(b))
            }
            None => y,
        }
    }

    /// Output bias slot; lets callers seed a net's initial output.
    pub fn output_bias(&self) -> SlotId {
        self.second.map(|s| s.1).unwrap_or(self.first.1)
    }

    /// Every slot owned by this map.
    pub fn slot_ids(&self) -> Vec<SlotId> {
        let mut v = vec![self.first.0, self.first.1];
        if let Some((w, b)) = self.second {
            v.extend([w, b]);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// The update Adam would apply for `grad`, advancing the moment state.
    pub fn delta(&mut self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        grad.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                -lr * (*m / c1) / ((*v / c2).sqrt() + eps)
            })
            .collect()
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let d = self.delta(grad);
        for (p, d) in params.iter_mut().zip(d) {
            *p += d;
        }
    }
}
