//! Named parameter storage and the small layer helpers shared by the denoiser
//! and the rectifier.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            feed(name.as_bytes());
            for d in t.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bits_eq(b))
    }

    /// Registers every tensor on `tape`, as trainable leaves or constants.
    pub fn bind<'a, 't>(&'a self, tape: &'t Tape, trainable: bool) -> Bound<'a, 't> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { set: self, vars }
    }
}

/// A [`ParamSet`] registered on a tape.
pub struct Bound<'a, 't> {
    set: &'a ParamSet,
    vars: Vec<Var<'t>>,
}

impl<'a, 't> Bound<'a, 't> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.set
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients in parameter order; unreached parameters get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.set.tensors())
            .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Sinusoidal embedding of an integer timestep: sines then cosines over
/// geometrically spaced frequencies.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// `[B, dim]` embedding table for per-sample timesteps.
pub fn sinusoidal_batch(ts: &[usize], dim: usize) -> Tensor {
    let data = ts.iter().flat_map(|&t| sinusoidal_embedding(t, dim)).collect();
    Tensor::new(vec![ts.len(), dim], data).expect("sized by construction")
}

/// Fan-in scaled uniform initialisation.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// `x[B,in]·W[in,out] + b[out]`.
pub fn linear<'t>(x: Var<'t>, bound: &Bound<'_, 't>, prefix: &str) -> Result<Var<'t>> {
    let w = bound.get(&format!("{prefix}.weight"))?;
    let b = bound.get(&format!("{prefix}.bias"))?;
    x.matmul(w)?.add_channel(b)
}

/// Group norm followed by the per-channel affine stored under `prefix`.
pub fn group_norm_affine<'t>(
    x: Var<'t>,
    groups: usize,
    bound: &Bound<'_, 't>,
    prefix: &str,
) -> Result<Var<'t>> {
    let gamma = bound.get(&format!("{prefix}.gamma"))?;
    let beta = bound.get(&format!("{prefix}.beta"))?;
    x.group_norm(groups, 1e-5)?.mul_channel(gamma)?.add_channel(beta)
}
