use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered, named collection of model tensors.
///
/// Insertion order is stable and defines the order used by checkpoints,
/// optimizer state and checksums.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.position(name)?;
        Ok(&mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.entries {
            hasher.update((name.len() as u32).to_le_bytes());
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Records every tensor as a leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph, requires_grad: bool) -> Bound<'a> {
        let vars = self.entries.iter().map(|(_, t)| g.leaf(t.clone(), requires_grad)).collect();
        Bound { params: self, vars }
    }
}

impl Params {
    /// Reuses existing graph variables, one per tensor in order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound<'_>> {
        if vars.len() != self.entries.len() {
            return Err(Error::Input(format!("{} variables for {} parameters", vars.len(), self.entries.len())));
        }
        Ok(Bound { params: self, vars: vars.to_vec() })
    }
}

/// Graph handles for a [`Params`] collection, aligned with its order.
#[derive(Debug)]
pub struct Bound<'a> {
    params: &'a Params,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.params.position(name).map(|i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Builds parameters in a fixed order from one seeded stream.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    pub params: Params,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), params: Params::new() }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound));
        self.params.insert(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound));
        self.params.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.params.insert(name, Tensor::full(shape.to_vec(), value))
    }

    pub fn conv(&mut self, prefix: &str, out_ch: usize, in_ch: usize, k: usize) -> Result<()> {
        self.fan_in(&format!("{prefix}.weight"), &[out_ch, in_ch, k, k], in_ch * k * k)?;
        self.constant(&format!("{prefix}.bias"), &[out_ch], 0.0)
    }

    pub fn linear(&mut self, prefix: &str, input: usize, output: usize) -> Result<()> {
        self.fan_in(&format!("{prefix}.weight"), &[input, output], input)?;
        self.constant(&format!("{prefix}.bias"), &[output], 0.0)
    }

    pub fn norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.constant(&format!("{prefix}.gain"), &[dim], 1.0)?;
        self.constant(&format!("{prefix}.bias"), &[dim], 0.0)
    }
}
