//! Named parameter storage, grouping for freeze policies, and initialization.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Coarse parameter categories used for counting and freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Attention,
    Norm,
    Experts,
    Router,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Embedding,
        ParamGroup::Attention,
        ParamGroup::Norm,
        ParamGroup::Experts,
        ParamGroup::Router,
        ParamGroup::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Attention => "attention",
            ParamGroup::Norm => "norm",
            ParamGroup::Experts => "experts",
            ParamGroup::Router => "router",
            ParamGroup::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    /// Fixed at construction (random router, hypernetwork); never updated.
    pub frozen: bool,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        frozen: bool,
        tensor: Tensor<T>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            frozen,
            tensor: tensor.with_requires_grad(!frozen),
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Records every parameter as a graph leaf. Frozen parameters enter
    /// without gradient tracking.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.leaf(&p.tensor)).collect(),
        }
    }

    /// Copies leaf gradients from `g` into each parameter's grad buffer.
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(grad) = g.grad(v) {
                p.tensor.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Converts element type, preserving names, groups and order.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let data = p
                .tensor
                .data()
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect();
            let t = Tensor::new(p.tensor.shape().to_vec(), data).expect("same shape");
            out.add(p.name.clone(), p.group, p.frozen, t).expect("unique names");
        }
        out
    }
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Deterministic per-parameter generator: the stream depends only on the
/// run seed and the parameter name, so shared components initialize the same
/// way regardless of which router family surrounds them.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// `uniform(−1/√fan_in, +1/√fan_in)` for a `[fan_in × fan_out]` matrix.
pub fn init_uniform<T: Real>(seed: u64, name: &str, shape: &[usize]) -> Tensor<T> {
    let fan_in = shape.first().copied().unwrap_or(1).max(1);
    let bound = 1.0 / (fan_in as f64).sqrt();
    init_uniform_bound(seed, name, shape, bound)
}

pub fn init_uniform_bound<T: Real>(seed: u64, name: &str, shape: &[usize], bound: f64) -> Tensor<T> {
    let mut rng = param_rng(seed, name);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub fn init_normal<T: Real>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
    let mut rng = param_rng(seed, name);
    let dist = Normal::new(0.0, std).expect("std > 0");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub fn init_const<T: Real>(shape: &[usize], value: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![T::lit(value); n]).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed_and_bounded() {
        let a: Tensor<f64> = init_uniform(7, "layers.0.attn.wq", &[16, 16]);
        let b: Tensor<f64> = init_uniform(7, "layers.0.attn.wq", &[16, 16]);
        let c: Tensor<f64> = init_uniform(7, "layers.0.attn.wk", &[16, 16]);
        assert_eq!(a, b);
        assert_ne!(a.data(), c.data());
        assert!(a.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", ParamGroup::Router, false, Tensor::zeros([2])).unwrap();
        assert!(s.add("w", ParamGroup::Router, false, Tensor::zeros([2])).is_err());
    }

    #[test]
    fn frozen_params_bind_without_grad() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", ParamGroup::Router, true, Tensor::zeros([2])).unwrap();
        let b = s.add("b", ParamGroup::Router, false, Tensor::zeros([2])).unwrap();
        let mut g = Graph::new();
        let bound = s.bind(&mut g);
        assert!(!g.requires_grad(bound.var(a)));
        assert!(g.requires_grad(bound.var(b)));
    }
}
