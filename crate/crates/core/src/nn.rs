//! Named parameters, their binding onto a tape, and the small layer set the
//! model is assembled from.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::archive::Archive;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Negative slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.1;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug)]
pub struct ParamStore<T: Scalar> {
    key: u64,
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    /// Clones get a fresh key; ids from the original do not resolve in them.
    fn clone(&self) -> Self {
        ParamStore {
            key: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            key: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (index, _) = self.params.insert_full(name, t);
        Ok(ParamId { store: self.key, index })
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params
            .get_index_of(name)
            .map(|index| ParamId { store: self.key, index })
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.key && id.index < self.params.len()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        assert!(self.owns(id), "parameter id from another store");
        &self.params[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        assert!(self.owns(id), "parameter id from another store");
        &mut self.params[id.index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId { store: self.key, index })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.values_mut()
    }

    /// Same names and values at another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            key: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast().with_requires_grad(false)))
                .collect(),
        }
    }

    pub fn write_to(&self, archive: &mut Archive) {
        for (name, t) in &self.params {
            archive.push(name.clone(), t);
        }
    }

    /// Overwrites every parameter from `archive`, which must hold each name
    /// with a matching shape.
    pub fn read_from(&mut self, archive: &Archive) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let src = archive
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::dim(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.cast();
        }
        Ok(())
    }
}

/// Deterministic initializer: every parameter draws from its own stream,
/// keyed by the run seed and the parameter name, so a layer shared by two
/// model variants starts from the same values in both.
pub struct Init<'s, T: Scalar> {
    pub store: &'s mut ParamStore<T>,
    pub seed: u64,
}

impl<'s, T: Scalar> Init<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Init { store, seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, bound, &mut self.rng(name));
        self.store.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.store.insert(name, Tensor::zeros(shape))
    }
}

struct Bound<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    trainable: bool,
}

/// A tape plus the parameter stores visible to one forward pass.
/// Parameters become tape leaves on first use; trainable stores produce
/// gradient-carrying leaves, frozen ones constants.
pub struct Graph<'t, 'p, T: Scalar> {
    tape: &'t mut Tape<T>,
    stores: Vec<Bound<'p, T>>,
    bound: HashMap<ParamId, Var>,
}

impl<'t, 'p, T: Scalar> Graph<'t, 'p, T> {
    pub fn new(tape: &'t mut Tape<T>) -> Self {
        Graph {
            tape,
            stores: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn trainable(mut self, store: &'p ParamStore<T>) -> Self {
        self.stores.push(Bound { store, trainable: true });
        self
    }

    pub fn frozen(mut self, store: &'p ParamStore<T>) -> Self {
        self.stores.push(Bound { store, trainable: false });
        self
    }

    /// Uses `var` in place of parameter `id` for the rest of the pass.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let b = self
            .stores
            .iter()
            .find(|b| b.store.owns(id))
            .ok_or_else(|| Error::Config(format!("parameter {id:?} not attached to this graph")))?;
        let t = b.store.get(id).clone().with_requires_grad(b.trainable);
        let v = self.tape.leaf(t)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    /// Gradients for every parameter of `store` after backward, in store
    /// order; `None` for parameters the pass never touched.
    pub fn grads(&self, store: &ParamStore<T>) -> Vec<Option<Vec<T>>> {
        store
            .ids()
            .map(|id| {
                self.bound
                    .get(&id)
                    .and_then(|&v| self.tape.grad(v))
                    .map(<[T]>::to_vec)
            })
            .collect()
    }
}

impl<T: Scalar> Deref for Graph<'_, '_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        self.tape
    }
}

impl<T: Scalar> DerefMut for Graph<'_, '_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        self.tape
    }
}

pub fn lrelu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.leaky_relu(x, T::lit(LEAKY_SLOPE))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square `k`x`k` kernel with "same" padding.
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Conv2d {
            weight: init.fan_in(&format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k)?,
            bias: init.zeros(&format!("{name}.bias"), vec![cout])?,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// `act(x + conv2(act(conv1(x))))` with 3x3 kernels.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, ch: usize) -> Result<Self> {
        Ok(ResidualBlock {
            conv1: Conv2d::new(init, &format!("{name}.conv1"), ch, ch, 3, 1)?,
            conv2: Conv2d::new(init, &format!("{name}.conv2"), ch, ch, 3, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = lrelu(g, h)?;
        let h = self.conv2.forward(g, h)?;
        let s = g.add(x, h)?;
        lrelu(g, s)
    }
}

pub fn residual_stack<T: Scalar>(init: &mut Init<T>, name: &str, ch: usize, count: usize) -> Result<Vec<ResidualBlock>> {
    (0..count)
        .map(|k| ResidualBlock::new(init, &format!("{name}.{k}"), ch))
        .collect()
}

pub fn run_stack<T: Scalar>(blocks: &[ResidualBlock], g: &mut Graph<T>, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, x)?;
    }
    Ok(x)
}

/// `x [B,in] -> [B,out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, fin: usize, fout: usize) -> Result<Self> {
        Ok(Linear {
            weight: init.fan_in(&format!("{name}.weight"), vec![fin, fout], fin)?,
            bias: init.zeros(&format!("{name}.bias"), vec![1, fout])?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Linear layers with leaky ReLU between them and none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, widths: &[usize]) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(init, &format!("{name}.{k}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, mut x: Var) -> Result<Var> {
        for (k, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x)?;
            if k + 1 < self.layers.len() {
                x = lrelu(g, x)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        let mut ia = Init::new(&mut a, 3);
        ia.fan_in("x", vec![4], 4).unwrap();
        ia.fan_in("y", vec![4], 4).unwrap();
        let mut ib = Init::new(&mut b, 3);
        ib.fan_in("y", vec![4], 4).unwrap();
        assert_eq!(a.by_name("y"), b.by_name("y"));
        assert_ne!(a.by_name("x").unwrap().data(), a.by_name("y").unwrap().data());
    }

    #[test]
    fn foreign_ids_rejected() {
        let mut a = ParamStore::<f64>::new();
        let id = a.insert("w", Tensor::zeros(vec![1])).unwrap();
        let b = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape).frozen(&b);
        assert!(g.param(id).is_err());
        assert!(a.insert("w", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut p = ParamStore::<f64>::new();
        let mut q = ParamStore::<f64>::new();
        let a = p.insert("a", Tensor::full(vec![2], 3.0)).unwrap();
        let b = q.insert("b", Tensor::full(vec![2], 5.0)).unwrap();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape).trainable(&p).frozen(&q);
        let va = g.param(a).unwrap();
        let vb = g.param(b).unwrap();
        let m = g.mul(va, vb).unwrap();
        let l = g.sum(m).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grads(&p), vec![Some(vec![5.0, 5.0])]);
        assert_eq!(g.grads(&q), vec![None]);
    }
}
