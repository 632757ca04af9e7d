//! Named trainable parameters and their binding onto a [`Graph`].
//!
//! Every parameter draws its initial values from its own RNG stream, keyed by
//! the model seed and the parameter name. Adding or removing a parameter
//! therefore never shifts the initialization of any other one, which is what
//! keeps ablation variants comparable.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::Padding;
use crate::tensor::{Element, Tensor};

/// Optimizer group: the encoder trains at a reduced learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Rest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<E: Element> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<E>,
    pub grad: Option<Tensor<E>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Element = f32> {
    params: Vec<Param<E>>,
    by_name: HashMap<String, usize>,
}

/// FNV-1a, used to derive a per-name stream from the model seed.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub(crate) fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: Group, value: Tensor<E>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid("params", format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
            grad: None,
        });
        Ok(ParamId(id))
    }

    /// Adds a convolution with He-normal weights (fan-in scaling) and zero
    /// bias, named `{name}.weight` / `{name}.bias`.
    pub fn conv(
        &mut self,
        seed: u64,
        name: &str,
        group: Group,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<ConvLayer> {
        let wname = format!("{name}.weight");
        let fan_in = (c_in * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut rng = stream(seed, &wname);
        let w = Tensor::from_fn([c_out, c_in, kernel, kernel], |_| {
            E::from_f64(normal.sample(&mut rng))
        });
        let weight = self.insert(&wname, group, w)?;
        let bias = self.insert(&format!("{name}.bias"), group, Tensor::zeros([c_out]))?;
        Ok(ConvLayer { weight, bias })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<E>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<E> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<E>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<E>) -> Bound {
        Bound(self.params.iter().map(|p| g.leaf(p.value.clone())).collect())
    }

    /// Records every parameter on `g` as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<E>) -> Bound {
        Bound(self.params.iter().map(|p| g.input(p.value.clone())).collect())
    }

    /// Adds the gradients a backward pass left on `g` into the store.
    pub fn accumulate_grads(&mut self, g: &Graph<E>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(grad) = g.grad(v) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(grad)?,
                    slot => *slot = Some(grad.clone()),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Element-type conversion of every value (gradients are dropped).
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: None,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Graph handles of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Stride-1, same-padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn apply<E: Element>(&self, g: &mut Graph<E>, b: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(self.weight), b.var(self.bias), 1, Padding::Same)
    }

    /// Convolution followed by ReLU.
    pub fn apply_relu<E: Element>(&self, g: &mut Graph<E>, b: &Bound, x: Var) -> Result<Var> {
        let y = self.apply(g, b, x)?;
        Ok(g.relu(y))
    }
}
