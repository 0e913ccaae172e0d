//! Parameter storage and the handful of layers the models are built from.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`]. Stores that share a layout
/// (a model, its EMA copy, its generator-branch clone) share ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors. Names are dot-separated module paths.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Errors unless `other` has identical names and shapes in the same order.
    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(Error::shape("parameter trees have different names"));
        }
        for (n, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "parameter {n}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> Bound<'t, F> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// A [`ParamStore`] registered on a tape.
pub struct Bound<'t, F> {
    vars: Vec<Var<'t, F>>,
}

impl<'t, F: Real> Bound<'t, F> {
    pub fn from_vars(vars: Vec<Var<'t, F>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, F> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, F>] {
        &self.vars
    }

    /// Collects gradients in store order; missing gradients become zeros.
    pub fn grads(&self, g: &crate::autograd::Gradients<F>) -> Vec<Tensor<F>> {
        self.vars.iter().map(|&v| g.get_or_zeros(v)).collect()
    }
}

pub fn he_normal<F: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<F> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| F::of(dist.sample(rng))).collect())
}

#[derive(Clone, Copy, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl Conv3d {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        let [kt, kh, kw] = geom.kernel;
        let fan_in = in_ch * kt * kh * kw;
        Conv3d {
            weight: store.add(format!("{name}.weight"), he_normal(&[out_ch, in_ch, kt, kh, kw], fan_in, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            geom,
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.conv3d(p.var(self.weight), p.var(self.bias), self.geom)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], F::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.group_norm(p.var(self.gamma), p.var(self.beta), self.groups, F::of(1e-5))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), he_normal(&[output, input], input, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    /// Weights and bias start at exactly zero.
    pub fn zeros<F: Real>(store: &mut ParamStore<F>, name: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[output, input])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.linear(p.var(self.weight), p.var(self.bias))
    }
}
