//! Adam with L2 weight decay folded into the gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<F: Real> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

/// Optimizer state over several named parameter groups sharing one step
/// counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F: Real> {
    pub cfg: AdamConfig,
    step: u64,
    groups: BTreeMap<String, Moments<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            groups: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the shared bias-correction counter; call once per training
    /// step before the group updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn groups(&self) -> &BTreeMap<String, Moments<F>> {
        &self.groups
    }

    pub fn restore(cfg: AdamConfig, step: u64, groups: BTreeMap<String, Moments<F>>) -> Self {
        Adam { cfg, step, groups }
    }

    pub fn update(&mut self, group: &str, params: &mut ParamStore<F>, grads: &[Tensor<F>]) -> Result<()> {
        if self.step == 0 {
            return Err(Error::invalid("Adam::update before begin_step"));
        }
        if grads.len() != params.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters in group {group}",
                grads.len(),
                params.len()
            )));
        }
        let state = self.groups.entry(group.to_string()).or_insert_with(|| Moments {
            m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        });
        let c = self.cfg;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one, wd, eps) = (F::one(), F::of(c.weight_decay), F::of(c.eps));
        let bc1 = F::of(1.0 - c.beta1.powf(self.step as f64));
        let bc2 = F::of(1.0 - c.beta2.powf(self.step as f64));
        let lr = F::of(c.lr);
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] + wd * *x;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", Tensor::from_vec(vec![1.0, -1.0]));
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        opt.begin_step();
        opt.update("g", &mut p, &[Tensor::from_vec(vec![3.0, -0.5])]).unwrap();
        let w = p.tensors()[0].data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut p = ParamStore::<f32>::new();
        p.add("w", Tensor::from_vec(vec![0.1f32, 0.7, -3.0]));
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        opt.begin_step();
        opt.update("g", &mut p, &[Tensor::from_vec(vec![1.0, -2.0, 0.5])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", Tensor::from_vec(vec![2.0, -3.0]));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            opt.begin_step();
            let g = p.tensors()[0].scale(2.0);
            opt.update("g", &mut p, &[g]).unwrap();
        }
        assert!(p.tensors()[0].norm() < 1e-2);
    }
}
