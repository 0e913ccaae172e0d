//! Contrastive, mixup, world-consistency and adversarial objectives.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TAU: f64 = 0.07;

/// A contrastive loss together with whether the positive logit won.
#[derive(Clone, Copy)]
pub struct Contrastive<'t, F> {
    pub loss: Var<'t, F>,
    pub logits: Var<'t, F>,
    pub positive: usize,
}

impl<F: Real> Contrastive<'_, F> {
    /// Positive logit is the arg-max (first index wins ties).
    pub fn correct(&self) -> bool {
        positive_is_argmax(self.logits.value().data(), self.positive)
    }
}

pub fn positive_is_argmax<F: Real>(logits: &[F], positive: usize) -> bool {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best == positive
}

fn check_tau<F: Real>(tau: F) -> Result<()> {
    if !(tau > F::zero()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_dims<F: Real>(a: Var<'_, F>, b: Var<'_, F>, what: &str) -> Result<()> {
    if a.numel() != b.numel() {
        return Err(Error::shape(format!("{what}: {} vs {}", a.numel(), b.numel())));
    }
    Ok(())
}

fn check_bank<F: Real>(query: Var<'_, F>, bank: Option<Var<'_, F>>) -> Result<()> {
    if let Some(b) = bank {
        let s = b.shape();
        if s.len() != 2 || s[1] != query.numel() {
            return Err(Error::shape(format!(
                "key bank {s:?} does not hold {}-d entries",
                query.numel()
            )));
        }
    }
    Ok(())
}

fn scaled_logits<'t, F: Real>(parts: &[Var<'t, F>], tau: F) -> Var<'t, F> {
    Var::concat(parts).scale(F::one() / tau)
}

/// `-log softmax(q.k+ / tau | q.K / tau)[0]`; `negatives` is `[N, d]` and
/// may be absent when the queue is empty.
pub fn info_nce<'t, F: Real>(
    query: Var<'t, F>,
    positive: Var<'t, F>,
    negatives: Option<Var<'t, F>>,
    tau: F,
) -> Result<Contrastive<'t, F>> {
    check_tau(tau)?;
    check_dims(query, positive, "info_nce key")?;
    check_bank(query, negatives)?;
    let mut parts = vec![query.dot(positive).reshape(&[1])];
    if let Some(neg) = negatives.filter(|n| n.numel() > 0) {
        parts.push(query.matvec_by(neg));
    }
    let logits = scaled_logits(&parts, tau);
    let mut target = vec![F::zero(); logits.numel()];
    target[0] = F::one();
    Ok(Contrastive {
        loss: logits.soft_cross_entropy(&target),
        logits,
        positive: 0,
    })
}

/// Draws `lambda ~ Beta(alpha, alpha)`.
pub fn sample_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("mixup alpha must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(beta.sample(rng))
}

/// `lambda * a + (1 - lambda) * b`.
pub fn mix_features<'t, F: Real>(a: Var<'t, F>, b: Var<'t, F>, lambda: F) -> Result<Var<'t, F>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("mix: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.scale(lambda).add(b.scale(F::one() - lambda)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Each sample is mixed with the generator output of the same clip.
    #[default]
    SameInstance,
    /// Each sample is mixed with the generator output of a batch partner.
    CrossInstance,
}

impl std::str::FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same_instance" => Ok(MixMode::SameInstance),
            "cross_instance" => Ok(MixMode::CrossInstance),
            _ => Err(Error::invalid(format!(
                "mix mode must be same_instance or cross_instance, got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for MixMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MixMode::SameInstance => "same_instance",
            MixMode::CrossInstance => "cross_instance",
        })
    }
}

/// Mixing coefficient and partner for one batch item.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSample {
    pub lambda: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub index: usize,
    pub partner: usize,
}

impl MixSample {
    pub fn new(lambda: f64, alpha: f64, batch_size: usize, index: usize, partner: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
        }
        if index >= batch_size || partner >= batch_size {
            return Err(Error::invalid(format!(
                "mix indices ({index}, {partner}) out of batch of {batch_size}"
            )));
        }
        Ok(MixSample {
            lambda,
            alpha,
            batch_size,
            index,
            partner,
        })
    }

    /// One-hot row `y_b` over `batch_size + queue_len` classes.
    pub fn virtual_label(&self, b: usize, queue_len: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.batch_size + queue_len];
        y[b] = 1.0;
        y
    }

    /// `lambda * y_i + (1 - lambda) * y_r`.
    pub fn mixed_target(&self, queue_len: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.batch_size + queue_len];
        y[self.index] += self.lambda;
        y[self.partner] += 1.0 - self.lambda;
        y
    }
}

/// Contrastive loss of a mixed embedding. `batch_keys` is `[B, d]` (one key
/// per batch item), `negatives` the queue `[N, d]`.
pub fn mixup_contrastive_loss<'t, F: Real>(
    mixed: Var<'t, F>,
    batch_keys: Var<'t, F>,
    negatives: Option<Var<'t, F>>,
    mix: &MixSample,
    mode: MixMode,
    tau: F,
) -> Result<Contrastive<'t, F>> {
    check_tau(tau)?;
    check_bank(mixed, Some(batch_keys))?;
    check_bank(mixed, negatives)?;
    let d = mixed.numel();
    if batch_keys.shape()[0] != mix.batch_size {
        return Err(Error::shape(format!(
            "{} batch keys for a batch of {}",
            batch_keys.shape()[0],
            mix.batch_size
        )));
    }
    match mode {
        MixMode::SameInstance => {
            let positive = batch_keys.slice(mix.index * d, (mix.index + 1) * d);
            info_nce(mixed, positive, negatives, tau)
        }
        MixMode::CrossInstance => {
            let mut parts = vec![mixed.matvec_by(batch_keys)];
            let neg = negatives.filter(|n| n.numel() > 0);
            if let Some(n) = neg {
                parts.push(mixed.matvec_by(n));
            }
            let logits = scaled_logits(&parts, tau);
            let queue_len = neg.map_or(0, |n| n.shape()[0]);
            let target: Vec<F> = mix.mixed_target(queue_len).into_iter().map(F::of).collect();
            Ok(Contrastive {
                loss: logits.soft_cross_entropy(&target),
                logits,
                positive: mix.index,
            })
        }
    }
}

/// `||code - entry||`.
pub fn three_d_loss<'t, F: Real>(code: Var<'t, F>, entry: Var<'t, F>) -> Result<Var<'t, F>> {
    check_dims(code, entry, "3D loss")?;
    Ok(code.sub(entry.reshape(&code.shape())).norm())
}

/// Identity forward; gradients are multiplied by `-scale` going back.
pub fn gradient_reversal<'t, F: Real>(x: Var<'t, F>, scale: F) -> Result<Var<'t, F>> {
    if !(scale >= F::zero()) {
        return Err(Error::invalid(format!("reversal scale must be >= 0, got {scale}")));
    }
    Ok(x.grad_reverse(scale))
}

/// `||branch - anchor||` with the anchor treated as a constant.
pub fn adversarial_loss<'t, F: Real>(branch: Var<'t, F>, anchor: Var<'t, F>) -> Result<Var<'t, F>> {
    check_dims(branch, anchor, "adversarial loss")?;
    Ok(branch.sub(anchor.detach().reshape(&branch.shape())).norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mix_cl: f64,
    pub loss_3d: f64,
    pub adv: f64,
    pub recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mix_cl: 1.0,
            loss_3d: 1.0,
            adv: 1.0,
            recon: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.mix_cl, self.loss_3d, self.adv, self.recon]
    }

    pub fn from_array(w: [f64; 4]) -> Self {
        LossWeights {
            mix_cl: w[0],
            loss_3d: w[1],
            adv: w[2],
            recon: w[3],
        }
    }
}

/// Per-step loss summary (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub info_nce: f64,
    pub mix_cl: f64,
    pub loss_3d: f64,
    pub adv: f64,
    pub recon: f64,
    pub total: f64,
    pub pretext_accuracy: f64,
}

/// Stage-2 components before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage2Components {
    pub mix_cl: f64,
    pub loss_3d: f64,
    pub adv: f64,
    pub recon: f64,
    pub pretext_accuracy: f64,
}

pub fn composite_stage2_loss(c: &Stage2Components, w: &LossWeights) -> Result<LossReport> {
    for (name, v) in [
        ("mix_cl", c.mix_cl),
        ("loss_3d", c.loss_3d),
        ("adv", c.adv),
        ("recon", c.recon),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name.into() });
        }
    }
    let total = w.mix_cl * c.mix_cl + w.loss_3d * c.loss_3d + w.adv * c.adv + w.recon * c.recon;
    Ok(LossReport {
        info_nce: 0.0,
        mix_cl: c.mix_cl,
        loss_3d: c.loss_3d,
        adv: c.adv,
        recon: c.recon,
        total,
        pretext_accuracy: c.pretext_accuracy,
    })
}

/// Stacks equal-length vectors into an `[N, d]` constant matrix.
pub fn stack_rows<F: Real>(rows: &[&[F]], d: usize) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::shape(format!("row of length {} in a {d}-column stack", r.len())));
        }
        data.extend_from_slice(r);
    }
    Tensor::new(&[rows.len(), d], data)
}
