//! Two-stage schedule. Stage 1 trains the encoder contrastively against a
//! momentum key encoder and a key queue; stage 2 adds the generator branch,
//! feature mixup, the world-code consistency term and the adversarial term.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::dataset::{augment, AugmentConfig, Profile, VideoClip};
use crate::encoder::{clone_into_generator_branch, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{
    adversarial_loss, composite_stage2_loss, gradient_reversal, info_nce, mix_features, mixup_contrastive_loss,
    sample_lambda, stack_rows, three_d_loss, LossReport, LossWeights, MixMode, MixSample, Stage2Components,
    DEFAULT_TAU,
};
use crate::memory::{momentum_update, QueueState, DEFAULT_CAPACITY, DEFAULT_MOMENTUM};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig, Moments};
use crate::seeding;
use crate::tensor::{Real, Tensor};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

const TAG_ENCODER: u64 = 1;
const TAG_GENERATOR: u64 = 2;
const TAG_ORDER: u64 = 3;
const TAG_SAMPLE: u64 = 4;
const TAG_LAMBDA: u64 = 5;
const TAG_PARTNER: u64 = 6;

const GROUP_ENCODER: &str = "encoder";
const GROUP_BRANCH: &str = "branch.encoder";
const GROUP_GENERATOR: &str = "generator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub momentum: f64,
    pub queue_capacity: usize,
    /// Beta(alpha, alpha) mixing distribution.
    pub alpha: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub mix_mode: MixMode,
    pub grl_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: DEFAULT_TAU,
            momentum: DEFAULT_MOMENTUM,
            queue_capacity: DEFAULT_CAPACITY,
            alpha: 1.0,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            stage1_epochs: 30,
            stage2_epochs: 20,
            batch_size: 32,
            loss_weights: LossWeights::default(),
            mix_mode: MixMode::SameInstance,
            grl_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("train.tau", self.tau), ("train.alpha", self.alpha)];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{k} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("train.learning_rate", self.learning_rate),
            ("train.weight_decay", self.weight_decay),
            ("train.grl_scale", self.grl_scale),
            ("train.weight_mix_cl", self.loss_weights.mix_cl),
            ("train.weight_3d", self.loss_weights.loss_3d),
            ("train.weight_adv", self.loss_weights.adv),
            ("train.weight_recon", self.loss_weights.recon),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{k} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("train.momentum must lie in [0, 1], got {}", self.momentum)));
        }
        if self.queue_capacity == 0 {
            return Err(Error::invalid("train.queue_capacity must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size must be positive"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    /// Whether stage 2 needs world codes (and therefore a paired queue).
    pub fn uses_codes(&self) -> bool {
        self.loss_weights.loss_3d > 0.0 || self.loss_weights.recon > 0.0
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Rows of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoAdv,
    No3d,
    MixupOnly,
    InfoNce,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoAdv,
        Variant::No3d,
        Variant::MixupOnly,
        Variant::InfoNce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAdv => "no_adv",
            Variant::No3d => "no_3d",
            Variant::MixupOnly => "mixup_only",
            Variant::InfoNce => "infonce",
        }
    }

    /// Training config for this row. Dropping the 3D term also drops the
    /// autoencoder; the contrastive-only baseline spends the whole epoch
    /// budget in stage 1.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let w = &mut c.loss_weights;
        match self {
            Variant::Full => {}
            Variant::NoAdv => w.adv = 0.0,
            Variant::No3d => {
                w.loss_3d = 0.0;
                w.recon = 0.0;
            }
            Variant::MixupOnly => {
                w.adv = 0.0;
                w.loss_3d = 0.0;
                w.recon = 0.0;
            }
            Variant::InfoNce => {
                c.stage1_epochs += c.stage2_epochs;
                c.stage2_epochs = 0;
            }
        }
        c
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// Clips of one optimisation step plus their position in the schedule,
/// which keys every random draw.
pub struct Batch<'a> {
    pub clips: Vec<&'a VideoClip>,
    pub epoch: usize,
    pub step: usize,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Shuffled index batches for one epoch; the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeding::rng(&[seed, TAG_ORDER, epoch as u64]));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Generator branch: a copy of the encoder plus the viewpoint generator.
#[derive(Clone, Debug)]
pub struct Branch<F: Real> {
    pub generator: Generator,
    pub encoder_params: ParamStore<F>,
    pub generator_params: ParamStore<F>,
}

/// Loss summary, per-group gradients and queue updates of one step, not yet
/// applied.
pub struct StepGrads<F: Real> {
    pub report: LossReport,
    pub grads: Vec<(&'static str, Vec<Tensor<F>>)>,
    keys: Vec<Vec<F>>,
    codes: Option<Vec<Vec<F>>>,
    sources: Vec<u64>,
}

struct Stage2Sample<F: Real> {
    comps: [f64; 4],
    correct: bool,
    code: Option<Vec<F>>,
    grads: [Vec<Tensor<F>>; 3],
}

#[derive(Clone, Debug)]
pub struct Trainer<F: Real> {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub params: ParamStore<F>,
    pub key_params: ParamStore<F>,
    pub branch: Option<Branch<F>>,
    pub queue: QueueState<F>,
    pub optim: Adam<F>,
    pub augment: AugmentConfig,
    /// Spread per-sample work over the rayon pool. Results do not depend on
    /// it: gradients are reduced in sample order.
    pub parallel: bool,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
}

fn accumulate<F: Real>(acc: &mut Vec<Tensor<F>>, g: &[Tensor<F>]) {
    if acc.is_empty() {
        acc.extend(g.iter().cloned());
    } else {
        acc.iter_mut().zip(g).for_each(|(a, b)| a.add_assign(b));
    }
}

fn check_finite<F: Real>(what: &str, ts: &[Tensor<F>]) -> Result<()> {
    if ts.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite { component: what.into() })
    }
}

impl<F: Real> Trainer<F> {
    pub fn new(config: TrainConfig, encoder_config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let (encoder, params) = Encoder::new::<F>(encoder_config, seeding::derive(&[config.seed, TAG_ENCODER]))?;
        let queue = QueueState::keys_only(config.queue_capacity, encoder.config().embedding_dim)?;
        let augment = AugmentConfig {
            out_frames: Some(encoder.config().input_shape[0]),
            ..AugmentConfig::default()
        };
        Ok(Trainer {
            key_params: params.clone(),
            optim: Adam::new(config.adam()),
            config,
            encoder,
            params,
            branch: None,
            queue,
            augment,
            parallel: cfg!(feature = "parallel"),
            epoch: 0,
            global_step: 0,
        })
    }

    pub fn stage(&self) -> u8 {
        if self.branch.is_some() {
            2
        } else {
            1
        }
    }

    /// Clones the encoder into the generator branch, builds the generator and
    /// starts fresh queues. No-op when already in stage 2.
    pub fn enter_stage2(&mut self) -> Result<()> {
        if self.branch.is_some() {
            return Ok(());
        }
        let [c, _, m, n] = self.encoder.config().split_shape();
        let gcfg = GeneratorConfig::for_features(c, m, n);
        let code_dim = gcfg.code_dim;
        let (generator, generator_params) = Generator::new::<F>(gcfg, seeding::derive(&[self.config.seed, TAG_GENERATOR]))?;
        self.branch = Some(Branch {
            generator,
            encoder_params: clone_into_generator_branch(&self.params),
            generator_params,
        });
        let d = self.encoder.config().embedding_dim;
        self.queue = if self.config.uses_codes() {
            QueueState::paired(self.config.queue_capacity, d, code_dim)?
        } else {
            QueueState::keys_only(self.config.queue_capacity, d)?
        };
        Ok(())
    }

    fn sample_seed(&self, batch: &Batch, i: usize) -> u64 {
        seeding::derive(&[self.config.seed, TAG_SAMPLE, batch.epoch as u64, batch.step as u64, i as u64])
    }

    /// Augmented view of batch item `i` as an encoder input.
    pub fn view(&self, batch: &Batch, i: usize, profile: Profile) -> Tensor<F> {
        augment(batch.clips[i], self.sample_seed(batch, i), profile, &self.augment).to_tensor()
    }

    /// Momentum-encoder embedding; no gradient is recorded.
    pub fn key_embedding(&self, x: Tensor<F>) -> Result<Vec<F>> {
        let tape = Tape::new();
        let p = self.key_params.bind(&tape, false);
        let k = self.encoder.forward_full(&p, tape.constant(x))?;
        Ok(k.value().data().to_vec())
    }

    fn map_samples<T: Send>(&self, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        #[cfg(feature = "parallel")]
        if self.parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    fn batch_keys(&self, batch: &Batch) -> Result<Vec<Vec<F>>> {
        let keys = self.map_samples(batch.len(), |i| self.key_embedding(self.view(batch, i, Profile::Key)))?;
        if keys.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { component: "key".into() });
        }
        Ok(keys)
    }

    fn negatives(&self) -> Option<Tensor<F>> {
        (self.queue.filled() > 0).then(|| self.queue.keys_matrix())
    }

    /// Stage-1 loss and gradients without touching any state.
    pub fn stage1_grads(&self, batch: &Batch) -> Result<StepGrads<F>> {
        if self.branch.is_some() {
            return Err(Error::invalid("stage-1 step requested after the generator branch was created"));
        }
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let b = batch.len();
        let keys = self.batch_keys(batch)?;
        let neg = self.negatives();
        let tau = F::of(self.config.tau);
        let scale = F::of(1.0 / b as f64);
        let per = self.map_samples(b, |i| {
            let tape = Tape::new();
            let p = self.params.bind(&tape, true);
            let q = self.encoder.forward_full(&p, tape.constant(self.view(batch, i, Profile::Query)))?;
            let k = tape.constant(Tensor::from_vec(keys[i].clone()));
            let c = info_nce(q, k, neg.clone().map(|n| tape.constant(n)), tau)?;
            let g = tape.backward(c.loss.scale(scale));
            Ok((c.loss.item().f64(), c.correct(), p.grads(&g)))
        })?;
        let mut grads = Vec::new();
        let (mut loss, mut correct) = (0.0, 0usize);
        for (l, ok, g) in &per {
            loss += l;
            correct += *ok as usize;
            accumulate(&mut grads, g);
        }
        let loss = loss / b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { component: "info_nce".into() });
        }
        check_finite("gradient", &grads)?;
        Ok(StepGrads {
            report: LossReport {
                info_nce: loss,
                total: loss,
                pretext_accuracy: correct as f64 / b as f64,
                ..LossReport::default()
            },
            grads: vec![(GROUP_ENCODER, grads)],
            keys,
            codes: None,
            sources: batch.clips.iter().map(|c| c.scene_id).collect(),
        })
    }

    pub fn stage1_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let s = self.stage1_grads(batch)?;
        let r = s.report;
        self.apply(s)?;
        Ok(r)
    }

    /// Stage-2 loss and gradients without touching any state. `lambda`
    /// overrides the sampled mixing coefficient for every item.
    pub fn stage2_grads(&self, batch: &Batch, lambda: Option<f64>) -> Result<StepGrads<F>> {
        let br = self
            .branch
            .as_ref()
            .ok_or_else(|| Error::invalid("stage-2 step requested before the generator branch exists"))?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let b = batch.len();
        let keys = self.batch_keys(batch)?;
        let d = self.encoder.config().embedding_dim;
        let rows: Vec<&[F]> = keys.iter().map(Vec::as_slice).collect();
        let batch_keys = stack_rows(&rows, d)?;
        let neg = self.negatives();
        let scale = F::of(1.0 / b as f64);
        let per = self.map_samples(b, |i| self.stage2_sample(br, batch, i, &batch_keys, neg.as_ref(), lambda, scale))?;

        let w = self.config.loss_weights;
        let mut sums = [0.0; 4];
        let mut correct = 0usize;
        let mut acc: [Vec<Tensor<F>>; 3] = Default::default();
        for s in &per {
            sums.iter_mut().zip(s.comps).for_each(|(a, v)| *a += v);
            correct += s.correct as usize;
            for (a, g) in acc.iter_mut().zip(&s.grads) {
                accumulate(a, g);
            }
        }
        let mean = |k: usize| sums[k] / b as f64;
        let report = composite_stage2_loss(
            &Stage2Components {
                mix_cl: mean(0),
                loss_3d: mean(1),
                adv: mean(2),
                recon: mean(3),
                pretext_accuracy: correct as f64 / b as f64,
            },
            &w,
        )?;
        let codes: Option<Vec<Vec<F>>> = per.iter().map(|s| s.code.clone()).collect();
        if codes.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { component: "code".into() });
        }
        let [ge, gb, gg] = acc;
        for g in [&ge, &gb, &gg] {
            check_finite("gradient", g)?;
        }
        Ok(StepGrads {
            report,
            grads: vec![(GROUP_ENCODER, ge), (GROUP_BRANCH, gb), (GROUP_GENERATOR, gg)],
            keys,
            codes: codes.filter(|_| self.queue.has_codes()),
            sources: batch.clips.iter().map(|c| c.scene_id).collect(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn stage2_sample(
        &self,
        br: &Branch<F>,
        batch: &Batch,
        i: usize,
        batch_keys: &Tensor<F>,
        neg: Option<&Tensor<F>>,
        lambda: Option<f64>,
        scale: F,
    ) -> Result<Stage2Sample<F>> {
        let cfg = &self.config;
        let w = cfg.loss_weights;
        let b = batch.len();
        let seed = self.sample_seed(batch, i);
        let lambda = match lambda {
            Some(l) => l,
            None => sample_lambda(cfg.alpha, &mut seeding::rng(&[seed, TAG_LAMBDA]))?,
        };
        let partner = match cfg.mix_mode {
            MixMode::SameInstance => i,
            MixMode::CrossInstance => seeding::rng(&[seed, TAG_PARTNER]).gen_range(0..b),
        };

        let tape = Tape::new();
        let pq = self.params.bind(&tape, true);
        let pb = br.encoder_params.bind(&tape, true);
        let pg = br.generator_params.bind(&tape, true);
        let enc = &self.encoder;
        let branch_view = |j: usize| -> Result<_> {
            let feat = enc.forward_first(&pb, tape.constant(self.view(batch, j, Profile::Generator)))?;
            br.generator.generate(&pg, feat)
        };

        let f1 = enc.forward_first(&pq, tape.constant(self.view(batch, i, Profile::Query)))?;
        let own = branch_view(i)?;
        let other = if partner == i { own.projected } else { branch_view(partner)?.projected };
        let mixed = enc.forward_second(&pq, mix_features(f1, other, F::of(lambda))?)?;
        let mix = MixSample::new(lambda, cfg.alpha, b, i, partner)?;
        let cl = mixup_contrastive_loss(
            mixed,
            tape.constant(batch_keys.clone()),
            neg.map(|n| tape.constant(n.clone())),
            &mix,
            cfg.mix_mode,
            F::of(cfg.tau),
        )?;
        let mut comps = [cl.loss.item().f64(), 0.0, 0.0, 0.0];
        let mut total = cl.loss.scale(F::of(w.mix_cl));

        // f(T(x)) with gradients blocked: lookup query and adversarial anchor
        let anchor = if w.loss_3d > 0.0 || w.adv > 0.0 {
            Some(enc.forward_second(&pq, f1.detach())?)
        } else {
            None
        };

        let mut code_out = None;
        if cfg.uses_codes() {
            let (code, recon) = br.generator.compress_world(&pg, own.world)?;
            code_out = Some(code.value().data().to_vec());
            comps[3] = recon.item().f64();
            if w.recon > 0.0 {
                total = total.add(recon.scale(F::of(w.recon)));
            }
            if let (Some(a), true) = (anchor, w.loss_3d > 0.0 && self.queue.warmed_up()) {
                match self.queue.top1_neighbor(a.value().data(), batch.clips[i].scene_id) {
                    Ok(idx) => {
                        let entry = self
                            .queue
                            .code(idx)
                            .ok_or_else(|| Error::invalid("queue holds no world codes"))?;
                        let l = three_d_loss(code, tape.constant(Tensor::from_vec(entry.to_vec())))?;
                        comps[1] = l.item().f64();
                        total = total.add(l.scale(F::of(w.loss_3d)));
                    }
                    Err(Error::LookupUnavailable) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        if let (Some(a), true) = (anchor, w.adv > 0.0) {
            let reversed = gradient_reversal(own.projected, F::of(cfg.grl_scale))?;
            let l = adversarial_loss(enc.forward_second(&pb, reversed)?, a)?;
            comps[2] = l.item().f64();
            total = total.add(l.scale(F::of(w.adv)));
        }

        let g = tape.backward(total.scale(scale));
        Ok(Stage2Sample {
            comps,
            correct: cl.correct(),
            code: code_out,
            grads: [pq.grads(&g), pb.grads(&g), pg.grads(&g)],
        })
    }

    pub fn stage2_step(&mut self, batch: &Batch, lambda: Option<f64>) -> Result<LossReport> {
        let s = self.stage2_grads(batch, lambda)?;
        let r = s.report;
        self.apply(s)?;
        Ok(r)
    }

    /// Optimizer update, momentum update and enqueue, in that order.
    pub fn apply(&mut self, step: StepGrads<F>) -> Result<()> {
        self.optim.begin_step();
        for (group, g) in &step.grads {
            let store = match *group {
                GROUP_ENCODER => &mut self.params,
                GROUP_BRANCH => &mut self.branch.as_mut().expect("stage 2").encoder_params,
                _ => &mut self.branch.as_mut().expect("stage 2").generator_params,
            };
            self.optim.update(group, store, g)?;
        }
        momentum_update(&self.params, &mut self.key_params, self.config.momentum)?;
        for (i, key) in step.keys.iter().enumerate() {
            let code = step.codes.as_ref().map(|c| c[i].as_slice());
            self.queue.enqueue_pair(key, code, step.sources[i])?;
        }
        self.global_step += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "training_state");
        ck.set_meta("code_version", CODE_VERSION);
        ck.set_meta("stage", self.stage());
        ck.set_meta("epoch", self.epoch);
        ck.set_meta("global_step", self.global_step);
        ck.set_meta("train_config", serde_json::to_string(&self.config).expect("serializable"));
        ck.set_meta("encoder_config", serde_json::to_string(self.encoder.config()).expect("serializable"));
        ck.put_store("encoder", &self.params);
        ck.put_store("key_encoder", &self.key_params);
        if let Some(br) = &self.branch {
            ck.set_meta("generator_config", serde_json::to_string(br.generator.config()).expect("serializable"));
            ck.put_store("branch.encoder", &br.encoder_params);
            ck.put_store("generator", &br.generator_params);
        }
        let q = &self.queue;
        let (keys, codes, sources, cursor, filled) = q.raw();
        ck.insert_tensor("queue.keys", &Tensor::from_vec(keys.to_vec()));
        if q.has_codes() {
            ck.insert_tensor("queue.codes", &Tensor::from_vec(codes.to_vec()));
        }
        ck.insert_u64("queue.sources", sources.to_vec());
        let state = [q.capacity(), q.key_dim(), q.code_dim().unwrap_or(0), cursor, filled];
        ck.insert_u64("queue.state", state.iter().map(|&v| v as u64).collect());
        ck.insert_u64("optim.step", vec![self.optim.step_count()]);
        for (g, m) in self.optim.groups() {
            ck.insert_u64(format!("optim.{g}.len"), vec![m.m.len() as u64]);
            for (k, (a, b)) in m.m.iter().zip(&m.v).enumerate() {
                ck.insert_tensor(format!("optim.{g}.m.{k}"), a);
                ck.insert_tensor(format!("optim.{g}.v.{k}"), b);
            }
        }
        ck
    }

    /// Rebuilds the full training state from a checkpoint, continuing under
    /// `config` (which may differ from the one the checkpoint was written
    /// with, e.g. a stage-1 state reused by several stage-2 variants).
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let meta = |k: &str| ck.meta(k).ok_or_else(|| Error::invalid(format!("checkpoint lacks {k}")));
        let enc_cfg: EncoderConfig = serde_json::from_str(meta("encoder_config")?)?;
        let mut t = Trainer::new(config, enc_cfg)?;
        ck.load_store("encoder", &mut t.params)?;
        ck.load_store("key_encoder", &mut t.key_params)?;
        if meta("stage")? == "2" {
            let gcfg: GeneratorConfig = serde_json::from_str(meta("generator_config")?)?;
            let (generator, mut generator_params) = Generator::new::<F>(gcfg, 0)?;
            let mut encoder_params = t.params.clone();
            ck.load_store("branch.encoder", &mut encoder_params)?;
            ck.load_store("generator", &mut generator_params)?;
            t.branch = Some(Branch {
                generator,
                encoder_params,
                generator_params,
            });
        }
        let state = ck.u64s("queue.state")?;
        let [cap, kd, cd, cursor, filled] = <[u64; 5]>::try_from(state)
            .map_err(|_| Error::invalid("queue.state must hold 5 integers"))?
            .map(|v| v as usize);
        let codes = if cd > 0 {
            ck.tensor::<F>("queue.codes")?.data().to_vec()
        } else {
            Vec::new()
        };
        t.queue = QueueState::from_raw(
            cap,
            kd,
            (cd > 0).then_some(cd),
            ck.tensor::<F>("queue.keys")?.data().to_vec(),
            codes,
            ck.u64s("queue.sources")?,
            cursor,
            filled,
        )?;
        let step = ck.u64s("optim.step")?.first().copied().unwrap_or(0);
        let mut groups = std::collections::BTreeMap::new();
        for g in [GROUP_ENCODER, GROUP_BRANCH, GROUP_GENERATOR] {
            let Ok(len) = ck.u64s(&format!("optim.{g}.len")) else { continue };
            let n = len.first().copied().unwrap_or(0) as usize;
            let read = |which: &str| -> Result<Vec<Tensor<F>>> {
                (0..n).map(|k| ck.tensor(&format!("optim.{g}.{which}.{k}"))).collect()
            };
            groups.insert(g.to_string(), Moments { m: read("m")?, v: read("v")? });
        }
        t.optim = Adam::restore(t.config.adam(), step, groups);
        t.epoch = meta("epoch")?.parse().map_err(|_| Error::invalid("bad epoch in checkpoint"))?;
        t.global_step = meta("global_step")?
            .parse()
            .map_err(|_| Error::invalid("bad global_step in checkpoint"))?;
        Ok(t)
    }
}

/// Encoder architecture and query-encoder weights from a training checkpoint.
pub fn load_encoder<F: Real>(path: &Path) -> Result<(Encoder, ParamStore<F>)> {
    let ck = Checkpoint::load(path)?;
    let cfg: EncoderConfig = serde_json::from_str(
        ck.meta("encoder_config")
            .ok_or_else(|| Error::format(path, "not a training checkpoint (no encoder_config)"))?,
    )?;
    let (enc, mut params) = Encoder::new::<F>(cfg, 0)?;
    ck.load_store("encoder", &mut params)?;
    Ok((enc, params))
}

fn nan_if_null<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// One line of `metrics.jsonl`. Rejected steps carry `null` losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub stage: u8,
    #[serde(deserialize_with = "nan_if_null")]
    pub info_nce: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub mix_cl: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub loss_3d: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub adv: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub recon: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub total: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub pretext_acc: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl MetricsRecord {
    /// Every field except wall time agrees within `tol`.
    pub fn matches(&self, other: &Self, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a.is_nan() && b.is_nan()) || (a - b).abs() <= tol;
        self.step == other.step
            && self.epoch == other.epoch
            && self.stage == other.stage
            && close(self.info_nce, other.info_nce)
            && close(self.mix_cl, other.mix_cl)
            && close(self.loss_3d, other.loss_3d)
            && close(self.adv, other.adv)
            && close(self.recon, other.recon)
            && close(self.total, other.total)
            && close(self.pretext_acc, other.pretext_acc)
            && close(self.lr, other.lr)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from the newest checkpoint in the run directory.
    pub resume: bool,
    /// Start from this state instead of a fresh initialisation.
    pub init_from: Option<PathBuf>,
    /// Stop once this many epochs are complete (simulated interruption).
    pub stop_after: Option<usize>,
    pub parallel: bool,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub epochs_completed: usize,
    pub steps: u64,
    pub rejected_steps: usize,
    pub last_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

pub fn epoch_checkpoint(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:03}.ckpt"))
}

/// Newest `epoch_NNN.ckpt` in the run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Option<(usize, PathBuf)> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    fs::read_dir(&dir)
        .ok()?
        .filter_map(|e| {
            let p = e.ok()?.path();
            let stem = p.file_name()?.to_str()?.strip_prefix("epoch_")?.strip_suffix(".ckpt")?;
            Some((stem.parse().ok()?, p))
        })
        .max_by_key(|(e, _)| *e)
}

/// Keeps only the records of the first `epochs` epochs.
fn truncate_metrics(path: &Path, epochs: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<String> = read_metrics(path)?
        .into_iter()
        .filter(|r| r.epoch < epochs)
        .map(|r| serde_json::to_string(&r).expect("serializable"))
        .collect();
    let mut text = keep.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) the full schedule on `clips`, writing per-step metrics
/// and one checkpoint per epoch under `run_dir`.
pub fn run_training<F: Real>(
    config: &TrainConfig,
    encoder_config: &EncoderConfig,
    clips: &[VideoClip],
    run_dir: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    config.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("no training clips"));
    }
    let ckdir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
    let metrics_path = run_dir.join(METRICS_FILE);

    let restore = |path: &Path, same_config: bool| -> Result<Trainer<F>> {
        let t = Trainer::<F>::from_checkpoint(&Checkpoint::load(path)?, config.clone())?;
        if t.encoder.config() != encoder_config {
            return Err(Error::invalid(format!("{}: encoder configuration differs", path.display())));
        }
        let saved: Option<TrainConfig> = Checkpoint::load(path)?
            .meta("train_config")
            .and_then(|s| serde_json::from_str(s).ok());
        if same_config && saved.as_ref() != Some(config) {
            return Err(Error::invalid(format!(
                "{}: training configuration differs from the interrupted run",
                path.display()
            )));
        }
        Ok(t)
    };
    let resumed = opts.resume.then(|| latest_checkpoint(run_dir)).flatten();
    let mut trainer = if let Some((epoch, path)) = &resumed {
        let t = restore(path, true)?;
        truncate_metrics(&metrics_path, *epoch)?;
        t
    } else {
        let t = match &opts.init_from {
            Some(p) => restore(p, false)?,
            None => Trainer::<F>::new(config.clone(), encoder_config.clone())?,
        };
        truncate_metrics(&metrics_path, t.epoch)?;
        t
    };
    trainer.parallel = opts.parallel;

    let mut out = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut summary = RunSummary {
        epochs_completed: trainer.epoch,
        steps: trainer.global_step,
        rejected_steps: 0,
        last_checkpoint: resumed.map(|(_, p)| p),
        final_checkpoint: None,
    };
    let total = config.total_epochs();
    while trainer.epoch < total {
        if opts.stop_after.is_some_and(|s| trainer.epoch >= s) {
            return Ok(summary);
        }
        let epoch = trainer.epoch;
        if epoch >= config.stage1_epochs {
            trainer.enter_stage2()?;
        }
        let mut epoch_acc = 0.0;
        let batches = epoch_batches(clips.len(), config.batch_size, config.seed, epoch);
        let nb = batches.len();
        for (step, idx) in batches.into_iter().enumerate() {
            let batch = Batch {
                clips: idx.iter().map(|&i| &clips[i]).collect(),
                epoch,
                step,
            };
            let t0 = Instant::now();
            let stage = trainer.stage();
            let result = if stage == 2 {
                trainer.stage2_step(&batch, None)
            } else {
                trainer.stage1_step(&batch)
            };
            let report = match result {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    eprintln!("epoch {epoch} step {step}: step rejected, state kept: {e}");
                    summary.rejected_steps += 1;
                    trainer.global_step += 1;
                    LossReport {
                        info_nce: f64::NAN,
                        mix_cl: f64::NAN,
                        loss_3d: f64::NAN,
                        adv: f64::NAN,
                        recon: f64::NAN,
                        total: f64::NAN,
                        pretext_accuracy: f64::NAN,
                    }
                }
                Err(e) => return Err(e),
            };
            epoch_acc += report.pretext_accuracy;
            let rec = MetricsRecord {
                step: trainer.global_step - 1,
                epoch,
                stage,
                info_nce: report.info_nce,
                mix_cl: report.mix_cl,
                loss_3d: report.loss_3d,
                adv: report.adv,
                recon: report.recon,
                total: report.total,
                pretext_acc: report.pretext_accuracy,
                lr: config.learning_rate,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            };
            let line = serde_json::to_string(&rec).expect("serializable");
            writeln!(out, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        }
        out.flush().map_err(|e| Error::io(&metrics_path, e))?;
        trainer.epoch += 1;
        let path = epoch_checkpoint(run_dir, trainer.epoch);
        trainer.to_checkpoint().save(&path)?;
        if opts.verbose {
            eprintln!(
                "epoch {}/{total} stage {} pretext acc {:.3}",
                trainer.epoch,
                trainer.stage(),
                epoch_acc / nb as f64
            );
        }
        summary.epochs_completed = trainer.epoch;
        summary.steps = trainer.global_step;
        summary.last_checkpoint = Some(path);
    }
    if let Some(last) = &summary.last_checkpoint {
        let fin = run_dir.join(FINAL_CHECKPOINT);
        fs::copy(last, &fin).map_err(|e| Error::io(&fin, e))?;
        summary.final_checkpoint = Some(fin);
    }
    Ok(summary)
}
