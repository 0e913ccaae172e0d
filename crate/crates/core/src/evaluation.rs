//! Downstream measurement: linear probe, full finetune, ten-crop inference
//! and embedding export.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::dataset::augment::{flip_horizontal, resized_crop};
use crate::dataset::io::{dataset_root, load_clip, read_manifest};
use crate::dataset::VideoClip;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::seeding;
use crate::tensor::{Real, Tensor};
use crate::trainer::load_encoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CvsProtocol {
    #[serde(rename = "CVS1")]
    Cvs1,
    #[serde(rename = "CVS2")]
    Cvs2,
    #[serde(rename = "CVS3")]
    Cvs3,
}

impl CvsProtocol {
    pub const ALL: [CvsProtocol; 3] = [CvsProtocol::Cvs1, CvsProtocol::Cvs2, CvsProtocol::Cvs3];

    pub fn viewpoint(self) -> u32 {
        match self {
            CvsProtocol::Cvs1 => 0,
            CvsProtocol::Cvs2 => 45,
            CvsProtocol::Cvs3 => 90,
        }
    }

    pub fn from_viewpoint(deg: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.viewpoint() == deg)
            .ok_or_else(|| Error::invalid(format!("no test protocol for viewpoint {deg}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            CvsProtocol::Cvs1 => "CVS1",
            CvsProtocol::Cvs2 => "CVS2",
            CvsProtocol::Cvs3 => "CVS3",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Linear,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub protocol: CvsProtocol,
    pub mode: ProbeMode,
    pub top1_accuracy: f64,
    /// Indexed by class id; classes absent from the test set report 0.
    pub per_class_accuracy: Vec<f64>,
    pub n_test: usize,
    pub seed: u64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl ProbeResult {
    fn new(protocol: CvsProtocol, mode: ProbeMode, seed: u64, k: usize, predictions: Vec<usize>, labels: Vec<usize>) -> Self {
        let n = labels.len();
        let hits = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
        let per_class_accuracy = (0..k)
            .map(|c| {
                let total = labels.iter().filter(|&&l| l == c).count();
                let ok = predictions.iter().zip(&labels).filter(|(p, l)| **l == c && *p == *l).count();
                if total == 0 {
                    0.0
                } else {
                    ok as f64 / total as f64
                }
            })
            .collect();
        ProbeResult {
            protocol,
            mode,
            top1_accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
            per_class_accuracy,
            n_test: n,
            seed,
            predictions,
            labels,
        }
    }

    /// Accuracy recomputed from the stored predictions.
    pub fn recomputed_accuracy(&self) -> f64 {
        let hits = self.predictions.iter().zip(&self.labels).filter(|(p, l)| p == l).count();
        hits as f64 / self.labels.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Per-dimension affine standardisation fitted on training features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(feats: &[Vec<f64>]) -> Self {
        let d = feats.first().map_or(0, Vec::len);
        let n = feats.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let inv_std = (0..d)
            .map(|j| {
                let var = feats.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
                1.0 / (var.sqrt() + 1e-6)
            })
            .collect();
        Standardizer { mean, inv_std }
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }
}

/// Linear softmax classifier on standardised pooled encoder features.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub standardizer: Standardizer,
    /// `[K, D]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn logits(&self, feat: &[f64]) -> Vec<f64> {
        let x = self.standardizer.apply(feat);
        let d = x.len();
        (0..self.classes)
            .map(|c| self.bias[c] + self.weight[c * d..(c + 1) * d].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn probabilities(&self, feat: &[f64]) -> Vec<f64> {
        softmax(&self.logits(feat))
    }

    pub fn predict(&self, feat: &[f64]) -> usize {
        argmax(&self.logits(feat))
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the maximum.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Clip trimmed or edge-padded to exactly `len` frames around its centre.
pub fn fit_frames(clip: &VideoClip, len: usize) -> VideoClip {
    let t = clip.dims[0];
    if t >= len {
        return clip.center_window(len);
    }
    let [_, h, w, c] = clip.dims;
    let fsz = h * w * c;
    let before = (len - t) / 2;
    let frames = (0..len)
        .flat_map(|i| {
            let src = i.saturating_sub(before).min(t - 1);
            clip.frames[src * fsz..(src + 1) * fsz].iter().copied()
        })
        .collect();
    VideoClip {
        dims: [len, h, w, c],
        frames,
        ..clip.clone()
    }
}

fn map_clips<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    (0..n).map(f).collect()
}

/// Pooled pre-head features of one clip (centre window, full frame).
pub fn clip_features<F: Real>(enc: &Encoder, params: &ParamStore<F>, clip: &VideoClip) -> Result<Vec<f64>> {
    let x = fit_frames(clip, enc.config().input_shape[0]).to_tensor::<F>();
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    Ok(enc.features(&p, tape.constant(x))?.value().to_f64_vec())
}

pub fn extract_features<F: Real>(enc: &Encoder, params: &ParamStore<F>, clips: &[VideoClip]) -> Result<Vec<Vec<f64>>> {
    map_clips(clips.len(), |i| clip_features(enc, params, &clips[i]))
}

/// Unit-norm embeddings (projection-head output).
pub fn extract_embeddings<F: Real>(enc: &Encoder, params: &ParamStore<F>, clips: &[VideoClip]) -> Result<Vec<Vec<f64>>> {
    map_clips(clips.len(), |i| {
        let x = fit_frames(&clips[i], enc.config().input_shape[0]).to_tensor::<F>();
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        Ok(enc.forward_full(&p, tape.constant(x))?.value().to_f64_vec())
    })
}

/// Number of classes covering both label sets; rejects test labels never seen
/// in training.
fn check_labels(train: &[usize], test: &[usize]) -> Result<usize> {
    let seen: BTreeSet<usize> = train.iter().copied().collect();
    if let Some(l) = test.iter().find(|l| !seen.contains(l)) {
        return Err(Error::invalid(format!("test label {l} does not occur in the probe training set")));
    }
    if seen.is_empty() {
        return Err(Error::invalid("empty probe training set"));
    }
    Ok(seen.iter().max().map_or(0, |m| m + 1))
}

/// Softmax regression with Adam on fixed features.
pub fn fit_linear_head(feats: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<ClassifierHead> {
    let standardizer = Standardizer::fit(feats);
    let xs: Vec<Vec<f64>> = feats.iter().map(|f| standardizer.apply(f)).collect();
    let d = standardizer.mean.len();
    let mut store = ParamStore::<f64>::new();
    store.add("weight", Tensor::zeros(&[classes, d]));
    store.add("bias", Tensor::zeros(&[classes]));
    let mut opt = Adam::new(cfg.adam());
    let mut head = ClassifierHead {
        standardizer,
        weight: vec![0.0; classes * d],
        bias: vec![0.0; classes],
        classes,
    };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.shuffle(&mut seeding::rng(&[cfg.seed, 0x9120BE, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut gw = vec![0.0; classes * d];
            let mut gb = vec![0.0; classes];
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let x = &xs[i];
                let z: Vec<f64> = (0..classes)
                    .map(|c| head.bias[c] + head.weight[c * d..(c + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
                    .collect();
                let p = softmax(&z);
                for c in 0..classes {
                    let g = (p[c] - (labels[i] == c) as u8 as f64) * inv;
                    gb[c] += g;
                    gw[c * d..(c + 1) * d].iter_mut().zip(x).for_each(|(a, v)| *a += g * v);
                }
            }
            opt.begin_step();
            opt.update("head", &mut store, &[Tensor::new(&[classes, d], gw)?, Tensor::new(&[classes], gb)?])?;
            head.weight = store.tensors()[0].data().to_vec();
            head.bias = store.tensors()[1].data().to_vec();
        }
    }
    Ok(head)
}

/// Fits a linear head on frozen features of the training clips.
pub fn fit_linear_probe<F: Real>(enc: &Encoder, params: &ParamStore<F>, train: &[VideoClip], cfg: &ProbeConfig) -> Result<ClassifierHead> {
    let labels: Vec<usize> = train.iter().map(|c| c.class_id).collect();
    let k = check_labels(&labels, &[])?;
    fit_linear_head(&extract_features(enc, params, train)?, &labels, k, cfg)
}

/// Scores a fitted head on one test protocol. `ten_crop` gives the crop side
/// for multi-crop inference.
pub fn evaluate_head<F: Real>(
    enc: &Encoder,
    params: &ParamStore<F>,
    head: &ClassifierHead,
    test: &[VideoClip],
    mode: ProbeMode,
    seed: u64,
    ten_crop: Option<usize>,
) -> Result<ProbeResult> {
    let protocol = test_protocol(test)?;
    let labels: Vec<usize> = test.iter().map(|c| c.class_id).collect();
    if let Some(&l) = labels.iter().find(|&&l| l >= head.classes) {
        return Err(Error::invalid(format!("test label {l} does not occur in the probe training set")));
    }
    let preds = match ten_crop {
        None => extract_features(enc, params, test)?.iter().map(|f| head.predict(f)).collect(),
        Some(side) => test
            .iter()
            .map(|c| Ok(argmax(&multicrop_inference(enc, params, head, c, (side, side), true)?.scores)))
            .collect::<Result<_>>()?,
    };
    Ok(ProbeResult::new(protocol, mode, seed, head.classes, preds, labels))
}

/// Frozen-encoder linear probe on in-memory clips.
pub fn linear_probe_clips<F: Real>(
    enc: &Encoder,
    params: &ParamStore<F>,
    train: &[VideoClip],
    test: &[VideoClip],
    cfg: &ProbeConfig,
) -> Result<(ProbeResult, ClassifierHead)> {
    let train_labels: Vec<usize> = train.iter().map(|c| c.class_id).collect();
    let test_labels: Vec<usize> = test.iter().map(|c| c.class_id).collect();
    check_labels(&train_labels, &test_labels)?;
    let head = fit_linear_probe(enc, params, train, cfg)?;
    let r = evaluate_head(enc, params, &head, test, ProbeMode::Linear, cfg.seed, None)?;
    Ok((r, head))
}

fn test_protocol(test: &[VideoClip]) -> Result<CvsProtocol> {
    let first = test.first().ok_or_else(|| Error::invalid("empty probe test set"))?;
    if test.iter().any(|c| c.viewpoint_deg != first.viewpoint_deg) {
        return Err(Error::invalid("probe test set mixes viewpoints"));
    }
    CvsProtocol::from_viewpoint(first.viewpoint_deg)
}

/// Trains the encoder and a linear head end to end; returns the result and
/// the finetuned encoder weights.
pub fn finetune_clips<F: Real>(
    enc: &Encoder,
    params: &ParamStore<F>,
    train: &[VideoClip],
    test: &[VideoClip],
    cfg: &ProbeConfig,
) -> Result<(ProbeResult, ParamStore<F>)> {
    let train_labels: Vec<usize> = train.iter().map(|c| c.class_id).collect();
    let test_labels: Vec<usize> = test.iter().map(|c| c.class_id).collect();
    check_labels(&train_labels, &test_labels)?;
    let (head, params) = fit_finetune(enc, params, train, cfg)?;
    let r = evaluate_head(enc, &params, &head, test, ProbeMode::Finetune, cfg.seed, None)?;
    Ok((r, params))
}

/// End-to-end training of encoder plus head on the training clips.
pub fn fit_finetune<F: Real>(
    enc: &Encoder,
    params: &ParamStore<F>,
    train: &[VideoClip],
    cfg: &ProbeConfig,
) -> Result<(ClassifierHead, ParamStore<F>)> {
    let train_labels: Vec<usize> = train.iter().map(|c| c.class_id).collect();
    let k = check_labels(&train_labels, &[])?;
    let standardizer = Standardizer::fit(&extract_features(enc, params, train)?);
    let d = standardizer.mean.len();
    let mut params = params.clone();
    let mut head_store = ParamStore::<F>::new();
    let lin = Linear::zeros(&mut head_store, "probe", d, k);
    let mean = Tensor::<F>::from_f64(&[d], &standardizer.mean)?;
    let inv_std = Tensor::<F>::from_f64(&[d], &standardizer.inv_std)?;
    let mut opt = Adam::<F>::new(cfg.adam());
    let frames = enc.config().input_shape[0];
    let inputs: Vec<Tensor<F>> = train.iter().map(|c| fit_frames(c, frames).to_tensor()).collect();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeding::rng(&[cfg.seed, 0xF17E, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let scale = F::of(1.0 / chunk.len() as f64);
            let per = map_clips(chunk.len(), |j| {
                let i = chunk[j];
                let tape = Tape::new();
                let p = params.bind(&tape, true);
                let h = head_store.bind(&tape, true);
                let f = enc.features(&p, tape.constant(inputs[i].clone()))?;
                let x = f.sub(tape.constant(mean.clone())).mul(tape.constant(inv_std.clone()));
                let mut target = vec![F::zero(); k];
                target[train_labels[i]] = F::one();
                let loss = lin.forward(&h, x).soft_cross_entropy(&target).scale(scale);
                let g = tape.backward(loss);
                Ok((p.grads(&g), h.grads(&g)))
            })?;
            let (mut ge, mut gh): (Vec<Tensor<F>>, Vec<Tensor<F>>) = (Vec::new(), Vec::new());
            for (a, b) in &per {
                add_into(&mut ge, a);
                add_into(&mut gh, b);
            }
            opt.begin_step();
            opt.update("encoder", &mut params, &ge)?;
            opt.update("head", &mut head_store, &gh)?;
        }
    }
    let head = ClassifierHead {
        standardizer,
        weight: head_store.tensors()[0].to_f64_vec(),
        bias: head_store.tensors()[1].to_f64_vec(),
        classes: k,
    };
    Ok((head, params))
}

fn add_into<F: Real>(acc: &mut Vec<Tensor<F>>, g: &[Tensor<F>]) {
    if acc.is_empty() {
        acc.extend(g.iter().cloned());
    } else {
        acc.iter_mut().zip(g).for_each(|(a, b)| a.add_assign(b));
    }
}

fn load_manifest_clips(manifest: &Path) -> Result<Vec<VideoClip>> {
    let root = dataset_root(manifest);
    read_manifest(manifest)?.iter().map(|e| load_clip(&root, e)).collect()
}

pub fn linear_probe(checkpoint: &Path, train_manifest: &Path, test_manifest: &Path, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let (enc, params) = load_encoder::<f32>(checkpoint)?;
    let train = load_manifest_clips(train_manifest)?;
    let test = load_manifest_clips(test_manifest)?;
    Ok(linear_probe_clips(&enc, &params, &train, &test, cfg)?.0)
}

pub fn finetune(checkpoint: &Path, train_manifest: &Path, test_manifest: &Path, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let (enc, params) = load_encoder::<f32>(checkpoint)?;
    let train = load_manifest_clips(train_manifest)?;
    let test = load_manifest_clips(test_manifest)?;
    Ok(finetune_clips(&enc, &params, &train, &test, cfg)?.0)
}

/// Averaged class probabilities and the number of averaged terms.
#[derive(Clone, Debug, PartialEq)]
pub struct MulticropScores {
    pub scores: Vec<f64>,
    pub terms: usize,
}

/// Start frames of half-overlapping windows covering `t` frames; a clip
/// shorter than the window gets one (padded) window.
pub fn temporal_windows(t: usize, window: usize) -> Vec<usize> {
    if t <= window {
        return vec![0];
    }
    let stride = (window / 2).max(1);
    let mut starts: Vec<usize> = (0..=t - window).step_by(stride).collect();
    if *starts.last().expect("non-empty") != t - window {
        starts.push(t - window);
    }
    starts
}

/// Ten spatial crops (centre and four corners, each also flipped) of side
/// `crop` over every temporal window, resized back to the clip size.
/// `ten_crop = false` uses the single centred full-frame window.
pub fn multicrop_inference<F: Real>(
    enc: &Encoder,
    params: &ParamStore<F>,
    head: &ClassifierHead,
    clip: &VideoClip,
    crop: (usize, usize),
    ten_crop: bool,
) -> Result<MulticropScores> {
    let window = enc.config().input_shape[0];
    if !ten_crop {
        return Ok(MulticropScores {
            scores: head.probabilities(&clip_features(enc, params, clip)?),
            terms: 1,
        });
    }
    let [t, h, w, _] = clip.dims;
    let (ch, cw) = crop;
    if ch > h || cw > w || ch == 0 || cw == 0 {
        return Err(Error::invalid(format!("crop {crop:?} does not fit a {h}x{w} clip")));
    }
    let boxes = [
        ((h - ch) / 2, (w - cw) / 2),
        (0, 0),
        (0, w - cw),
        (h - ch, 0),
        (h - ch, w - cw),
    ];
    let mut views = Vec::new();
    for start in temporal_windows(t, window) {
        let base = if t <= window {
            fit_frames(clip, window)
        } else {
            clip.temporal_window(start, window)?
        };
        for &(y0, x0) in &boxes {
            let mut v = base.clone();
            resized_crop(&mut v, (y0 as f64, x0 as f64, ch as f64, cw as f64));
            let mut flipped = v.clone();
            flip_horizontal(&mut flipped);
            views.push(v);
            views.push(flipped);
        }
    }
    let probs = map_clips(views.len(), |i| Ok(head.probabilities(&clip_features(enc, params, &views[i])?)))?;
    let mut scores = vec![0.0; head.classes];
    for p in &probs {
        scores.iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    let n = probs.len() as f64;
    scores.iter_mut().for_each(|s| *s /= n);
    Ok(MulticropScores {
        scores,
        terms: probs.len(),
    })
}

/// CSV text `clip_path,class_id,viewpoint_deg,e_0..e_{d-1}`.
pub fn embeddings_csv(paths: &[String], clips: &[VideoClip], embeddings: &[Vec<f64>]) -> String {
    let d = embeddings.first().map_or(0, Vec::len);
    let mut s = String::from("clip_path,class_id,viewpoint_deg");
    for j in 0..d {
        write!(s, ",e_{j}").expect("string write");
    }
    s.push('\n');
    for ((p, c), e) in paths.iter().zip(clips).zip(embeddings) {
        write!(s, "{p},{},{}", c.class_id, c.viewpoint_deg).expect("string write");
        for v in e {
            write!(s, ",{}", *v as f32).expect("string write");
        }
        s.push('\n');
    }
    s
}

/// Writes the embedding CSV for every clip of a manifest; returns the row
/// count.
pub fn export_embeddings(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<usize> {
    let (enc, params) = load_encoder::<f32>(checkpoint)?;
    let root = dataset_root(manifest);
    let entries = read_manifest(manifest)?;
    let clips: Vec<VideoClip> = entries.iter().map(|e| load_clip(&root, e)).collect::<Result<_>>()?;
    let emb = extract_embeddings(&enc, &params, &clips)?;
    let paths: Vec<String> = entries.into_iter().map(|e| e.clip_path).collect();
    std::fs::write(out, embeddings_csv(&paths, &clips, &emb)).map_err(|e| Error::io(out, e))?;
    Ok(clips.len())
}
