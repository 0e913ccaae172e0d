//! Run configuration: flat `key = value` lines under `[data]`, `[encoder]`,
//! `[train]` and `[eval]` headers. `#` and `;` start comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::DataConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::ProbeConfig;
use crate::losses::MixMode;
use crate::trainer::TrainConfig;

pub const SECTIONS: [&str; 4] = ["data", "encoder", "train", "eval"];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub finetune_epochs: usize,
    /// Ten-crop inference at test time.
    pub multicrop: bool,
    /// Side of the square crops used by ten-crop inference.
    pub crop_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            probe: ProbeConfig::default(),
            finetune_epochs: 30,
            multicrop: false,
            crop_size: 28,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as {}", std::any::type_name::<T>()))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|s| num(s.trim())).collect()
}

/// `2x2x2,1x1x1` style triples.
fn triples(v: &str) -> std::result::Result<Vec<[usize; 3]>, String> {
    v.split(',')
        .map(|t| {
            let parts: Vec<usize> = t.trim().split('x').map(num).collect::<std::result::Result<_, _>>()?;
            <[usize; 3]>::try_from(parts).map_err(|_| format!("expected TxHxW, got {t:?}"))
        })
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn join_triples(v: &[[usize; 3]]) -> String {
    v.iter().map(|[a, b, c]| format!("{a}x{b}x{c}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one `section.key`. Errors are plain messages; callers add
    /// location context.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let v = v.trim();
        match section {
            "data" => {
                let d = &mut self.data;
                match key {
                    "num_classes" => d.num_classes = num(v)?,
                    "train_scenes_per_class" => d.train_scenes_per_class = num(v)?,
                    "test_scenes_per_class" => d.test_scenes_per_class = num(v)?,
                    "frames" => d.frames = num(v)?,
                    "height" => d.height = num(v)?,
                    "width" => d.width = num(v)?,
                    "seed" => d.seed = num(v)?,
                    _ => return Err(format!("unknown key data.{key}")),
                }
            }
            "encoder" => {
                let e = &mut self.encoder;
                match key {
                    "num_blocks" => e.num_blocks = num(v)?,
                    "split_index" => e.split_index = num(v)?,
                    "channels_per_block" => e.channels_per_block = list(v)?,
                    "conv_strides" => e.conv_strides = triples(v)?,
                    "pool_kernels" => e.pool_kernels = triples(v)?,
                    "kernel_size" => e.kernel_size = num(v)?,
                    "norm_groups" => e.norm_groups = num(v)?,
                    "head_hidden" => e.head_hidden = num(v)?,
                    "embedding_dim" => e.embedding_dim = num(v)?,
                    "input_shape" => {
                        let p: Vec<usize> = v.split('x').map(num).collect::<std::result::Result<_, _>>()?;
                        e.input_shape = <[usize; 4]>::try_from(p).map_err(|_| format!("expected TxHxWxC, got {v:?}"))?;
                    }
                    _ => return Err(format!("unknown key encoder.{key}")),
                }
            }
            "train" => {
                let t = &mut self.train;
                match key {
                    "tau" => t.tau = num(v)?,
                    "momentum" => t.momentum = num(v)?,
                    "queue_capacity" => t.queue_capacity = num(v)?,
                    "alpha" => t.alpha = num(v)?,
                    "learning_rate" => t.learning_rate = num(v)?,
                    "weight_decay" => t.weight_decay = num(v)?,
                    "stage1_epochs" => t.stage1_epochs = num(v)?,
                    "stage2_epochs" => t.stage2_epochs = num(v)?,
                    "batch_size" => t.batch_size = num(v)?,
                    "loss_weights" => {
                        let w: Vec<f64> = list(v)?;
                        let w = <[f64; 4]>::try_from(w).map_err(|_| "loss_weights needs 4 numbers".to_string())?;
                        t.loss_weights = crate::losses::LossWeights::from_array(w);
                    }
                    "mix_mode" => t.mix_mode = v.parse::<MixMode>().map_err(|e| e.to_string())?,
                    "grl_scale" => t.grl_scale = num(v)?,
                    "seed" => t.seed = num(v)?,
                    _ => return Err(format!("unknown key train.{key}")),
                }
            }
            "eval" => {
                let e = &mut self.eval;
                match key {
                    "epochs" => e.probe.epochs = num(v)?,
                    "learning_rate" => e.probe.learning_rate = num(v)?,
                    "weight_decay" => e.probe.weight_decay = num(v)?,
                    "batch_size" => e.probe.batch_size = num(v)?,
                    "seed" => e.probe.seed = num(v)?,
                    "finetune_epochs" => e.finetune_epochs = num(v)?,
                    "multicrop" => e.multicrop = flag(v)?,
                    "crop_size" => e.crop_size = num(v)?,
                    _ => return Err(format!("unknown key eval.{key}")),
                }
            }
            _ => return Err(format!("unknown section [{section}]")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| Error::Config { line: line_no, msg };
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("malformed section header {line:?}")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let sec = section.as_deref().ok_or_else(|| err("key outside of any section".into()))?;
            cfg.set(sec, k.trim(), v).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { line, msg } => Error::Config {
                line,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override {spec:?} must look like section.key=value")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| Error::invalid(format!("override {spec:?} must name section.key")))?;
        self.set(section, key, value)
            .map_err(|m| Error::invalid(format!("--{path}: {m}")))
    }

    /// Sets every seed (data, training, evaluation).
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.eval.probe.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        let [t, h, w, c] = self.encoder.input_shape;
        if t > self.data.frames || h != self.data.height || w != self.data.width || c != 3 {
            return Err(Error::invalid(format!(
                "encoder.input_shape {t}x{h}x{w}x{c} does not fit clips of {}x{}x{}x3 (data.frames, data.height, data.width)",
                self.data.frames, self.data.height, self.data.width
            )));
        }
        Ok(())
    }

    /// Text form that [`RunConfig::parse`] reads back to an equal value.
    pub fn to_ini(&self) -> String {
        let d = &self.data;
        let e = &self.encoder;
        let t = &self.train;
        let v = &self.eval;
        let mut s = String::new();
        let mut put = |k: &str, val: String| writeln!(s, "{k} = {val}").expect("string write");
        put("[data]\nnum_classes", d.num_classes.to_string());
        put("train_scenes_per_class", d.train_scenes_per_class.to_string());
        put("test_scenes_per_class", d.test_scenes_per_class.to_string());
        put("frames", d.frames.to_string());
        put("height", d.height.to_string());
        put("width", d.width.to_string());
        put("seed", d.seed.to_string());
        put("\n[encoder]\nnum_blocks", e.num_blocks.to_string());
        put("split_index", e.split_index.to_string());
        put("channels_per_block", join(&e.channels_per_block));
        put("conv_strides", join_triples(&e.conv_strides));
        put("pool_kernels", join_triples(&e.pool_kernels));
        put("kernel_size", e.kernel_size.to_string());
        put("norm_groups", e.norm_groups.to_string());
        put("head_hidden", e.head_hidden.to_string());
        put("embedding_dim", e.embedding_dim.to_string());
        let [it, ih, iw, ic] = e.input_shape;
        put("input_shape", format!("{it}x{ih}x{iw}x{ic}"));
        put("\n[train]\ntau", t.tau.to_string());
        put("momentum", t.momentum.to_string());
        put("queue_capacity", t.queue_capacity.to_string());
        put("alpha", t.alpha.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("stage1_epochs", t.stage1_epochs.to_string());
        put("stage2_epochs", t.stage2_epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("loss_weights", join(&t.loss_weights.as_array()));
        put("mix_mode", t.mix_mode.to_string());
        put("grl_scale", t.grl_scale.to_string());
        put("seed", t.seed.to_string());
        put("\n[eval]\nepochs", v.probe.epochs.to_string());
        put("learning_rate", v.probe.learning_rate.to_string());
        put("weight_decay", v.probe.weight_decay.to_string());
        put("batch_size", v.probe.batch_size.to_string());
        put("seed", v.probe.seed.to_string());
        put("finetune_epochs", v.finetune_epochs.to_string());
        put("multicrop", v.multicrop.to_string());
        put("crop_size", v.crop_size.to_string());
        s
    }
}
