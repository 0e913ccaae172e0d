//! Procedural multi-view motion clips: scene sampling, pinhole rendering,
//! augmentation, on-disk format and the cross-view split protocol.

pub mod augment;
pub mod io;
pub mod protocol;
pub mod render;
pub mod scene;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use augment::{augment, AugmentConfig, Profile};
pub use protocol::{build_protocol, DataConfig, Protocol, SplitName};
pub use render::{render_view, Camera};
pub use scene::{generate_scene, SceneSpec, CLASS_NAMES};

/// Camera azimuths a clip can be rendered from.
pub const VIEWPOINTS: [u32; 3] = [0, 45, 90];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// A `T x H x W x C` clip with values in `[0, 1]` plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `(T, H, W, C)`
    pub dims: [usize; 4],
    pub frames: Vec<f32>,
    pub class_id: usize,
    pub viewpoint_deg: u32,
    pub scene_id: u64,
    pub split: Split,
}

impl VideoClip {
    pub fn frames_len(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        let [_, h, w, ch] = self.dims;
        ((t * h + y) * w + x) * ch + c
    }

    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.frames[self.index(t, y, x, c)]
    }

    /// Channel-first tensor `[C, T, H, W]` for the encoder.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let [t, h, w, c] = self.dims;
        let mut out = vec![F::zero(); self.frames.len()];
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        out[((ci * t + ti) * h + y) * w + x] = F::of(self.frames[self.index(ti, y, x, ci)] as f64);
                    }
                }
            }
        }
        Tensor::from_parts(vec![c, t, h, w], out)
    }

    /// Frames `start..start + len` as a new clip.
    pub fn temporal_window(&self, start: usize, len: usize) -> Result<VideoClip> {
        let [t, h, w, c] = self.dims;
        if start + len > t || len == 0 {
            return Err(Error::invalid(format!("window {start}..{} outside {t} frames", start + len)));
        }
        let fsz = h * w * c;
        Ok(VideoClip {
            dims: [len, h, w, c],
            frames: self.frames[start * fsz..(start + len) * fsz].to_vec(),
            ..self.clone()
        })
    }

    /// Centered window of `len` frames (the whole clip when shorter).
    pub fn center_window(&self, len: usize) -> VideoClip {
        let t = self.dims[0];
        if len >= t {
            return self.clone();
        }
        self.temporal_window((t - len) / 2, len).expect("in range")
    }
}
