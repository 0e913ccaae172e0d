//! Clip-consistent stochastic augmentation: resized crop, horizontal flip,
//! Gaussian blur, color jitter and a temporal crop.

use rand::Rng;

use super::VideoClip;
use crate::seeding;

/// Which of the three independent augmentation streams a draw belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Query view.
    Query,
    /// Momentum-key view.
    Key,
    /// Generator-branch view.
    Generator,
}

impl Profile {
    fn tag(self) -> u64 {
        match self {
            Profile::Query => 1,
            Profile::Key => 2,
            Profile::Generator => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Area fraction range of the random crop.
    pub crop_scale: (f64, f64),
    pub crop_aspect: (f64, f64),
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    /// Brightness, contrast and saturation factors drawn in `1 +- jitter`.
    pub jitter: f64,
    /// Output frame count; `None` keeps every frame.
    pub out_frames: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: (0.6, 1.0),
            crop_aspect: (0.75, 4.0 / 3.0),
            flip_prob: 0.5,
            blur_prob: 0.5,
            blur_sigma: (0.1, 1.0),
            jitter: 0.3,
            out_frames: Some(16),
        }
    }
}

impl AugmentConfig {
    /// Every operation disabled.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_scale: (1.0, 1.0),
            crop_aspect: (1.0, 1.0),
            flip_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.1, 1.0),
            jitter: 0.0,
            out_frames: None,
        }
    }
}

/// Deterministic augmentation of `clip` keyed by `(seed, profile)`.
pub fn augment(clip: &VideoClip, seed: u64, profile: Profile, cfg: &AugmentConfig) -> VideoClip {
    let mut rng = seeding::rng(&[seed, profile.tag()]);
    let [t, h, w, c] = clip.dims;

    let len = cfg.out_frames.map_or(t, |n| n.min(t));
    let start = if len < t { rng.gen_range(0..=t - len) } else { 0 };
    let mut out = if len < t {
        clip.temporal_window(start, len).expect("in range")
    } else {
        clip.clone()
    };

    // crop box in source pixels
    let area = (h * w) as f64;
    let mut crop = (0.0, 0.0, h as f64, w as f64);
    if cfg.crop_scale.0 < 1.0 || cfg.crop_aspect != (1.0, 1.0) {
        let scale = rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let (la, lb) = (cfg.crop_aspect.0.ln(), cfg.crop_aspect.1.ln());
        let aspect = rng.gen_range(la..=lb).exp();
        let cw = (area * scale * aspect).sqrt().min(w as f64);
        let ch = (area * scale / aspect).sqrt().min(h as f64);
        let y0 = rng.gen_range(0.0..=(h as f64 - ch));
        let x0 = rng.gen_range(0.0..=(w as f64 - cw));
        crop = (y0, x0, ch, cw);
    }
    let flip = rng.gen_bool(cfg.flip_prob);
    let blur = rng.gen_bool(cfg.blur_prob);
    let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
    let j = cfg.jitter;
    let (bright, contrast, sat) = if j > 0.0 {
        (
            rng.gen_range(1.0 - j..=1.0 + j),
            rng.gen_range(1.0 - j..=1.0 + j),
            rng.gen_range(1.0 - j..=1.0 + j),
        )
    } else {
        (1.0, 1.0, 1.0)
    };

    if crop != (0.0, 0.0, h as f64, w as f64) {
        resized_crop(&mut out, crop);
    }
    if flip {
        flip_horizontal(&mut out);
    }
    if blur {
        gaussian_blur(&mut out, sigma);
    }
    if j > 0.0 && c == 3 {
        color_jitter(&mut out, bright as f32, contrast as f32, sat as f32);
    }
    out
}

/// Source indices and weight of the upper neighbour for `n` output samples
/// spread over `[start, start + len)` of an axis with `size` pixels.
fn axis_taps(start: f64, len: f64, n: usize, size: usize) -> Vec<(usize, usize, f32)> {
    (0..n)
        .map(|o| {
            // output pixel centre mapped into the crop box (pixel centres at +0.5)
            let s = (start + (o as f64 + 0.5) * len / n as f64 - 0.5).clamp(0.0, (size - 1) as f64);
            let i = s.floor() as usize;
            (i, (i + 1).min(size - 1), (s - i as f64) as f32)
        })
        .collect()
}

/// Bilinear resample of the box `(y0, x0, h, w)` back to full size.
pub(crate) fn resized_crop(clip: &mut VideoClip, (y0, x0, ch, cw): (f64, f64, f64, f64)) {
    let [t, h, w, c] = clip.dims;
    let src = clip.frames.clone();
    let ys = axis_taps(y0, ch, h, h);
    let xs = axis_taps(x0, cw, w, w);
    for f in 0..t {
        let frame = &src[f * h * w * c..(f + 1) * h * w * c];
        let out = &mut clip.frames[f * h * w * c..(f + 1) * h * w * c];
        for (y, &(iy, jy, fy)) in ys.iter().enumerate() {
            for (x, &(ix, jx, fx)) in xs.iter().enumerate() {
                for ci in 0..c {
                    let at = |yy: usize, xx: usize| frame[(yy * w + xx) * c + ci];
                    let top = at(iy, ix) * (1.0 - fx) + at(iy, jx) * fx;
                    let bot = at(jy, ix) * (1.0 - fx) + at(jy, jx) * fx;
                    out[(y * w + x) * c + ci] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
}

pub fn flip_horizontal(clip: &mut VideoClip) {
    let [t, h, w, c] = clip.dims;
    for f in 0..t {
        for y in 0..h {
            let row = &mut clip.frames[((f * h + y) * w) * c..((f * h + y + 1) * w) * c];
            for x in 0..w / 2 {
                for ci in 0..c {
                    row.swap(x * c + ci, (w - 1 - x) * c + ci);
                }
            }
        }
    }
}

fn gaussian_blur(clip: &mut VideoClip, sigma: f64) {
    let [t, h, w, c] = clip.dims;
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = {
        let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.iter().map(|v| (v / s) as f32).collect()
    };
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; clip.frames.len()];
    let fsz = h * w * c;
    for f in 0..t {
        let src = &clip.frames[f * fsz..(f + 1) * fsz];
        let dst = &mut tmp[f * fsz..(f + 1) * fsz];
        for (k, &wt) in kernel.iter().enumerate() {
            for x in 0..w {
                let xx = clampi(x as isize + k as isize - r, w);
                for y in 0..h {
                    let (o, i) = ((y * w + x) * c, (y * w + xx) * c);
                    dst[o..o + c].iter_mut().zip(&src[i..i + c]).for_each(|(d, s)| *d += wt * s);
                }
            }
        }
    }
    clip.frames.iter_mut().for_each(|v| *v = 0.0);
    for f in 0..t {
        let src = &tmp[f * fsz..(f + 1) * fsz];
        let dst = &mut clip.frames[f * fsz..(f + 1) * fsz];
        for (k, &wt) in kernel.iter().enumerate() {
            for y in 0..h {
                let yy = clampi(y as isize + k as isize - r, h);
                let (o, i) = (y * w * c, yy * w * c);
                dst[o..o + w * c].iter_mut().zip(&src[i..i + w * c]).for_each(|(d, s)| *d += wt * s);
            }
        }
    }
}

fn color_jitter(clip: &mut VideoClip, bright: f32, contrast: f32, sat: f32) {
    let n = clip.frames.len() / 3;
    for px in clip.frames.chunks_mut(3) {
        for v in px.iter_mut() {
            *v = (*v * bright).clamp(0.0, 1.0);
        }
    }
    let mean = clip.frames.iter().sum::<f32>() / (3 * n) as f32;
    for px in clip.frames.chunks_mut(3) {
        for v in px.iter_mut() {
            *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
        }
        let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            *v = ((*v - gray) * sat + gray).clamp(0.0, 1.0);
        }
    }
}
