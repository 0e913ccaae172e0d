//! Pinhole rendering of blob scenes with painter's-algorithm occlusion.

use super::scene::SceneSpec;
use super::{Split, VideoClip, VIEWPOINTS};
use crate::error::{Error, Result};

pub const ORBIT_RADIUS: f64 = 4.0;
pub const ORBIT_HEIGHT: f64 = 1.2;
pub const LOOK_AT: [f64; 3] = [0.0, 0.7, 0.0];
pub const FOV_DEG: f64 = 45.0;
pub const BACKGROUND: f32 = 0.12;

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Camera on a circle about the vertical axis, looking at [`LOOK_AT`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub position: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
    pub forward: [f64; 3],
    /// Focal length in pixels.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Azimuth 0 sits on `+z`; positive azimuths swing towards `+x`.
    pub fn orbit(azimuth_deg: f64, width: usize, height: usize) -> Self {
        let a = azimuth_deg.to_radians();
        let position = [ORBIT_RADIUS * a.sin(), ORBIT_HEIGHT, ORBIT_RADIUS * a.cos()];
        let forward = normalize(sub(LOOK_AT, position));
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        let focal = (width as f64 / 2.0) / (FOV_DEG.to_radians() / 2.0).tan();
        Camera {
            position,
            right,
            up,
            forward,
            focal,
            width,
            height,
        }
    }

    /// Camera-frame coordinates `(x right, y up, z depth)`.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = sub(p, self.position);
        [dot(d, self.right), dot(d, self.up), dot(d, self.forward)]
    }

    /// Continuous pixel coordinates `(u, v)` (pixel `j` spans `[j, j+1)`)
    /// and depth, or `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let [x, y, z] = self.to_camera(p);
        if z <= 1e-6 {
            return None;
        }
        let u = self.width as f64 / 2.0 + self.focal * x / z;
        let v = self.height as f64 / 2.0 - self.focal * y / z;
        Some((u, v, z))
    }
}

/// Renders `frames` frames at any azimuth.
pub fn render_at(scene: &SceneSpec, azimuth_deg: f64, frames: usize, height: usize, width: usize) -> Vec<f32> {
    let cam = Camera::orbit(azimuth_deg, width, height);
    let mut out = vec![BACKGROUND; frames * height * width * 3];
    for t in 0..frames {
        let s = if frames > 1 { t as f64 / (frames - 1) as f64 } else { 0.0 };
        let mut discs: Vec<(f64, f64, f64, f64, [f64; 3])> = scene
            .positions(s)
            .into_iter()
            .zip(&scene.blobs)
            .filter_map(|(p, b)| {
                cam.project(p)
                    .map(|(u, v, z)| (z, u, v, cam.focal * b.radius / z, b.color))
            })
            .collect();
        // far to near
        discs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let frame = &mut out[t * height * width * 3..(t + 1) * height * width * 3];
        for &(_, u, v, r, color) in &discs {
            let (y0, y1) = ((v - r - 1.0).floor().max(0.0) as usize, ((v + r + 1.0).ceil().max(0.0) as usize).min(height));
            let (x0, x1) = ((u - r - 1.0).floor().max(0.0) as usize, ((u + r + 1.0).ceil().max(0.0) as usize).min(width));
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = (x as f64 + 0.5 - u, y as f64 + 0.5 - v);
                    let d = (dx * dx + dy * dy).sqrt();
                    let cover = (r - d + 0.5).clamp(0.0, 1.0);
                    if cover == 0.0 {
                        continue;
                    }
                    let shade = 0.55 + 0.45 * (1.0 - (d / r).powi(2)).max(0.0).sqrt();
                    let px = &mut frame[(y * width + x) * 3..(y * width + x + 1) * 3];
                    for c in 0..3 {
                        let v = (color[c] * shade) as f32;
                        px[c] = px[c] + (v - px[c]) * cover as f32;
                    }
                }
            }
        }
    }
    out
}

/// Renders the scene from one of the supported azimuths.
pub fn render_view(
    scene: &SceneSpec,
    viewpoint_deg: u32,
    dims: [usize; 3],
    scene_id: u64,
    split: Split,
) -> Result<VideoClip> {
    if !VIEWPOINTS.contains(&viewpoint_deg) {
        return Err(Error::invalid(format!(
            "unsupported viewpoint {viewpoint_deg} (expected one of {VIEWPOINTS:?})"
        )));
    }
    let [t, h, w] = dims;
    Ok(VideoClip {
        dims: [t, h, w, 3],
        frames: render_at(scene, viewpoint_deg as f64, t, h, w),
        class_id: scene.class_id,
        viewpoint_deg,
        scene_id,
        split,
    })
}
