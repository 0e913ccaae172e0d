//! Browser bindings: render a synthetic scene, draw augmented views of it and
//! re-project a frame through the geometry kernels under a user-chosen
//! rigid transform and camera.

use viewgen::dataset::augment::{augment, AugmentConfig, Profile};
use viewgen::dataset::render::{render_at, BACKGROUND};
use viewgen::dataset::scene::{generate_scene, CLASS_NAMES};
use viewgen::dataset::{Split, VideoClip};
use viewgen::geometry::{camera_matrix, project_to_2d, rigid_world_transform, rotation_from_axis_angle, CameraIntrinsics};
use viewgen::Tensor;
use wasm_bindgen::prelude::*;

pub const FRAMES: usize = 16;
pub const SIZE: usize = 32;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Comma-separated class names, in label order.
#[wasm_bindgen]
pub fn class_names() -> String {
    CLASS_NAMES.join(",")
}

#[wasm_bindgen]
pub fn frame_count() -> usize {
    FRAMES
}

#[wasm_bindgen]
pub fn frame_size() -> usize {
    SIZE
}

fn clip(class_id: usize, scene_seed: u64, azimuth_deg: f64) -> Result<VideoClip, JsError> {
    let scene = generate_scene(class_id, scene_seed, CLASS_NAMES.len()).map_err(js_err)?;
    Ok(VideoClip {
        dims: [FRAMES, SIZE, SIZE, 3],
        frames: render_at(&scene, azimuth_deg, FRAMES, SIZE, SIZE),
        class_id,
        viewpoint_deg: azimuth_deg.round() as u32,
        scene_id: scene_seed,
        split: Split::Train,
    })
}

fn frame_rgba(c: &VideoClip, t: usize) -> Vec<u8> {
    let [frames, h, w, _] = c.dims;
    let t = t.min(frames - 1);
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push((c.get(t, y, x, ch).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

/// One `SIZE x SIZE` RGBA frame of a scene seen from `azimuth_deg`.
#[wasm_bindgen]
pub fn render_frame(class_id: usize, scene_seed: u64, azimuth_deg: f64, frame: usize) -> Result<Vec<u8>, JsError> {
    Ok(frame_rgba(&clip(class_id, scene_seed, azimuth_deg)?, frame))
}

/// The same frame after the training augmentation with seed `aug_seed`.
/// `profile` is 0, 1 or 2 for the query, key and generator streams.
#[wasm_bindgen]
pub fn augmented_frame(
    class_id: usize,
    scene_seed: u64,
    azimuth_deg: f64,
    aug_seed: u64,
    profile: u8,
    frame: usize,
) -> Result<Vec<u8>, JsError> {
    let profile = match profile {
        0 => Profile::Query,
        1 => Profile::Key,
        2 => Profile::Generator,
        p => return Err(JsError::new(&format!("unknown profile {p}"))),
    };
    let c = clip(class_id, scene_seed, azimuth_deg)?;
    let cfg = AugmentConfig { out_frames: None, ..AugmentConfig::default() };
    Ok(frame_rgba(&augment(&c, aug_seed, profile, &cfg), frame))
}

/// Lifts a frame to 3D (pixel `(i, j)` at depth `depth`, foreground pixels
/// pulled forward by `relief`), turns the points by `rot` about the plane
/// centre, shifts them by `shift` and projects them back through a camera
/// whose own rotation is `cam_rot`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn reproject_frame(
    class_id: usize,
    scene_seed: u64,
    frame: usize,
    rot: &[f64],
    shift: &[f64],
    cam_rot: &[f64],
    depth: f64,
    relief: f64,
) -> Result<Vec<u8>, JsError> {
    let [rot, shift, cam_rot] = [rot, shift, cam_rot].map(|v| <[f64; 3]>::try_from(v).map_err(|_| JsError::new("expected 3 values")));
    let (rot, shift, cam_rot) = (rot?, shift?, cam_rot?);
    if depth <= 0.0 {
        return Err(JsError::new("depth must be positive"));
    }
    let c = clip(class_id, scene_seed, 0.0)?;
    let t = frame.min(FRAMES - 1);
    let n = SIZE;
    let hw = n * n;
    let centre = (n as f64 - 1.0) / 2.0;

    // augmented slice: 3 colour channels followed by 3 coordinate channels
    let mut slice = vec![0.0; 6 * hw];
    for i in 0..n {
        for j in 0..n {
            let idx = i * n + j;
            let mut fg = 0.0;
            for ch in 0..3 {
                let v = c.get(t, i, j, ch) as f64;
                slice[ch * hw + idx] = v;
                fg += (v - BACKGROUND as f64).abs();
            }
            let z = if fg > 0.05 { depth - relief } else { depth };
            slice[3 * hw + idx] = i as f64 - centre;
            slice[4 * hw + idx] = j as f64 - centre;
            slice[5 * hw + idx] = z - depth;
        }
    }
    let points = Tensor::new(&[3, n, n], slice[3 * hw..].to_vec()).map_err(js_err)?;
    // turn about the plane centre, then push the plane back out to `depth`
    let r = rotation_from_axis_angle(rot);
    let turned = rigid_world_transform(&points, &r, [0.0; 3]).map_err(js_err)?;
    let moved = rigid_world_transform(&turned, &rotation_from_axis_angle([0.0; 3]), [shift[0], shift[1], shift[2] + depth])
        .map_err(js_err)?;
    let cam = CameraIntrinsics { rot_axis_angle: cam_rot, s_x: depth, s_y: depth, x_0: centre, y_0: centre };
    let k = camera_matrix(&cam);
    let aug = Tensor::new(&[6, n, n], slice).map_err(js_err)?;
    let img = project_to_2d(&aug, &moved, &k, (n, n)).map_err(js_err)?;

    let d = img.data();
    let mut out = Vec::with_capacity(hw * 4);
    for idx in 0..hw {
        for ch in 0..3 {
            out.push((d[ch * hw + idx].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    Ok(out)
}
