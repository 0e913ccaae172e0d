//! Parametric blob scenes. World frame: `y` up, ground at `y = 0`; the
//! camera orbits the vertical axis.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 5] = ["translate_x", "circle", "vertical_oscillate", "approach", "two_object_swap"];

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    /// Rest position.
    pub center: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
}

/// Per-class trajectory family with per-scene jitter.
#[derive(Clone, Debug, PartialEq)]
pub enum Motion {
    /// All blobs slide along world `x` by `amplitude * (2s - 1) * direction`.
    TranslateX { amplitude: f64, direction: f64 },
    /// All blobs circle in the horizontal plane.
    Circle { radius: f64, phase: f64, direction: f64 },
    /// All blobs bob along `y`.
    VerticalOscillate { amplitude: f64, cycles: f64, phase: f64 },
    /// All blobs close in on their common centroid; the spread shrinks from
    /// `1 + amount` to `1 - amount` times the rest layout.
    Approach { amount: f64 },
    /// Blobs 0 and 1 exchange `x` positions; the rest stay put.
    TwoObjectSwap { half_gap: f64 },
    /// No motion (test scenes only).
    Static,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub class_id: usize,
    pub seed: u64,
    pub blobs: Vec<Blob>,
    pub motion: Motion,
}

impl SceneSpec {
    /// Blob centers at normalised time `s` in `[0, 1]`.
    pub fn positions(&self, s: f64) -> Vec<[f64; 3]> {
        use std::f64::consts::TAU;
        let n = self.blobs.len().max(1) as f64;
        let centroid = self.blobs.iter().fold([0.0; 3], |acc, b| {
            [acc[0] + b.center[0] / n, acc[1] + b.center[1] / n, acc[2] + b.center[2] / n]
        });
        self.blobs
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let [x, y, z] = b.center;
                match self.motion {
                    Motion::TranslateX { amplitude, direction } => [x + direction * amplitude * (2.0 * s - 1.0), y, z],
                    Motion::Circle { radius, phase, direction } => {
                        let a = direction * TAU * s + phase;
                        [x + radius * a.cos(), y, z + radius * a.sin()]
                    }
                    Motion::VerticalOscillate { amplitude, cycles, phase } => {
                        [x, y + amplitude * (TAU * cycles * s + phase).sin(), z]
                    }
                    Motion::Approach { amount } => {
                        let k = 1.0 + amount * (1.0 - 2.0 * s);
                        [
                            centroid[0] + k * (x - centroid[0]),
                            centroid[1] + k * (y - centroid[1]),
                            centroid[2] + k * (z - centroid[2]),
                        ]
                    }
                    Motion::TwoObjectSwap { half_gap } => match i {
                        0 => [x - half_gap + 2.0 * half_gap * s, y, z],
                        1 => [x + half_gap - 2.0 * half_gap * s, y, z],
                        _ => [x, y, z],
                    },
                    Motion::Static => [x, y, z],
                }
            })
            .collect()
    }

    /// One centered blob that never moves.
    pub fn single_static(radius: f64, color: [f64; 3], height: f64) -> Self {
        SceneSpec {
            class_id: 0,
            seed: 0,
            blobs: vec![Blob {
                center: [0.0, height, 0.0],
                radius,
                color,
            }],
            motion: Motion::Static,
        }
    }
}

pub fn generate_scene(class_id: usize, seed: u64, num_classes: usize) -> Result<SceneSpec> {
    if num_classes == 0 || num_classes > CLASS_NAMES.len() {
        return Err(Error::invalid(format!(
            "data.num_classes must be in 1..={}, got {num_classes}",
            CLASS_NAMES.len()
        )));
    }
    if class_id >= num_classes {
        return Err(Error::invalid(format!("class id {class_id} out of range 0..{num_classes}")));
    }
    let mut rng = crate::seeding::rng(&[0x5CE7E, class_id as u64, seed]);
    let n = rng.gen_range(3..=5);
    let mut blobs: Vec<Blob> = (0..n)
        .map(|_| Blob {
            center: [rng.gen_range(-0.5..0.5), rng.gen_range(0.35..1.1), rng.gen_range(-0.5..0.5)],
            radius: rng.gen_range(0.14..0.26),
            color: [rng.gen_range(0.25..1.0), rng.gen_range(0.25..1.0), rng.gen_range(0.25..1.0)],
        })
        .collect();
    let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let motion = match class_id {
        0 => Motion::TranslateX {
            amplitude: rng.gen_range(0.6..0.9),
            direction: sign(&mut rng),
        },
        1 => Motion::Circle {
            radius: rng.gen_range(0.45..0.7),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            direction: sign(&mut rng),
        },
        2 => Motion::VerticalOscillate {
            amplitude: rng.gen_range(0.3..0.45),
            cycles: rng.gen_range(1.0..1.5),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        },
        3 => Motion::Approach {
            amount: rng.gen_range(0.45..0.65),
        },
        _ => {
            // the two swapping blobs sit side by side at similar depth
            let gap = rng.gen_range(0.45..0.7);
            let (y, z) = (rng.gen_range(0.45..0.9), rng.gen_range(-0.2..0.2));
            blobs[0].center = [0.0, y, z - 0.15];
            blobs[1].center = [0.0, y, z + 0.15];
            Motion::TwoObjectSwap { half_gap: gap }
        }
    };
    Ok(SceneSpec {
        class_id,
        seed,
        blobs,
        motion,
    })
}
