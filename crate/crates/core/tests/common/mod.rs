//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grad_suite;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use viewgen::geometry::{camera_matrix, CameraIntrinsics, GridExtents, Mat3};
use viewgen::Tensor;

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Default)]
pub struct Acc {
    sum: f64,
    comp: f64,
}

impl Acc {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(self) -> f64 {
        self.sum + self.comp
    }
}

pub fn tent(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Every grid cell against every pixel: `[c, d, rows, cols]` flattened.
/// `points` is `[3, m, n]`: component 0 rows, 1 cols, 2 depth.
pub fn dense_splat(slice: &[f64], c: usize, m: usize, n: usize, points: &[f64], ext: (usize, usize, usize)) -> Vec<f64> {
    let (d, rows, cols) = ext;
    let hw = m * n;
    let mut out = vec![0.0; c * d * rows * cols];
    for ch in 0..c {
        for z in 0..d {
            for x in 0..rows {
                for y in 0..cols {
                    let mut acc = Acc::default();
                    for idx in 0..hw {
                        let w = tent(x as f64 - points[idx]) * tent(y as f64 - points[hw + idx]) * tent(z as f64 - points[2 * hw + idx]);
                        acc.add(w * slice[ch * hw + idx]);
                    }
                    out[((ch * d + z) * rows + x) * cols + y] = acc.value();
                }
            }
        }
    }
    out
}

/// Every output pixel against every source point, with perspective division
/// and the `|w| >= eps` guard. `slice` has `c + 3` channels.
pub fn dense_project(
    slice: &[f64],
    c: usize,
    m: usize,
    n: usize,
    points: &[f64],
    k: &[[f64; 3]; 3],
    out: (usize, usize),
    eps: f64,
) -> Vec<f64> {
    let hw = m * n;
    let (rows, cols) = out;
    let proj: Vec<Option<(f64, f64)>> = (0..hw)
        .map(|idx| {
            let p = [points[idx], points[hw + idx], points[2 * hw + idx]];
            let h: Vec<f64> = (0..3).map(|a| (0..3).map(|b| k[a][b] * p[b]).sum()).collect();
            (h[2].abs() >= eps).then(|| (h[0] / h[2], h[1] / h[2]))
        })
        .collect();
    let mut res = vec![0.0; c * rows * cols];
    for ch in 0..c {
        for r in 0..rows {
            for q in 0..cols {
                let mut acc = Acc::default();
                for (idx, pr) in proj.iter().enumerate() {
                    if let Some((x, y)) = pr {
                        acc.add(tent(r as f64 - x) * tent(q as f64 - y) * slice[ch * hw + idx]);
                    }
                }
                res[(ch * rows + r) * cols + q] = acc.value();
            }
        }
    }
    res
}

pub fn skew(v: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

pub fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = Acc::default();
            for k in 0..3 {
                acc.add(a[i][k] * b[k][j]);
            }
            c[i][j] = acc.value();
        }
    }
    c
}

/// `exp(skew(v))` by the power series, compensated summation.
pub fn expm_series(v: [f64; 3]) -> [[f64; 3]; 3] {
    let s = skew(v);
    let mut term = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut acc = [[Acc::default(); 3]; 3];
    for k in 1..=60 {
        for i in 0..3 {
            for j in 0..3 {
                acc[i][j].add(term[i][j]);
            }
        }
        term = mat_mul(&term, &s);
        for row in term.iter_mut() {
            for x in row.iter_mut() {
                *x /= k as f64;
            }
        }
    }
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = acc[i][j].value();
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Plain FIFO ring buffer used as the queue reference.
pub struct RefRing {
    pub capacity: usize,
    pub slots: Vec<Option<(Vec<f64>, Vec<f64>, u64)>>,
    pub next: usize,
}

impl RefRing {
    pub fn new(capacity: usize) -> Self {
        RefRing {
            capacity,
            slots: vec![None; capacity],
            next: 0,
        }
    }

    pub fn push(&mut self, key: Vec<f64>, code: Vec<f64>, source: u64) {
        self.slots[self.next] = Some((key, code, source));
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

pub fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Exhaustive scalar arg-min of L2 distance, skipping `exclude`; lowest index
/// wins ties.
pub fn scan_argmin(keys: &[Vec<f64>], sources: &[u64], query: &[f64], exclude: u64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, k) in keys.iter().enumerate() {
        if sources[i] == exclude {
            continue;
        }
        let d: f64 = k.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.map_or(true, |(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Exhaustive scalar arg-max of the inner product, skipping `exclude`.
pub fn scan_argmax_dot(keys: &[Vec<f64>], sources: &[u64], query: &[f64], exclude: u64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, k) in keys.iter().enumerate() {
        if sources[i] == exclude {
            continue;
        }
        let d: f64 = k.iter().zip(query).map(|(a, b)| a * b).sum();
        if best.map_or(true, |(_, b)| d > b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Random `[c, m, n]` slice and points for the splat oracle; `margin` lets
/// points fall that far outside the grid.
pub fn random_splat_case(r: &mut ChaCha8Rng, margin: f64) -> (Tensor<f64>, Tensor<f64>, GridExtents, usize) {
    let m = r.gen_range(6..=12);
    let n = r.gen_range(6..=12);
    let c = r.gen_range(1..=4);
    let ext = GridExtents::new(r.gen_range(2..=6), r.gen_range(6..=12), r.gen_range(6..=12)).unwrap();
    let slice = Tensor::new(&[c, m, n], uniform(r, c * m * n, -2.0, 2.0)).unwrap();
    let mut p = Vec::with_capacity(3 * m * n);
    for k in 0..3 {
        let hi = ext.axis(k) as f64 - 1.0;
        p.extend(uniform(r, m * n, -margin, hi + margin));
    }
    (slice, Tensor::new(&[3, m, n], p).unwrap(), ext, c)
}

/// Random augmented `[c + 3, m, n]` slice, points in front of the camera and
/// a camera matrix near identity.
pub fn random_projection_case(r: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Mat3<f64>, usize) {
    let m = r.gen_range(6..=12);
    let n = r.gen_range(6..=12);
    let c = r.gen_range(1..=3);
    let slice = Tensor::new(&[c + 3, m, n], uniform(r, (c + 3) * m * n, -2.0, 2.0)).unwrap();
    let mut p = uniform(r, 2 * m * n, -1.0, m.max(n) as f64);
    p.extend(uniform(r, m * n, 0.3, 3.0));
    let pts = Tensor::new(&[3, m, n], p).unwrap();
    let intr = CameraIntrinsics {
        rot_axis_angle: [r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3)],
        s_x: r.gen_range(0.5..2.0),
        s_y: r.gen_range(0.5..2.0),
        x_0: r.gen_range(-1.0..3.0),
        y_0: r.gen_range(-1.0..3.0),
    };
    (slice, pts, camera_matrix(&intr), c)
}
