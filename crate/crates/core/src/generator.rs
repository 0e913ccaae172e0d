//! Viewpoint generator: lifts each temporal slice of an intermediate feature
//! map to 3D points, moves them with a per-slice rigid transform, splats them
//! into a world grid and re-projects through one learned camera per video.
//! A linear autoencoder compresses the temporally pooled world grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Var};
use crate::error::{Error, Result};
use crate::geometry::GridExtents;
use crate::nn::{Bound, Conv3d, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Logit clamp for the positional prior, keeps edge targets finite.
const PRIOR_CLAMP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// `c`: channels of the incoming feature map.
    pub channels: usize,
    /// `(m, n)`: spatial size of the incoming feature map.
    pub rows: usize,
    pub cols: usize,
    /// `d_z`
    pub depth: usize,
    /// `(m_w, n_w)`
    pub world_rows: usize,
    pub world_cols: usize,
    pub coord_hidden: usize,
    pub head_hidden: usize,
    /// `d_low`
    pub code_dim: usize,
}

impl GeneratorConfig {
    /// Sized for a feature map of shape `[c, t, m, n]`.
    pub fn for_features(c: usize, m: usize, n: usize) -> Self {
        GeneratorConfig {
            channels: c,
            rows: m,
            cols: n,
            depth: 8,
            world_rows: m,
            world_cols: n,
            coord_hidden: 16,
            head_hidden: 32,
            code_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.coord_hidden == 0 || self.head_hidden == 0 || self.code_dim == 0 {
            return Err(Error::invalid("generator widths must be positive"));
        }
        for (name, v) in [
            ("rows", self.rows),
            ("cols", self.cols),
            ("depth", self.depth),
            ("world_rows", self.world_rows),
            ("world_cols", self.world_cols),
        ] {
            if v < 2 {
                return Err(Error::invalid(format!("generator {name} must be at least 2, got {v}")));
            }
        }
        Ok(())
    }

    pub fn extents(&self) -> GridExtents {
        GridExtents {
            depth: self.depth,
            rows: self.world_rows,
            cols: self.world_cols,
        }
    }

    /// Flattened size of a pooled world slice, `(c + 3) * m_w * n_w`.
    pub fn world_dim(&self) -> usize {
        (self.channels + 3) * self.world_rows * self.world_cols
    }

    /// Logits placing pixel `(i, j)` at world point `(i, j, 1)` rescaled to
    /// the world extents.
    fn positional_prior<F: Real>(&self) -> Tensor<F> {
        let (m, n) = (self.rows, self.cols);
        let ext = self.extents();
        let logit = |frac: f64| {
            let f = frac.clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP);
            (f / (1.0 - f)).ln()
        };
        let mut data = Vec::with_capacity(3 * m * n);
        for k in 0..3 {
            for i in 0..m {
                for j in 0..n {
                    let frac = match k {
                        0 => i as f64 / (m - 1) as f64,
                        1 => j as f64 / (n - 1) as f64,
                        _ => 1.0 / (ext.depth - 1) as f64,
                    };
                    data.push(F::of(logit(frac)));
                }
            }
        }
        Tensor::from_parts(vec![3, m, n], data)
    }
}

#[derive(Clone, Copy, Debug)]
struct CoordHead {
    conv1: Conv3d,
    conv2: Conv3d,
    prior: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Mlp2 {
    hidden: Linear,
    out: Linear,
}

impl Mlp2 {
    fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        self.out.forward(p, self.hidden.forward(p, x).relu())
    }
}

/// Per-slice rigid transform as raw head outputs.
#[derive(Clone, Copy)]
pub struct SliceTransform<'t, F> {
    pub axis_angle: Var<'t, F>,
    pub translation: Var<'t, F>,
}

pub struct Generated<'t, F> {
    /// Same shape as the input feature map, `[c, t, m, n]`.
    pub projected: Var<'t, F>,
    /// Depth-reduced world grids, `[c + 3, t, m_w, n_w]`.
    pub world: Var<'t, F>,
    /// Packed camera intrinsics `[7]` shared by every slice.
    pub camera: Var<'t, F>,
    pub transforms: Vec<SliceTransform<'t, F>>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    coord: CoordHead,
    transform: Mlp2,
    camera: Mlp2,
    down: Linear,
    up: Linear,
}

impl Generator {
    pub fn new<F: Real>(cfg: GeneratorConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let g = ConvGeometry::same([1, 3, 3], [1, 1, 1]);
        let coord = CoordHead {
            conv1: Conv3d::new(&mut s, "coord.conv1", cfg.channels, cfg.coord_hidden, g, &mut rng),
            conv2: Conv3d::new(&mut s, "coord.conv2", cfg.coord_hidden, 3, g, &mut rng),
            prior: s.add("coord.prior", cfg.positional_prior()),
        };
        // start exactly at the positional prior
        let w2 = coord.conv2.weight;
        *s.get_mut(w2) = Tensor::zeros(s.get(w2).shape());
        let transform = Mlp2 {
            hidden: Linear::new(&mut s, "transform.0", cfg.channels, cfg.head_hidden, &mut rng),
            out: Linear::zeros(&mut s, "transform.1", cfg.head_hidden, 6),
        };
        let camera = Mlp2 {
            hidden: Linear::new(&mut s, "camera.0", cfg.channels, cfg.head_hidden, &mut rng),
            out: Linear::zeros(&mut s, "camera.1", cfg.head_hidden, 7),
        };
        let d = cfg.world_dim();
        let down = Linear::new(&mut s, "autoencoder.down", d, cfg.code_dim, &mut rng);
        let up = Linear::new(&mut s, "autoencoder.up", cfg.code_dim, d, &mut rng);
        // He init is for ReLU stacks; this pair is linear
        for id in [down.weight, up.weight] {
            let scaled = s.get(id).scale(F::of(0.5f64.sqrt()));
            *s.get_mut(id) = scaled;
        }
        Ok((
            Generator {
                cfg,
                coord,
                transform,
                camera,
                down,
                up,
            },
            s,
        ))
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Names of the coordinate head's output-side parameters (conv2 and the
    /// positional logits); zeroing them yields mid-grid coordinates.
    pub fn coord_output_params(&self) -> [ParamId; 3] {
        [self.coord.conv2.weight, self.coord.conv2.bias, self.coord.prior]
    }

    fn check_slice<F: Real>(&self, slice: Var<'_, F>) -> Result<()> {
        let want = [self.cfg.channels, self.cfg.rows, self.cfg.cols];
        if slice.shape() != want {
            return Err(Error::shape(format!("generator slice {:?}, expected {want:?}", slice.shape())));
        }
        Ok(())
    }

    /// `[c, m, n] -> [3, m, n]` points, component `k` within
    /// `[0, extent_k - 1]`.
    pub fn estimate_coords<'t, F: Real>(&self, p: &Bound<'t, F>, slice: Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_slice(slice)?;
        let (c, m, n) = (self.cfg.channels, self.cfg.rows, self.cfg.cols);
        let x = slice.reshape(&[c, 1, m, n]);
        let h = self.coord.conv1.forward(p, x).relu();
        let raw = self.coord.conv2.forward(p, h).reshape(&[3, m, n]);
        let squashed = raw.add(p.var(self.coord.prior)).sigmoid();
        let ext = self.cfg.extents();
        let mut scale = Vec::with_capacity(3 * m * n);
        for k in 0..3 {
            scale.extend(std::iter::repeat(F::of((ext.axis(k) - 1) as f64)).take(m * n));
        }
        let scale = slice.tape().constant(Tensor::from_parts(vec![3, m, n], scale));
        Ok(squashed.mul(scale))
    }

    pub fn estimate_transforms<'t, F: Real>(&self, p: &Bound<'t, F>, slice: Var<'t, F>) -> Result<SliceTransform<'t, F>> {
        self.check_slice(slice)?;
        let out = self.transform.forward(p, slice.mean_per_channel());
        Ok(SliceTransform {
            axis_angle: out.slice(0, 3),
            translation: out.slice(3, 6),
        })
    }

    /// Packed intrinsics `[rot(3), s_x, s_y, x_0, y_0]` from the pooled
    /// feature map; focal scales pass through `exp` so they stay positive.
    pub fn estimate_camera<'t, F: Real>(&self, p: &Bound<'t, F>, feat: Var<'t, F>) -> Var<'t, F> {
        let out = self.camera.forward(p, feat.mean_per_channel());
        Var::concat(&[out.slice(0, 3), out.slice(3, 5).exp(), out.slice(5, 7)])
    }

    pub fn generate<'t, F: Real>(&self, p: &Bound<'t, F>, feat: Var<'t, F>) -> Result<Generated<'t, F>> {
        let s = feat.shape();
        let (c, m, n) = (self.cfg.channels, self.cfg.rows, self.cfg.cols);
        if s.len() != 4 || s[0] != c || s[2] != m || s[3] != n {
            return Err(Error::shape(format!("generator input {s:?}, expected [{c}, t, {m}, {n}]")));
        }
        let camera = self.estimate_camera(p, feat);
        let k = camera.camera_matrix();
        let ext = self.cfg.extents();
        let mut projected = Vec::with_capacity(s[1]);
        let mut world = Vec::with_capacity(s[1]);
        let mut transforms = Vec::with_capacity(s[1]);
        for t in 0..s[1] {
            let slice = feat.select_time(t);
            let pts = self.estimate_coords(p, slice)?;
            let tr = self.estimate_transforms(p, slice)?;
            let rot = tr.axis_angle.axis_angle_to_rotation();
            let pw = pts.rigid_transform(rot, tr.translation);
            let augmented = slice.concat_channels(pts);
            world.push(augmented.splat(pw, ext).sum_axis1());
            projected.push(augmented.project(pw, k, (m, n)));
            transforms.push(tr);
        }
        Ok(Generated {
            projected: Var::stack_time(&projected),
            world: Var::stack_time(&world),
            camera,
            transforms,
        })
    }

    /// Returns the unit-norm code of the temporally pooled world grid and the
    /// autoencoder's mean squared reconstruction error.
    pub fn compress_world<'t, F: Real>(&self, p: &Bound<'t, F>, world: Var<'t, F>) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let s = world.shape();
        let want = [self.cfg.channels + 3, self.cfg.world_rows, self.cfg.world_cols];
        if s.len() != 4 || s[0] != want[0] || s[2] != want[1] || s[3] != want[2] {
            return Err(Error::shape(format!("world grid {s:?}, expected [{}, t, {}, {}]", want[0], want[1], want[2])));
        }
        let pooled = world.mean_axis1().reshape(&[self.cfg.world_dim()]);
        let hidden = self.down.forward(p, pooled);
        let recon = self.up.forward(p, hidden);
        let loss = recon.sub(pooled).square().mean();
        Ok((hidden.l2_normalize(), loss))
    }
}
