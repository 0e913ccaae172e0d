//! Stack of 3D conv blocks split into `f1` (blocks before the split) and
//! `f2` (remaining blocks, global pool and projection head).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv3d, GroupNorm, Linear, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    /// Number of blocks in `f1`.
    pub split_index: usize,
    pub channels_per_block: Vec<usize>,
    /// Conv stride per block, over (T, H, W).
    pub conv_strides: Vec<[usize; 3]>,
    /// Non-overlapping average-pool kernel per block, over (T, H, W).
    pub pool_kernels: Vec<[usize; 3]>,
    pub kernel_size: usize,
    pub norm_groups: usize,
    pub head_hidden: usize,
    pub embedding_dim: usize,
    /// (T, H, W, C)
    pub input_shape: [usize; 4],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_blocks: 5,
            split_index: 3,
            channels_per_block: vec![8, 16, 16, 32, 32],
            conv_strides: vec![[2, 2, 2], [1, 1, 1], [1, 1, 1], [2, 2, 2], [1, 1, 1]],
            pool_kernels: vec![[2, 2, 2], [1, 1, 1], [1, 1, 1], [1, 1, 1], [1, 1, 1]],
            kernel_size: 3,
            norm_groups: 4,
            head_hidden: 128,
            embedding_dim: 128,
            input_shape: [16, 32, 32, 3],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let b = self.num_blocks;
        if !(1 <= self.split_index && self.split_index < b) {
            return Err(Error::invalid(format!(
                "encoder.split_index must satisfy 1 <= split_index < num_blocks ({b}), got {}",
                self.split_index
            )));
        }
        if self.embedding_dim < 8 {
            return Err(Error::invalid(format!(
                "encoder.embedding_dim must be >= 8, got {}",
                self.embedding_dim
            )));
        }
        for (name, len) in [
            ("channels_per_block", self.channels_per_block.len()),
            ("conv_strides", self.conv_strides.len()),
            ("pool_kernels", self.pool_kernels.len()),
        ] {
            if len != b {
                return Err(Error::invalid(format!("encoder.{name} has {len} entries, num_blocks is {b}")));
            }
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid("encoder.kernel_size must be odd"));
        }
        if self.norm_groups == 0 {
            return Err(Error::invalid("encoder.norm_groups must be positive"));
        }
        if let Some(c) = self.channels_per_block.iter().find(|&&c| c == 0 || c % self.norm_groups != 0) {
            return Err(Error::invalid(format!(
                "encoder.channels_per_block entry {c} is not a positive multiple of norm_groups {}",
                self.norm_groups
            )));
        }
        if self.conv_strides.iter().chain(&self.pool_kernels).any(|s| s.contains(&0)) {
            return Err(Error::invalid("encoder strides and pool kernels must be positive"));
        }
        if self.input_shape.contains(&0) || self.head_hidden == 0 {
            return Err(Error::invalid("encoder.input_shape and head_hidden must be positive"));
        }
        let mut dims = [self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        for blk in 0..b {
            dims = self.block_output_dims(blk, dims);
            if dims.contains(&0) {
                return Err(Error::invalid(format!(
                    "encoder schedule collapses the input to zero extent at block {}",
                    blk + 1
                )));
            }
        }
        Ok(())
    }

    fn conv_geometry(&self, blk: usize) -> ConvGeometry {
        let k = self.kernel_size;
        ConvGeometry::same([k, k, k], self.conv_strides[blk])
    }

    fn block_output_dims(&self, blk: usize, dims: [usize; 3]) -> [usize; 3] {
        let conv = self.conv_geometry(blk).output_dims(dims);
        let p = self.pool_kernels[blk];
        [conv[0] / p[0], conv[1] / p[1], conv[2] / p[2]]
    }

    /// Input tensor layout `[C, T, H, W]`.
    pub fn input_tensor_shape(&self) -> [usize; 4] {
        let [t, h, w, c] = self.input_shape;
        [c, t, h, w]
    }

    /// Shape `[c, t, m, n]` of `f1(x)`.
    pub fn split_shape(&self) -> [usize; 4] {
        self.shape_after(self.split_index)
    }

    fn shape_after(&self, blocks: usize) -> [usize; 4] {
        let mut dims = [self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        for blk in 0..blocks {
            dims = self.block_output_dims(blk, dims);
        }
        let c = if blocks == 0 {
            self.input_shape[3]
        } else {
            self.channels_per_block[blocks - 1]
        };
        [c, dims[0], dims[1], dims[2]]
    }

    /// Width of the pooled backbone features (last block channels).
    pub fn feature_dim(&self) -> usize {
        *self.channels_per_block.last().expect("validated")
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv: Conv3d,
    norm: GroupNorm,
    pool: [usize; 3],
}

impl Block {
    fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let y = self.norm.forward(p, self.conv.forward(p, x)).relu();
        if self.pool == [1, 1, 1] {
            y
        } else {
            y.avg_pool3d(self.pool)
        }
    }
}

/// Architecture of the encoder. Parameters live in a separate [`ParamStore`],
/// so one `Encoder` serves the query encoder, its EMA copy and the
/// generator-branch copy.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    blocks: Vec<Block>,
    head: [Linear; 2],
}

impl Encoder {
    /// Builds the architecture and a freshly initialised parameter store.
    pub fn new<F: Real>(cfg: EncoderConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut in_ch = cfg.input_shape[3];
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for blk in 0..cfg.num_blocks {
            let out = cfg.channels_per_block[blk];
            let name = format!("blocks.{blk}");
            let conv = Conv3d::new(&mut store, &format!("{name}.conv"), in_ch, out, cfg.conv_geometry(blk), &mut rng);
            let norm = GroupNorm::new(&mut store, &format!("{name}.norm"), out, cfg.norm_groups);
            blocks.push(Block {
                conv,
                norm,
                pool: cfg.pool_kernels[blk],
            });
            in_ch = out;
        }
        let head = [
            Linear::new(&mut store, "head.0", in_ch, cfg.head_hidden, &mut rng),
            Linear::new(&mut store, "head.1", cfg.head_hidden, cfg.embedding_dim, &mut rng),
        ];
        Ok((Encoder { cfg, blocks, head }, store))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// `f1(x)`: the activation after `split_index` blocks. `x` is `[C, T, H, W]`.
    pub fn forward_first<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let want = self.cfg.input_tensor_shape();
        if x.shape() != want {
            return Err(Error::shape(format!("encoder input {:?}, expected {want:?}", x.shape())));
        }
        Ok(self.blocks[..self.cfg.split_index]
            .iter()
            .fold(x, |h, b| b.forward(p, h)))
    }

    /// Remaining blocks followed by global average pooling: `[feature_dim]`.
    pub fn backbone_tail<'t, F: Real>(&self, p: &Bound<'t, F>, feat: Var<'t, F>) -> Result<Var<'t, F>> {
        let want = self.cfg.split_shape();
        if feat.shape() != want {
            return Err(Error::shape(format!("split feature {:?}, expected {want:?}", feat.shape())));
        }
        Ok(self.blocks[self.cfg.split_index..]
            .iter()
            .fold(feat, |h, b| b.forward(p, h))
            .mean_per_channel())
    }

    /// Projection head without the final normalisation.
    pub fn head_raw<'t, F: Real>(&self, p: &Bound<'t, F>, pooled: Var<'t, F>) -> Var<'t, F> {
        let h = self.head[0].forward(p, pooled).relu();
        self.head[1].forward(p, h)
    }

    /// `f2(feat)`: unit-norm embedding of dimension `embedding_dim`.
    pub fn forward_second<'t, F: Real>(&self, p: &Bound<'t, F>, feat: Var<'t, F>) -> Result<Var<'t, F>> {
        let pooled = self.backbone_tail(p, feat)?;
        Ok(self.head_raw(p, pooled).l2_normalize())
    }

    pub fn forward_full<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let feat = self.forward_first(p, x)?;
        self.forward_second(p, feat)
    }

    /// Pooled backbone features before the projection head (probe input).
    pub fn features<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let feat = self.forward_first(p, x)?;
        self.backbone_tail(p, feat)
    }
}

/// Generator-branch initialisation: an exact copy of the trained encoder,
/// head included. Later updates to either copy are independent.
pub fn clone_into_generator_branch<F: Real>(source: &ParamStore<F>) -> ParamStore<F> {
    source.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::{check, random_tensor, GradCheck};
    use crate::tensor::Tensor;

    fn small() -> EncoderConfig {
        EncoderConfig {
            num_blocks: 3,
            split_index: 2,
            channels_per_block: vec![4, 4, 8],
            conv_strides: vec![[1, 2, 2], [1, 1, 1], [2, 2, 2]],
            pool_kernels: vec![[1, 1, 1], [1, 1, 1], [1, 1, 1]],
            kernel_size: 3,
            norm_groups: 2,
            head_hidden: 12,
            embedding_dim: 8,
            input_shape: [4, 8, 8, 2],
        }
    }

    #[test]
    fn default_split_shape_follows_schedule() {
        // 16x32x32: conv stride 2 -> 8x16x16, pool (2,2,2) -> 4x8x8; blocks 2-3 keep it
        let cfg = EncoderConfig::default();
        let (enc, store) = Encoder::new::<f32>(cfg.clone(), 0).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[3, 16, 32, 32]));
        let f = enc.forward_first(&p, x).unwrap();
        assert_eq!(f.shape(), vec![16, 4, 8, 8]);
        assert_eq!(cfg.split_shape(), [16, 4, 8, 8]);
        assert!(f.value().is_finite());
        let e = enc.forward_second(&p, f).unwrap();
        assert_eq!(e.shape(), vec![128]);
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        c.split_index = 5;
        assert!(c.validate().is_err());
        c.split_index = 0;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.embedding_dim = 7;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.channels_per_block.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn shape_errors() {
        let (enc, store) = Encoder::new::<f64>(small(), 1).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        assert!(enc.forward_first(&p, tape.constant(Tensor::zeros(&[2, 4, 8, 9]))).is_err());
        assert!(enc.forward_second(&p, tape.constant(Tensor::zeros(&[4, 4, 4, 5]))).is_err());
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let (enc, store) = Encoder::new::<f64>(small(), 2).unwrap();
        let x = random_tensor(&[2, 4, 8, 8], 3, 1.0);
        let run = |x: &Tensor<f64>| {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let e = enc.forward_full(&p, tape.constant(x.clone())).unwrap();
            (*e.value()).clone()
        };
        let (a, b) = (run(&x), run(&x));
        assert_eq!(a.data(), b.data());
        assert!((a.norm() - 1.0).abs() < 1e-6);
        let feat_scaled = {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let f = enc.forward_first(&p, tape.constant(x.clone())).unwrap().scale(2.0);
            enc.forward_second(&p, f).unwrap().value().norm()
        };
        assert!((feat_scaled - 1.0).abs() < 1e-6);
    }

    #[test]
    fn embedding_gradient_wrt_feature() {
        let (enc, store) = Encoder::new::<f64>(small(), 4).unwrap();
        let feat = random_tensor(&small().split_shape(), 5, 1.0);
        let probe = random_tensor(&[8], 6, 1.0);
        let report = check(
            &[feat],
            |tape, v| {
                let p = store.bind(tape, false);
                let e = enc.forward_second(&p, v[0]).unwrap();
                e.dot(tape.constant(probe.clone()))
            },
            &GradCheck::default(),
        );
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn branch_clone_matches_source() {
        let (enc, store) = Encoder::new::<f64>(small(), 7).unwrap();
        let branch = clone_into_generator_branch(&store);
        assert_eq!(branch.num_scalars(), store.num_scalars());
        let x = random_tensor(&[2, 4, 8, 8], 8, 1.0);
        let tape = Tape::new();
        let (p, q) = (store.bind(&tape, false), branch.bind(&tape, false));
        let a = enc.forward_first(&p, tape.constant(x.clone())).unwrap();
        let b = enc.forward_first(&q, tape.constant(x)).unwrap();
        assert_eq!(a.value().data(), b.value().data());
    }
}
