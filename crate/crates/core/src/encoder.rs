//! Conv-4 feature encoder producing feature maps at several abstraction
//! levels for inputs at several spatial scales.
//!
//! Each block is conv 3×3 (padding 1) → per-channel scale/shift → ReLU →
//! 2×2 max-pool. The levels are the outputs of the last `D` blocks. One
//! forward pass yields every level; all scales share the same weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub channels_per_block: Vec<usize>,
    pub num_levels: usize,
    pub num_scales: usize,
    pub input_size: usize,
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels_per_block: vec![64; 4],
            num_levels: 4,
            num_scales: 3,
            input_size: 28,
            in_channels: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.channels_per_block.len();
        if blocks == 0 || self.channels_per_block.contains(&0) {
            return Err(Error::Config("encoder needs at least one block with nonzero channels".into()));
        }
        if self.num_levels == 0 || self.num_levels > blocks {
            return Err(Error::Config(format!(
                "levels must be in [1, {blocks}], got {}",
                self.num_levels
            )));
        }
        if self.num_scales == 0 {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if self.input_size == 0 || self.in_channels == 0 {
            return Err(Error::Config("input size and channel count must be positive".into()));
        }
        for s in 1..=self.num_scales {
            self.level_extents(s)?;
        }
        Ok(())
    }

    /// Block index (0-based) tapped for level `d` (1-based).
    pub fn tap_block(&self, d: usize) -> usize {
        self.channels_per_block.len() - self.num_levels + d - 1
    }

    /// Channel count K of level `d`.
    pub fn level_channels(&self, d: usize) -> usize {
        self.channels_per_block[self.tap_block(d)]
    }

    /// Spatial side of the input at scale `s`.
    pub fn scale_extent(&self, s: usize) -> usize {
        (1..s).fold(self.input_size, |e, _| e.div_ceil(2))
    }

    /// Spatial side after every block at scale `s`.
    pub fn block_extents(&self, s: usize) -> Vec<usize> {
        let mut e = self.scale_extent(s);
        self.channels_per_block
            .iter()
            .map(|_| {
                e = pooled_extent(e);
                e
            })
            .collect()
    }

    /// Spatial side of each level's map at scale `s`.
    pub fn level_extents(&self, s: usize) -> Result<Vec<usize>> {
        let blocks = self.block_extents(s);
        let out: Vec<usize> = (1..=self.num_levels).map(|d| blocks[self.tap_block(d)]).collect();
        if out.contains(&0) {
            return Err(Error::Config(format!(
                "input of side {} at scale {s} collapses to an empty feature map",
                self.scale_extent(s)
            )));
        }
        Ok(out)
    }

    /// Number of locations N of level `d` at scale `s`.
    pub fn level_locations(&self, d: usize, s: usize) -> Result<usize> {
        let e = self.level_extents(s)?[d - 1];
        Ok(e * e)
    }
}

/// Max-pooling halves (floor) a map but leaves a map of side 1 alone, so deep
/// levels of small inputs stay at 1×1 instead of vanishing.
fn pooled_extent(e: usize) -> usize {
    if e >= 2 {
        e / 2
    } else {
        e
    }
}

/// One level's feature matrix Φ (K×N).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub level: usize,
    pub scale: usize,
}

#[derive(Clone, Debug)]
struct Block {
    kernel: ParamId,
    scale: ParamId,
    shift: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    blocks: Vec<Block>,
}

impl Encoder {
    /// Registers the encoder's parameters in `store` under `prefix`.
    pub fn new<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = cfg.in_channels;
        let mut blocks = Vec::new();
        for (i, &c_out) in cfg.channels_per_block.iter().enumerate() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let kernel = store.add(
                format!("{prefix}.b{i}.kernel"),
                Tensor::randn(&[c_out, c_in, 3, 3], std, rng),
            );
            let scale = store.add(format!("{prefix}.b{i}.scale"), Tensor::full(&[c_out], 1.0));
            let shift = store.add(format!("{prefix}.b{i}.shift"), Tensor::zeros(&[c_out]));
            blocks.push(Block { kernel, scale, shift });
            c_in = c_out;
        }
        Ok(Self { cfg, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Parameters of the first block's kernel, exposed for sharing checks.
    pub fn first_kernel(&self) -> ParamId {
        self.blocks[0].kernel
    }

    /// Runs a batch `[B, C, H, W]` through every block and returns the level
    /// maps `[B, K_d, N_d]` for `d = 1..=D`.
    pub fn forward(&self, t: &mut Tape, p: &Bound, images: Var) -> Result<Vec<Var>> {
        let shape = t.shape(images).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::dim(format!("encoder expects [B,C,H,W] input, got {shape:?}")));
        };
        if c != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "encoder expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("empty input image".into()));
        }
        let first_tap = self.cfg.tap_block(1);
        let mut x = images;
        let mut levels = Vec::with_capacity(self.cfg.num_levels);
        for (i, block) in self.blocks.iter().enumerate() {
            x = t.conv2d(x, p.var(block.kernel), 1, 1)?;
            x = t.channel_affine(x, p.var(block.scale), p.var(block.shift))?;
            x = t.relu(x);
            let s = t.shape(x);
            if s[2] >= 2 && s[3] >= 2 {
                x = t.max_pool2(x)?;
            }
            if i >= first_tap {
                let s = t.shape(x).to_vec();
                levels.push(t.reshape(x, &[b, s[1], s[2] * s[3]])?);
            }
        }
        Ok(levels)
    }

    /// Feature map of one `[C, H, W]` image at level `d` and scale `s`
    /// (both 1-based), evaluated without gradients.
    pub fn encode(&self, store: &ParamStore, image: &Tensor, d: usize, s: usize) -> Result<FeatureMap> {
        if d == 0 || d > self.cfg.num_levels {
            return Err(Error::Config(format!("level {d} outside [1, {}]", self.cfg.num_levels)));
        }
        let x = downsample(image, s, self.cfg.num_scales)?;
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xs = x.shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::dim("encode expects a [C,H,W] image"));
        }
        let xv = t.constant(x.reshape(&[1, xs[0], xs[1], xs[2]])?);
        let levels = self.forward(&mut t, &p, xv)?;
        let v = t.value(levels[d - 1]);
        let (k, n) = (v.shape()[1], v.shape()[2]);
        Ok(FeatureMap {
            values: v.clone().reshape(&[k, n])?,
            level: d,
            scale: s,
        })
    }
}

/// Downsamples `[.., H, W]` by 2×2 average pooling applied `s − 1` times.
pub fn downsample(image: &Tensor, s: usize, num_scales: usize) -> Result<Tensor> {
    if s == 0 || s > num_scales {
        return Err(Error::Config(format!("scale {s} outside [1, {num_scales}]")));
    }
    if s == 1 {
        return Ok(image.clone());
    }
    let mut t = Tape::new();
    let mut x = t.constant(image.clone());
    for _ in 1..s {
        x = t.avg_pool2(x)?;
    }
    Ok(t.value(x).clone())
}
