//! Similarity network (the base learner) and the gate module.
//!
//! The similarity network maps a relation descriptor `[C, K′, K′]` to a
//! relation score in (0,1): two conv blocks (3×3 conv, per-channel
//! scale/shift, ReLU, 2×2 max-pool), an adaptive average stage onto a fixed
//! grid so any `K′` is accepted, then FC → ReLU → FC → sigmoid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimNetConfig {
    pub channels: usize,
    pub hidden: usize,
    /// Side of the adaptive pooling grid in front of the FC layers.
    pub grid: usize,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            hidden: 8,
            grid: 2,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    kernel: ParamId,
    scale: ParamId,
    shift: ParamId,
}

impl ConvBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / (9 * c_in) as f64).sqrt();
        Self {
            kernel: store.add(format!("{name}.kernel"), Tensor::randn(&[c_out, c_in, 3, 3], std, rng)),
            scale: store.add(format!("{name}.scale"), Tensor::full(&[c_out], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[c_out])),
        }
    }

    fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let x = t.conv2d(x, p.var(self.kernel), 1, 1)?;
        let x = t.channel_affine(x, p.var(self.scale), p.var(self.shift))?;
        let x = t.relu(x);
        let s = t.shape(x);
        if s[2] >= 2 && s[3] >= 2 {
            t.max_pool2(x)
        } else {
            Ok(x)
        }
    }
}

/// Fully connected layer `x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
}

impl Dense {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = (gain / n_in as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[n_in, n_out], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[n_out])),
        }
    }

    pub(crate) fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = t.matmul(x, p.var(self.weight))?;
        t.add_row_bias(y, p.var(self.bias))
    }

    pub(crate) fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// The base learner `r(ϑ; R)`.
#[derive(Clone, Debug)]
pub struct SimilarityNet {
    in_channels: usize,
    cfg: SimNetConfig,
    blocks: [ConvBlock; 2],
    fc1: Dense,
    fc2: Dense,
}

impl SimilarityNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        cfg: SimNetConfig,
        rng: &mut R,
    ) -> Self {
        let c = cfg.channels;
        let blocks = [
            ConvBlock::new(store, &format!("{prefix}.b0"), in_channels, c, rng),
            ConvBlock::new(store, &format!("{prefix}.b1"), c, c, rng),
        ];
        let fc1 = Dense::new(store, &format!("{prefix}.fc1"), c * cfg.grid * cfg.grid, cfg.hidden, 2.0, rng);
        let fc2 = Dense::new(store, &format!("{prefix}.fc2"), cfg.hidden, 1, 1.0, rng);
        Self {
            in_channels,
            cfg,
            blocks,
            fc1,
            fc2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Every parameter this network owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            ids.extend([b.kernel, b.scale, b.shift]);
        }
        ids.extend([self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]);
        ids
    }

    /// Zeroes the output layer so every score is exactly 0.5.
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.fc2.zero(store);
    }

    /// Scores a batch of descriptors `[P, C, K′, K′]`, returning `[P]`.
    pub fn relate(&self, t: &mut Tape, p: &Bound, desc: Var) -> Result<Var> {
        let shape = t.shape(desc).to_vec();
        let [n, c, _, _] = shape[..] else {
            return Err(Error::dim(format!("descriptor batch must be [P,C,K,K], got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(Error::dim(format!(
                "similarity net expects {} descriptor channels, got {c}",
                self.in_channels
            )));
        }
        let mut x = desc;
        for b in &self.blocks {
            x = b.forward(t, p, x)?;
        }
        let x = t.adaptive_avg_pool(x, self.cfg.grid)?;
        let x = t.reshape(x, &[n, self.cfg.channels * self.cfg.grid * self.cfg.grid])?;
        let x = self.fc1.forward(t, p, x)?;
        let x = t.relu(x);
        let x = self.fc2.forward(t, p, x)?;
        let x = t.sigmoid(x);
        t.reshape(x, &[n])
    }

    /// Score of a single descriptor `[C, K′, K′]`.
    pub fn relate_one(&self, t: &mut Tape, p: &Bound, desc: Var) -> Result<Var> {
        let s = t.shape(desc).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("descriptor must be [C,K,K], got {s:?}")));
        }
        let d = t.reshape(desc, &[1, s[0], s[1], s[2]])?;
        let z = self.relate(t, p, d)?;
        t.reshape(z, &[])
    }
}

/// Gate head `g(ψ)`: 3×3 conv (8 channels) → ReLU → global average → FC →
/// sigmoid.
#[derive(Clone, Debug)]
pub struct GateModule {
    kernel: ParamId,
    fc: Dense,
}

pub const GATE_CHANNELS: usize = 8;

impl GateModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        let kernel = store.add(
            format!("{prefix}.kernel"),
            Tensor::randn(&[GATE_CHANNELS, 1, 3, 3], (2.0f64 / 9.0).sqrt(), rng),
        );
        let fc = Dense::new(store, &format!("{prefix}.fc"), GATE_CHANNELS, 1, 1.0, rng);
        Self { kernel, fc }
    }

    pub fn zero_output(&self, store: &mut ParamStore) {
        self.fc.zero(store);
    }

    /// Gate values `[B]` for pooled representations `[B, K, K]`.
    pub fn gate(&self, t: &mut Tape, p: &Bound, reps: Var) -> Result<Var> {
        let shape = t.shape(reps).to_vec();
        let [b, k, k2] = shape[..] else {
            return Err(Error::dim(format!("gate expects [B,K,K], got {shape:?}")));
        };
        let x = t.reshape(reps, &[b, 1, k, k2])?;
        let x = t.conv2d(x, p.var(self.kernel), 1, 1)?;
        let x = t.relu(x);
        let x = t.global_avg_pool(x)?;
        let x = self.fc.forward(t, p, x)?;
        let x = t.sigmoid(x);
        t.reshape(x, &[b])
    }
}
