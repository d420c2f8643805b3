//! Second-order pooling and power normalization.
//!
//! A feature map `Φ` (K×N) is pooled into its autocorrelation `(1/N)ΦΦᵀ`,
//! trace-normalized, and passed through an elementwise power normalization
//! that squashes co-occurrence counts into a bounded "probability of at least
//! one co-occurrence".
//!
//! Tape functions accept a single matrix (`[K, N]` / `[K, K]`) or a batch
//! (`[B, K, N]` / `[B, K, K]`).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Regularizer added to the trace before normalizing.
pub const TRACE_LAMBDA: f64 = 1e-6;

/// Which power normalization to apply after pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PnKind {
    None,
    #[default]
    MaxExp,
    MaxExpPm,
    SigmE,
}

impl PnKind {
    pub const ALL: [PnKind; 4] = [PnKind::None, PnKind::MaxExp, PnKind::MaxExpPm, PnKind::SigmE];

    pub fn name(self) -> &'static str {
        match self {
            PnKind::None => "none",
            PnKind::MaxExp => "maxexp",
            PnKind::MaxExpPm => "maxexp_pm",
            PnKind::SigmE => "sigme",
        }
    }
}

impl fmt::Display for PnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PnKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pn `{s}` (expected none|maxexp|maxexp_pm|sigme)")))
    }
}

/// Power normalization settings.
///
/// `eta: None` means "use N, the number of locations of the pooled map".
/// `alpha: None` means `20·η`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PnConfig {
    pub kind: PnKind,
    pub eta: Option<f64>,
    pub rho: f64,
    pub alpha: Option<f64>,
    /// SigmE slope as a multiple of η, so that the logistic tracks the
    /// MaxExp(±) curve it approximates.
    pub sigme_ratio: f64,
}

impl Default for PnConfig {
    fn default() -> Self {
        Self {
            kind: PnKind::MaxExp,
            eta: None,
            rho: 0.5,
            alpha: None,
            sigme_ratio: SIGME_RATIO,
        }
    }
}

/// Grid-searched ratio `η′/η` minimizing the max deviation between SigmE and
/// hard MaxExp(±) at ρ = 0.5, η = 20.
pub const SIGME_RATIO: f64 = 0.77;

impl PnConfig {
    pub fn with_kind(kind: PnKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Resolved η for a map with `n` spatial locations.
    pub fn eta_for(&self, n: usize) -> f64 {
        self.eta.unwrap_or(n as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(eta) = self.eta {
            if !(eta > 0.0) {
                return Err(Error::Parameter(format!("eta must be positive, got {eta}")));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Parameter(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if let Some(alpha) = self.alpha {
            if !(alpha > 0.0) {
                return Err(Error::Parameter(format!("alpha must be positive, got {alpha}")));
            }
        }
        if !(self.sigme_ratio > 0.0) {
            return Err(Error::Parameter(format!(
                "sigme ratio must be positive, got {}",
                self.sigme_ratio
            )));
        }
        Ok(())
    }
}

/// `(1/N) Φ Φᵀ`.
pub fn autocorrelation(t: &mut Tape, phi: Var) -> Result<Var> {
    let shape = t.shape(phi);
    let n = match shape.len() {
        2 | 3 => shape[shape.len() - 1],
        _ => return Err(Error::dim(format!("feature map must be [K,N] or [B,K,N], got {shape:?}"))),
    };
    if n == 0 {
        return Err(Error::EmptyInput("feature map has no spatial locations".into()));
    }
    let g = t.batch_gram(phi)?;
    Ok(t.mul_scalar(g, 1.0 / n as f64))
}

/// `M / (trace(M) + λ)`.
pub fn trace_normalize(t: &mut Tape, m: Var) -> Result<Var> {
    let shape = t.shape(m).to_vec();
    let batched = match shape[..] {
        [k, k2] if k == k2 => false,
        [_, k, k2] if k == k2 => true,
        _ => return Err(Error::dim(format!("trace_normalize expects square matrices, got {shape:?}"))),
    };
    let m3 = if batched {
        m
    } else {
        t.reshape(m, &[1, shape[0], shape[1]])?
    };
    let tr = t.trace(m3)?;
    let den = t.add_scalar(tr, TRACE_LAMBDA);
    let inv = t.pow_scalar(den, -1.0)?;
    let out = t.scale_items(m3, inv)?;
    if batched {
        Ok(out)
    } else {
        t.reshape(out, &shape)
    }
}

/// MaxExp: `min(ηM, 1)`.
pub fn pn_maxexp(t: &mut Tape, m: Var, eta: f64) -> Result<Var> {
    if !(eta > 0.0) {
        return Err(Error::Parameter(format!("eta must be positive, got {eta}")));
    }
    let s = t.mul_scalar(m, eta);
    Ok(t.min_scalar(s, 1.0))
}

/// Smooth MaxExp(±):
/// `(1 − (1−ρ)·smax(0,−m))^η − (1 − ρ·smax(0,m))^η`, where
/// `smax(0, x; α) = softplus(αx)/α`.
pub fn pn_maxexp_pm(t: &mut Tape, m: Var, eta: f64, rho: f64, alpha: f64) -> Result<Var> {
    check_pm(eta, rho, alpha)?;
    let pos = t.mul_scalar(m, alpha);
    let pos = t.softplus(pos);
    let neg = t.mul_scalar(m, -alpha);
    let neg = t.softplus(neg);

    let a = t.mul_scalar(neg, -(1.0 - rho) / alpha);
    let a = t.add_scalar(a, 1.0);
    // with ρ = 1 the soft maximum overshoots the hard one slightly at |m| = 1
    let a = t.relu(a);
    let a = t.pow_scalar(a, eta)?;

    let b = t.mul_scalar(pos, -rho / alpha);
    let b = t.add_scalar(b, 1.0);
    let b = t.relu(b);
    let b = t.pow_scalar(b, eta)?;
    t.sub(a, b)
}

/// SigmE: `2 / (1 + exp(−η′m)) − 1`.
pub fn pn_sigme(t: &mut Tape, m: Var, eta_prime: f64) -> Result<Var> {
    if !(eta_prime > 0.0) {
        return Err(Error::Parameter(format!("eta' must be positive, got {eta_prime}")));
    }
    let s = t.mul_scalar(m, eta_prime);
    let s = t.sigmoid(s);
    let s = t.mul_scalar(s, 2.0);
    Ok(t.add_scalar(s, -1.0))
}

fn check_pm(eta: f64, rho: f64, alpha: f64) -> Result<()> {
    if !(eta > 0.0) {
        return Err(Error::Parameter(format!("eta must be positive, got {eta}")));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Parameter(format!("rho must lie in [0, 1], got {rho}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::Parameter(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// Applies the configured power normalization to a trace-normalized matrix
/// (or batch) that was pooled from maps with `n` locations.
pub fn apply_pn(t: &mut Tape, m: Var, cfg: &PnConfig, n: usize) -> Result<Var> {
    let eta = cfg.eta_for(n);
    match cfg.kind {
        PnKind::None => Ok(m),
        PnKind::MaxExp => pn_maxexp(t, m, eta),
        PnKind::MaxExpPm => pn_maxexp_pm(t, m, eta, cfg.rho, cfg.alpha.unwrap_or(20.0 * eta)),
        PnKind::SigmE => pn_sigme(t, m, cfg.sigme_ratio * eta),
    }
}

/// Full second-order pooling: autocorrelate, trace-normalize, power-normalize.
///
/// `eta_n` overrides the location count used to resolve a default η; pass
/// `None` to use the map's own N.
pub fn pool(t: &mut Tape, phi: Var, cfg: &PnConfig, eta_n: Option<usize>) -> Result<Var> {
    let shape = t.shape(phi);
    let n = shape.get(shape.len().wrapping_sub(1)).copied().unwrap_or(0);
    let m = autocorrelation(t, phi)?;
    let m = trace_normalize(t, m)?;
    apply_pn(t, m, cfg, eta_n.unwrap_or(n))
}

// ---- scalar forms -----------------------------------------------------------

/// `(1/α) log(e^{αx} + e^{αy})`, evaluated stably.
pub fn smax(x: f64, y: f64, alpha: f64) -> f64 {
    let hi = x.max(y);
    hi + ((alpha * (x - hi)).exp() + (alpha * (y - hi)).exp()).ln() / alpha
}

/// `min(ηp, 1)`.
pub fn maxexp(p: f64, eta: f64) -> f64 {
    (eta * p).min(1.0)
}

/// Probability of at least one co-occurrence in η Bernoulli(p) trials.
pub fn cooccurrence(p: f64, eta: f64) -> f64 {
    1.0 - (1.0 - p).powf(eta)
}

/// Hard MaxExp(±): `(1−(1−ρ)max(0,−p))^η − (1−ρ max(0,p))^η`.
pub fn maxexp_pm_hard(p: f64, eta: f64, rho: f64) -> f64 {
    (1.0 - (1.0 - rho) * (-p).max(0.0)).powf(eta) - (1.0 - rho * p.max(0.0)).powf(eta)
}

/// Smooth MaxExp(±), the scalar twin of [`pn_maxexp_pm`].
pub fn maxexp_pm_soft(p: f64, eta: f64, rho: f64, alpha: f64) -> f64 {
    let a = (1.0 - (1.0 - rho) * smax(0.0, -p, alpha)).max(0.0);
    let b = (1.0 - rho * smax(0.0, p, alpha)).max(0.0);
    a.powf(eta) - b.powf(eta)
}

/// `2 / (1 + e^{−η′p}) − 1`.
pub fn sigme(p: f64, eta_prime: f64) -> f64 {
    2.0 / (1.0 + (-eta_prime * p).exp()) - 1.0
}
