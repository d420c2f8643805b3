//! Relationship descriptors pairing support and query feature maps.
//!
//! * [`Descriptor::Otimes`]: pooled sum of a class's support maps, stacked with
//!   the pooled query (2 channels).
//! * [`Descriptor::OtimesR`]: support maps concatenated along locations, so the
//!   support channel is the mean of per-shot autocorrelations (2 channels).
//! * [`Descriptor::OtimesF`]: support and query maps concatenated along
//!   features and pooled jointly (1 channel of side `(Z+1)K`).
//!
//! The batched functions work on class-major support batches
//! (`[L·Z, K, N]`, shots of class 0 first) and are what training uses; the
//! `theta_*` functions are single-pair conveniences built on them.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sop::{self, PnConfig};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Descriptor {
    #[default]
    Otimes,
    OtimesR,
    OtimesF,
}

impl Descriptor {
    pub const ALL: [Descriptor; 3] = [Descriptor::Otimes, Descriptor::OtimesR, Descriptor::OtimesF];

    pub fn name(self) -> &'static str {
        match self {
            Descriptor::Otimes => "otimes",
            Descriptor::OtimesR => "otimes_r",
            Descriptor::OtimesF => "otimes_f",
        }
    }

    /// Channels stacked along the third mode.
    pub fn channels(self) -> usize {
        match self {
            Descriptor::OtimesF => 1,
            _ => 2,
        }
    }

    /// Side length of each channel for level width `k` and `shot` supports.
    pub fn side(self, k: usize, shot: usize) -> usize {
        match self {
            Descriptor::OtimesF => (shot + 1) * k,
            _ => k,
        }
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Descriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Descriptor::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown descriptor `{s}` (expected otimes|otimes_r|otimes_f)")))
    }
}

fn kn(t: &Tape, v: Var, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape(v) {
        [b, k, n] => Ok((b, k, n)),
        ref s => Err(Error::dim(format!("{what} must be [B,K,N], got {s:?}"))),
    }
}

/// Pooled support-side representation per class, `[L, K, K]`, for
/// [`Descriptor::Otimes`] or [`Descriptor::OtimesR`].
pub fn class_reps(
    t: &mut Tape,
    kind: Descriptor,
    supports: Var,
    way: usize,
    shot: usize,
    pn: &PnConfig,
) -> Result<Var> {
    let (b, _, n) = kn(t, supports, "support maps")?;
    if way * shot != b || shot == 0 {
        return Err(Error::dim(format!("{b} support maps do not form {way} classes of {shot}")));
    }
    let segment: Vec<usize> = (0..b).map(|i| i / shot).collect();
    match kind {
        Descriptor::Otimes => {
            let sum = t.segment_sum(supports, &segment, way)?;
            sop::pool(t, sum, pn, Some(n))
        }
        Descriptor::OtimesR => {
            let grams = sop::autocorrelation(t, supports)?;
            let sum = t.segment_sum(grams, &segment, way)?;
            let mean = t.mul_scalar(sum, 1.0 / shot as f64);
            let m = sop::trace_normalize(t, mean)?;
            sop::apply_pn(t, m, pn, shot * n)
        }
        Descriptor::OtimesF => Err(Error::Contract(
            "the full descriptor has no separate support representation".into(),
        )),
    }
}

/// Stacks `[support; query]` channels for each `(support_row, query_row)`
/// pair into `[P, 2, K, K]`.
pub fn stack_pairs(t: &mut Tape, support_reps: Var, query_reps: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let (_, k, k2) = kn(t, support_reps, "support reps")?;
    let (_, qk, _) = kn(t, query_reps, "query reps")?;
    if k != k2 || qk != k || t.shape(query_reps)[2] != k {
        return Err(Error::dim("support and query reps must be K×K with the same K"));
    }
    let si: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let qi: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let s = t.gather(support_reps, &si)?;
    let q = t.gather(query_reps, &qi)?;
    let p = pairs.len();
    let s = t.reshape(s, &[p, 1, k, k])?;
    let q = t.reshape(q, &[p, 1, k, k])?;
    t.concat(&[s, q], 1)
}

/// Full descriptor for each `(class, query_row)` pair, `[P, 1, K′, K′]` with
/// `K′ = (Z+1)K`.
pub fn full_pairs(
    t: &mut Tape,
    supports: Var,
    queries: Var,
    shot: usize,
    pairs: &[(usize, usize)],
    pn: &PnConfig,
) -> Result<Var> {
    let (_, k, n) = kn(t, supports, "support maps")?;
    let (_, qk, qn) = kn(t, queries, "query maps")?;
    if qk != k || qn != n {
        return Err(Error::dim(format!(
            "full descriptor needs equal map shapes, got support {k}x{n} and query {qk}x{qn}"
        )));
    }
    let mut parts = Vec::with_capacity(shot + 1);
    for z in 0..shot {
        let idx: Vec<usize> = pairs.iter().map(|&(l, _)| l * shot + z).collect();
        parts.push(t.gather(supports, &idx)?);
    }
    let qi: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    parts.push(t.gather(queries, &qi)?);
    let stacked = t.concat(&parts, 1)?;
    let pooled = sop::pool(t, stacked, pn, Some(n))?;
    let side = (shot + 1) * k;
    t.reshape(pooled, &[pairs.len(), 1, side, side])
}

fn stack_maps(t: &mut Tape, maps: &[Var]) -> Result<Var> {
    let Some(&first) = maps.first() else {
        return Err(Error::EmptyInput("no support maps".into()));
    };
    let shape = t.shape(first).to_vec();
    let [k, n] = shape[..] else {
        return Err(Error::dim(format!("feature map must be [K,N], got {shape:?}")));
    };
    let mut parts = Vec::with_capacity(maps.len());
    for &m in maps {
        if t.shape(m) != [k, n] {
            return Err(Error::dim(format!(
                "mismatched feature maps {:?} and {:?}",
                shape,
                t.shape(m)
            )));
        }
        parts.push(t.reshape(m, &[1, k, n])?);
    }
    t.concat(&parts, 0)
}

fn two_channel(t: &mut Tape, kind: Descriptor, supports: &[Var], query: Var, pn: &PnConfig) -> Result<Var> {
    let s = stack_maps(t, supports)?;
    let q = stack_maps(t, &[query])?;
    let (_, k, _) = kn(t, s, "support maps")?;
    // locations may differ (maps from different scales); widths may not
    if t.shape(q)[1] != k {
        return Err(Error::dim("query map width differs from the supports"));
    }
    let sr = class_reps(t, kind, s, 1, supports.len(), pn)?;
    let qr = sop::pool(t, q, pn, None)?;
    let d = stack_pairs(t, sr, qr, &[(0, 0)])?;
    t.reshape(d, &[2, k, k])
}

/// ⊗: `[PN(Φ̄Φ̄ᵀ); PN(Φ_qΦ_qᵀ)]` with `Φ̄` the sum of the support maps.
pub fn theta_mean(t: &mut Tape, supports: &[Var], query: Var, pn: &PnConfig) -> Result<Var> {
    two_channel(t, Descriptor::Otimes, supports, query, pn)
}

/// ⊗R: supports concatenated along locations.
pub fn theta_rank(t: &mut Tape, supports: &[Var], query: Var, pn: &PnConfig) -> Result<Var> {
    two_channel(t, Descriptor::OtimesR, supports, query, pn)
}

/// ⊗F: supports and query concatenated along features, one channel.
pub fn theta_full(t: &mut Tape, supports: &[Var], query: Var, pn: &PnConfig) -> Result<Var> {
    let s = stack_maps(t, supports)?;
    let q = stack_maps(t, &[query])?;
    let shot = supports.len();
    let d = full_pairs(t, s, q, shot, &[(0, 0)], pn)?;
    let side = t.shape(d)[2];
    t.reshape(d, &[1, side, side])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn maps(seed: u64, count: usize, k: usize, n: usize) -> Vec<Tensor> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Tensor::uniform(&[k, n], 0.0, 1.0, &mut r)).collect()
    }

    type Theta = fn(&mut Tape, &[Var], Var, &PnConfig) -> Result<Var>;

    fn run(f: Theta, supports: &[Tensor], query: &Tensor, pn: &PnConfig) -> Tensor {
        let mut t = Tape::new();
        let s: Vec<Var> = supports.iter().map(|m| t.constant(m.clone())).collect();
        let q = t.constant(query.clone());
        let out = f(&mut t, &s, q, pn).unwrap();
        t.value(out).clone()
    }

    /// Dense re-evaluation of `PN(trace_norm(A))` for a K×N matrix product.
    fn dense_pool(phi: &[Vec<f64>], n: usize, scale: f64, eta: f64) -> Vec<f64> {
        let k = phi.len();
        let mut m = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                m[i * k + j] = scale * (0..n).map(|c| phi[i][c] * phi[j][c]).sum::<f64>();
            }
        }
        let tr: f64 = (0..k).map(|i| m[i * k + i]).sum();
        m.iter().map(|v| (eta * v / (tr + 1e-6)).min(1.0)).collect()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        let n = t.shape()[1];
        t.data().chunks(n).map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn full_descriptor_blocks_are_equal_when_query_equals_support() {
        let m = maps(1, 1, 3, 5);
        let out = run(theta_full, &m, &m[0], &PnConfig::default());
        assert_eq!(out.shape(), &[1, 6, 6]);
        for i in 0..3 {
            for j in 0..3 {
                let a = out.at(&[0, i, j]);
                assert_eq!(a, out.at(&[0, i + 3, j]));
                assert_eq!(a, out.at(&[0, i, j + 3]));
                assert_eq!(a, out.at(&[0, i + 3, j + 3]));
            }
        }
    }

    #[test]
    fn full_descriptor_zero_query_blocks_vanish() {
        let m = maps(2, 1, 3, 5);
        let out = run(theta_full, &m, &Tensor::zeros(&[3, 5]), &PnConfig::default());
        for i in 0..6 {
            for j in 0..6 {
                if i >= 3 || j >= 3 {
                    assert_eq!(out.at(&[0, i, j]), 0.0);
                }
            }
        }
    }

    #[test]
    fn full_descriptor_matches_dense_evaluation() {
        let m = maps(3, 3, 2, 4);
        let out = run(theta_full, &m[..2], &m[2], &PnConfig::default());
        let mut stacked = Vec::new();
        for t in &m {
            stacked.extend(rows(t));
        }
        let want = dense_pool(&stacked, 4, 0.25, 4.0);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_descriptor_rejects_mismatched_locations() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::zeros(&[2, 4]));
        let q = t.constant(Tensor::zeros(&[2, 1]));
        assert!(matches!(theta_full(&mut t, &[s], q, &PnConfig::default()), Err(Error::Dimension(_))));
        let wide = t.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(theta_mean(&mut t, &[s], wide, &PnConfig::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn rank_descriptor_examples() {
        let pn = PnConfig::default();
        let m = maps(4, 4, 3, 5);
        let single = run(theta_rank, &m[..1], &m[3], &pn);
        let plain = dense_pool(&rows(&m[0]), 5, 0.2, 5.0);
        for (a, b) in single.data()[..9].iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }

        let abc = run(theta_rank, &m[..3], &m[3], &pn);
        let cab = run(theta_rank, &[m[2].clone(), m[0].clone(), m[1].clone()], &m[3], &pn);
        assert!(abc.max_abs_diff(&cab) < 1e-15);

        // K×(ZN) concatenation evaluated densely, η = Z·N
        let mut wide = vec![Vec::new(); 3];
        for t in &m[..3] {
            for (i, r) in rows(t).into_iter().enumerate() {
                wide[i].extend(r);
            }
        }
        let want = dense_pool(&wide, 15, 1.0 / 15.0, 15.0);
        for (a, b) in abc.data()[..9].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_descriptor_examples() {
        let pn = PnConfig::default();
        let m = maps(5, 6, 3, 4);
        let a = run(theta_mean, &m[..1], &m[5], &pn);
        let b = run(theta_rank, &m[..1], &m[5], &pn);
        assert!(a.max_abs_diff(&b) < 1e-15);

        let same = vec![m[0].clone(); 4];
        let rep = run(theta_mean, &same, &m[5], &pn);
        let one = run(theta_mean, &m[..1], &m[5], &pn);
        // equal only up to the λ regularizer in the trace normalization
        assert!(rep.max_abs_diff(&one) < 1e-5);

        let five = run(theta_mean, &m[..5], &m[5], &pn);
        let mut sum = vec![vec![0.0; 4]; 3];
        for t in &m[..5] {
            for (i, r) in rows(t).into_iter().enumerate() {
                for (c, v) in r.into_iter().enumerate() {
                    sum[i][c] += v;
                }
            }
        }
        let want = dense_pool(&sum, 4, 0.25, 4.0);
        for (x, y) in five.data()[..9].iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let wantq = dense_pool(&rows(&m[5]), 4, 0.25, 4.0);
        for (x, y) in five.data()[9..].iter().zip(&wantq) {
            assert!((x - y).abs() < 1e-12);
        }
        let rev: Vec<Tensor> = m[..5].iter().rev().cloned().collect();
        let five_rev = run(theta_mean, &rev, &m[5], &pn);
        assert!(five.max_abs_diff(&five_rev) < 1e-12);
    }

    #[test]
    fn descriptor_shape_does_not_depend_on_locations() {
        let pn = PnConfig::default();
        let a = run(theta_mean, &maps(6, 2, 3, 9), &maps(7, 1, 3, 1)[0], &pn);
        let b = run(theta_mean, &maps(8, 2, 3, 4), &maps(9, 1, 3, 16)[0], &pn);
        assert_eq!(a.shape(), b.shape());
    }

    #[test]
    fn descriptor_names_round_trip() {
        for d in Descriptor::ALL {
            assert_eq!(d.name().parse::<Descriptor>().unwrap(), d);
        }
        assert_eq!(Descriptor::OtimesF.side(4, 2), 12);
    }
}
