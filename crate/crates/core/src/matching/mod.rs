//! Feature matching across scales and levels.
//!
//! For every (support sample, query) pair the base learner scores each
//! combination of a support representation and a query representation; a
//! matching strategy then reweights or transports those scores:
//!
//! * `cm`: weight by the clamped cosine of the two pooled representations;
//! * `gm`: weight by the product of two learned gate values;
//! * `ot`: transport support-side mass onto query-side mass at cost
//!   `1 − ζ`, giving `ζ′ = Σ ω ζ`;
//! * `gr`: replace the base learner by a GNN over the pair's scale nodes.
//!
//! In intra-level mode each level has its own base learner and only pairs
//! within that level are scored. In inter-level mode one learner scores
//! support representations of a level against query representations of every
//! level.

mod graph;
mod lp;

use std::fmt;
use std::str::FromStr;

pub use graph::{prior_matrix, rbf_prior, rbf_sigma, GraphMatcher, READOUT_HIDDEN};
pub use lp::{minimize, transport, LpSolution};

use crate::error::{Error, Result};
use crate::params::Bound;
use crate::reldesc;
use crate::simnet::{GateModule, SimilarityNet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Strategy {
    #[default]
    None,
    Cm,
    Gm,
    Ot,
    Gr,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::None, Strategy::Cm, Strategy::Gm, Strategy::Ot, Strategy::Gr];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Cm => "cm",
            Strategy::Gm => "gm",
            Strategy::Ot => "ot",
            Strategy::Gr => "gr",
        }
    }

    /// Whether the strategy collapses all representation pairs of a group to
    /// one score.
    pub fn collapses(self) -> bool {
        matches!(self, Strategy::Ot | Strategy::Gr)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown matching strategy `{s}` (expected none|cm|gm|ot|gr)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MatchMode {
    #[default]
    Intra,
    Inter,
}

impl MatchMode {
    pub fn name(self) -> &'static str {
        match self {
            MatchMode::Intra => "intra",
            MatchMode::Inter => "inter",
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(MatchMode::Intra),
            "inter" => Ok(MatchMode::Inter),
            _ => Err(Error::Config(format!("unknown matching mode `{s}` (expected intra|inter)"))),
        }
    }
}

/// `max(0, ⟨a, b⟩ / (‖a‖‖b‖))` for two vectors.
pub fn cosine_match(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("cosine of vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    Ok((dot / ((na + NORM_EPS) * (nb + NORM_EPS)).sqrt()).max(0.0))
}

const NORM_EPS: f64 = 1e-24;

/// Row-wise clamped cosine of `[P, F]` tensors, `[P]`.
pub fn cosine_rows(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let prod = t.mul(a, b)?;
    let dot = t.sum_axis(prod, 1)?;
    let sa = t.square(a)?;
    let na = t.sum_axis(sa, 1)?;
    let na = t.add_scalar(na, NORM_EPS);
    let sb = t.square(b)?;
    let nb = t.sum_axis(sb, 1)?;
    let nb = t.add_scalar(nb, NORM_EPS);
    let den = t.mul(na, nb)?;
    let inv = t.pow_scalar(den, -0.5)?;
    let cos = t.mul(dot, inv)?;
    Ok(t.relu(cos))
}

/// `ζ′ = α·ζ`.
pub fn weighted_score(t: &mut Tape, alpha: Var, zeta: Var) -> Result<Var> {
    t.mul(alpha, zeta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtSolution {
    pub plan: Tensor,
    pub objective: f64,
    /// `1 − objective`.
    pub score: f64,
}

/// Normalizes a marginal to unit mass; an all-zero marginal becomes uniform.
pub fn balance_marginal(m: &[f64]) -> Vec<f64> {
    let total: f64 = m.iter().map(|v| v.max(0.0)).sum();
    if total > 0.0 {
        m.iter().map(|v| v.max(0.0) / total).collect()
    } else {
        vec![1.0 / m.len() as f64; m.len()]
    }
}

/// Exact transport between balanced marginals at the given `[R, C]` cost.
pub fn solve_ot(cost: &Tensor, row: &[f64], col: &[f64]) -> Result<OtSolution> {
    let [r, c] = cost.shape()[..] else {
        return Err(Error::dim("transport cost must be a matrix"));
    };
    if row.len() != r || col.len() != c {
        return Err(Error::dim(format!(
            "marginals of length {} and {} for a {r}x{c} cost",
            row.len(),
            col.len()
        )));
    }
    let sol = lp::transport(cost.data(), &balance_marginal(row), &balance_marginal(col))?;
    Ok(OtSolution {
        plan: Tensor::new(vec![r, c], sol.x)?,
        objective: sol.objective,
        score: 1.0 - sol.objective,
    })
}

/// Pooled representations of one episode.
///
/// `support[d][s]` is `[Ns, K, K]` for the episode's individual support
/// samples (class-major) and `query[d][s]` is `[Nq, K, K]`.
#[derive(Clone, Debug)]
pub struct PooledEpisode {
    pub support: Vec<Vec<Var>>,
    pub query: Vec<Vec<Var>>,
}

/// The learned pieces a strategy may need.
#[derive(Clone, Copy, Debug)]
pub struct Matchers<'a> {
    /// One per level in intra mode, one shared in inter mode.
    pub simnets: &'a [SimilarityNet],
    pub gate: Option<&'a GateModule>,
    /// Indexed like `simnets`.
    pub graphs: &'a [GraphMatcher],
}

/// Scores every (support sample, query) pair.
///
/// Returns `[Nq, Ns, G, T]`: `G` groups (levels, or 1 when an inter-level
/// `ot`/`gr` match pools everything) of `T` matched scores each.
pub fn assemble_episode_scores(
    t: &mut Tape,
    p: &Bound,
    reps: &PooledEpisode,
    mode: MatchMode,
    strategy: Strategy,
    m: &Matchers<'_>,
) -> Result<Var> {
    let levels = reps.support.len();
    if levels == 0 || reps.query.len() != levels {
        return Err(Error::dim("episode needs the same nonzero number of support and query levels"));
    }
    let ns = t.shape(reps.support[0][0])[0];
    let nq = t.shape(reps.query[0][0])[0];
    let expected = match mode {
        MatchMode::Intra => levels,
        MatchMode::Inter => 1,
    };
    let (what, have) = if strategy == Strategy::Gr {
        ("graph matchers", m.graphs.len())
    } else {
        ("similarity nets", m.simnets.len())
    };
    if have != expected {
        return Err(Error::Config(format!("{mode} matching needs {expected} {what}, got {have}")));
    }
    let all_query: Vec<Var> = reps.query.iter().flatten().copied().collect();
    let all_support: Vec<Var> = reps.support.iter().flatten().copied().collect();
    let groups: Vec<(usize, &[Var], &[Var])> = match (mode, strategy.collapses()) {
        (MatchMode::Intra, _) => (0..levels).map(|d| (d, &reps.support[d][..], &reps.query[d][..])).collect(),
        (MatchMode::Inter, false) => (0..levels).map(|d| (0, &reps.support[d][..], &all_query[..])).collect(),
        (MatchMode::Inter, true) => vec![(0, &all_support[..], &all_query[..])],
    };
    let mut outs = Vec::with_capacity(groups.len());
    for (index, sup, qry) in groups {
        let g = score_group(t, p, index, sup, qry, strategy, m, ns, nq)?;
        let width = t.shape(g)[1];
        outs.push(t.reshape(g, &[nq, ns, 1, width])?);
    }
    t.concat(&outs, 2)
}

fn flat(t: &mut Tape, r: Var) -> Result<Var> {
    let s = t.shape(r).to_vec();
    t.reshape(r, &[s[0], s[1] * s[2]])
}

/// Scores all `|sup|·|qry|` representation combinations of each pair and
/// applies the strategy; returns `[Nq·Ns, T]` with rows ordered query-major.
#[allow(clippy::too_many_arguments)]
fn score_group(
    t: &mut Tape,
    p: &Bound,
    index: usize,
    sup: &[Var],
    qry: &[Var],
    strategy: Strategy,
    m: &Matchers<'_>,
    ns: usize,
    nq: usize,
) -> Result<Var> {
    let pairs: Vec<(usize, usize)> = (0..nq).flat_map(|q| (0..ns).map(move |n| (n, q))).collect();
    let n_idx: Vec<usize> = pairs.iter().map(|x| x.0).collect();
    let q_idx: Vec<usize> = pairs.iter().map(|x| x.1).collect();
    let np = pairs.len();
    let combos: Vec<(usize, usize)> = (0..sup.len())
        .flat_map(|i| (0..qry.len()).map(move |j| (i, j)))
        .collect();
    let tt = combos.len();

    if strategy == Strategy::Gr {
        let graph = &m.graphs[index];
        let mut nodes = Vec::with_capacity(sup.len() + qry.len());
        for (&r, idx) in sup.iter().map(|r| (r, &n_idx)).chain(qry.iter().map(|r| (r, &q_idx))) {
            let f = flat(t, r)?;
            let g = t.gather(f, idx)?;
            let width = t.shape(g)[1];
            nodes.push(t.reshape(g, &[np, 1, width])?);
        }
        let h = t.concat(&nodes, 1)?;
        let z = graph.score(t, p, h)?;
        return t.reshape(z, &[np, 1]);
    }

    let sn = &m.simnets[index];
    let mut descs = Vec::with_capacity(tt);
    for &(i, j) in &combos {
        descs.push(reldesc::stack_pairs(t, sup[i], qry[j], &pairs)?);
    }
    let all = t.concat(&descs, 0)?;
    let z = sn.relate(t, p, all)?;
    let z = t.reshape(z, &[tt, np])?;
    let zeta = t.transpose(z)?;

    match strategy {
        Strategy::None => Ok(zeta),
        Strategy::Cm => {
            let mut a_parts = Vec::with_capacity(tt);
            let mut b_parts = Vec::with_capacity(tt);
            for &(i, j) in &combos {
                let fs = flat(t, sup[i])?;
                let fq = flat(t, qry[j])?;
                a_parts.push(t.gather(fs, &n_idx)?);
                b_parts.push(t.gather(fq, &q_idx)?);
            }
            let a = t.concat(&a_parts, 0)?;
            let b = t.concat(&b_parts, 0)?;
            let alpha = cosine_rows(t, a, b)?;
            let alpha = t.reshape(alpha, &[tt, np])?;
            let alpha = t.transpose(alpha)?;
            weighted_score(t, alpha, zeta)
        }
        Strategy::Gm => {
            let gate = m
                .gate
                .ok_or_else(|| Error::Config("gate matching requires a gate module".into()))?;
            let gs: Vec<Var> = sup.iter().map(|&r| gate.gate(t, p, r)).collect::<Result<_>>()?;
            let gq: Vec<Var> = qry.iter().map(|&r| gate.gate(t, p, r)).collect::<Result<_>>()?;
            let mut parts = Vec::with_capacity(tt);
            for &(i, j) in &combos {
                let a = t.gather(gs[i], &n_idx)?;
                let b = t.gather(gq[j], &q_idx)?;
                parts.push(t.mul(a, b)?);
            }
            let alpha = t.concat(&parts, 0)?;
            let alpha = t.reshape(alpha, &[tt, np])?;
            let alpha = t.transpose(alpha)?;
            weighted_score(t, alpha, zeta)
        }
        Strategy::Ot => {
            let plan = transport_plans(t, sup, qry, &pairs, zeta)?;
            let plan = t.constant(plan);
            let w = t.mul(zeta, plan)?;
            let s = t.sum_axis(w, 1)?;
            t.reshape(s, &[np, 1])
        }
        Strategy::Gr => unreachable!("handled above"),
    }
}

/// Optimal plans `[P, |sup|·|qry|]` for every pair, computed from current
/// values and treated as constants.
fn transport_plans(t: &Tape, sup: &[Var], qry: &[Var], pairs: &[(usize, usize)], zeta: Var) -> Result<Tensor> {
    let (r, c) = (sup.len(), qry.len());
    let zv = t.value(zeta);
    let rep = |v: Var, row: usize| -> &[f64] {
        let x = t.value(v);
        let per = x.numel() / x.shape()[0];
        &x.data()[row * per..(row + 1) * per]
    };
    let mut out = Vec::with_capacity(pairs.len() * r * c);
    for (pi, &(n, q)) in pairs.iter().enumerate() {
        let sreps: Vec<&[f64]> = sup.iter().map(|&v| rep(v, n)).collect();
        let qreps: Vec<&[f64]> = qry.iter().map(|&v| rep(v, q)).collect();
        let row = marginals(&sreps, &qreps);
        let col = marginals(&qreps, &sreps);
        let cost: Vec<f64> = zv.data()[pi * r * c..(pi + 1) * r * c].iter().map(|z| 1.0 - z).collect();
        let sol = solve_ot(&Tensor::new(vec![r, c], cost)?, &row, &col)?;
        out.extend_from_slice(sol.plan.data());
    }
    Tensor::new(vec![pairs.len(), r * c], out)
}

/// `Ω_i = max(0, ⟨ψ_i, mean_j ψ*_j⟩)`.
fn marginals(own: &[&[f64]], other: &[&[f64]]) -> Vec<f64> {
    let len = other[0].len();
    let mut mean = vec![0.0; len];
    for o in other {
        for (m, v) in mean.iter_mut().zip(o.iter()) {
            *m += v / other.len() as f64;
        }
    }
    own.iter()
        .map(|x| x.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>().max(0.0))
        .collect()
}
