//! Oracle suites run by `mlso verify`.
//!
//! Each suite checks an identity or optimality property against an
//! independent computation and reports a one-line summary.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matching::{self, cosine_rows, rbf_prior, rbf_sigma, GraphMatcher};
use crate::objectives;
use crate::params::ParamStore;
use crate::reldesc;
use crate::simnet::{SimNetConfig, SimilarityNet};
use crate::sop::{self, PnConfig, PnKind};
use crate::tensor::{check_gradients, OpKind, Tape, Tensor, Var};
use crate::Result;

/// Max deviation between SigmE at the frozen slope ratio and hard
/// MaxExp(±) at η = 20, ρ = 0.5, from the grid-search oracle.
pub const SIGME_ORACLE_DEVIATION: f64 = 0.034262;

/// Finite-difference relative error bound.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Every suite, in report order. `fault` breaks one backward rule so the
/// gradient suite can be shown to catch it.
pub fn run_all(fault: Option<OpKind>) -> Vec<SuiteResult> {
    vec![
        kernel_identity(50, 1),
        multinomial_identity(),
        pn_bound(),
        soft_to_hard(),
        gradients(fault),
        ot_optimality(200, 100, 2),
        gr_adjacency(3),
        inference(1000, 4),
    ]
}

/// `⟨F(Φ_A), F(Φ_B)⟩ = (1/(N N*)) Σ Σ ⟨φ_n, φ*_m⟩²` on random maps.
pub fn kernel_identity(trials: usize, seed: u64) -> SuiteResult {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let k = r.random_range(1..=8);
        let (na, nb) = (r.random_range(1..=6), r.random_range(1..=6));
        let a = Tensor::randn(&[k, na], 1.0, &mut r);
        let b = Tensor::randn(&[k, nb], 1.0, &mut r);
        let fa = eval(sop::autocorrelation, &a);
        let fb = eval(sop::autocorrelation, &b);
        let lhs: f64 = fa.data().iter().zip(fb.data()).map(|(x, y)| x * y).sum();
        let mut rhs = 0.0;
        for n in 0..na {
            for m in 0..nb {
                let dot: f64 = (0..k).map(|i| a.at(&[i, n]) * b.at(&[i, m])).sum();
                rhs += dot * dot;
            }
        }
        rhs /= (na * nb) as f64;
        worst = worst.max((lhs - rhs).abs());
    }
    SuiteResult::new("kernel-identity", worst < 1e-10, format!("{trials} pairs, max |diff| {worst:.3e}"))
}

fn eval(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    match f(&mut t, v) {
        Ok(out) => t.value(out).clone(),
        Err(_) => Tensor::full(x.shape(), f64::NAN),
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Brute-force multinomial sum for "at least one co-occurrence minus at
/// least one negative co-occurrence" in `n` trials.
pub fn multinomial_sum(n: usize, p: f64, q: f64) -> f64 {
    let rest = 1.0 - p - q;
    let mut total = 0.0;
    for a in 1..=n {
        for b in 0..=(n - a) {
            let coef = binomial(n, a) * binomial(n - a, b);
            let c = n - a - b;
            total += coef * (p.powi(a as i32) * q.powi(b as i32) - p.powi(b as i32) * q.powi(a as i32)) * rest.powi(c as i32);
        }
    }
    total
}

pub fn multinomial_identity() -> SuiteResult {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=6 {
        for i in 0..=10 {
            for j in 0..=(10 - i) {
                let (p, q) = (i as f64 / 10.0, j as f64 / 10.0);
                let closed = (1.0 - q).powi(n as i32) - (1.0 - p).powi(n as i32);
                worst = worst.max((closed - multinomial_sum(n, p, q)).abs());
                cases += 1;
            }
        }
    }
    SuiteResult::new("multinomial-identity", worst < 1e-9, format!("{cases} cases, max |diff| {worst:.3e}"))
}

pub fn pn_bound() -> SuiteResult {
    let mut violations = 0;
    for eta in [5.0, 20.0, 50.0] {
        for i in 0..=1000 {
            let p = i as f64 / 1000.0;
            if sop::cooccurrence(p, eta) > sop::maxexp(p, eta) {
                violations += 1;
            }
        }
    }
    SuiteResult::new("pn-bound", violations == 0, format!("{violations} violations on 3x1001 points"))
}

/// Max deviation between soft and hard MaxExp(±) on a 1e-3 grid over [−1, 1].
pub fn soft_hard_deviation(eta: f64, rho: f64, alpha: f64) -> f64 {
    (0..=2000)
        .map(|i| {
            let p = -1.0 + i as f64 / 1000.0;
            (sop::maxexp_pm_soft(p, eta, rho, alpha) - sop::maxexp_pm_hard(p, eta, rho)).abs()
        })
        .fold(0.0, f64::max)
}

/// Max deviation between SigmE at slope `ratio·η` and hard MaxExp(±).
pub fn sigme_deviation(eta: f64, ratio: f64) -> f64 {
    (0..=2000)
        .map(|i| {
            let p = -1.0 + i as f64 / 1000.0;
            (sop::sigme(p, ratio * eta) - sop::maxexp_pm_hard(p, eta, 0.5)).abs()
        })
        .fold(0.0, f64::max)
}

pub fn soft_to_hard() -> SuiteResult {
    let devs: Vec<f64> = [100.0, 400.0, 1600.0]
        .iter()
        .map(|&a| soft_hard_deviation(20.0, 0.5, a))
        .collect();
    let decreasing = devs.windows(2).all(|w| w[1] < w[0]);
    let sig = sigme_deviation(20.0, sop::SIGME_RATIO);
    let ok = decreasing && sig <= 1.5 * SIGME_ORACLE_DEVIATION;
    SuiteResult::new(
        "soft-hard-convergence",
        ok,
        format!(
            "soft deviations {:.3e} {:.3e} {:.3e}; sigme deviation {sig:.6} (limit {:.6})",
            devs[0],
            devs[1],
            devs[2],
            1.5 * SIGME_ORACLE_DEVIATION
        ),
    )
}

pub type GradFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// A scalar function of one tensor whose tape gradient is checked.
pub struct GradCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    /// Sampling ranges, cycled through by point index.
    pub ranges: Vec<(f64, f64)>,
    pub f: GradFn,
}

impl GradCase {
    pub fn point(&self, i: usize, seed: u64) -> Tensor {
        let (lo, hi) = self.ranges[i % self.ranges.len()];
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1009).wrapping_add(i as u64));
        Tensor::uniform(&self.shape, lo, hi, &mut r)
    }
}

fn case(name: &'static str, shape: &[usize], ranges: &[(f64, f64)], f: GradFn) -> GradCase {
    GradCase {
        name,
        shape: shape.to_vec(),
        ranges: ranges.to_vec(),
        f,
    }
}

fn weighted(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.4).collect();
    let w = t.constant(Tensor::new(shape, w)?);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn other(t: &mut Tape, shape: &[usize], seed: u64) -> Var {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    t.constant(Tensor::uniform(shape, 0.5, 1.5, &mut r))
}

const AWAY_FROM_ONE: [(f64, f64); 2] = [(0.05, 0.9), (1.15, 2.0)];

/// Every differentiable tape operation.
pub fn op_cases() -> Vec<GradCase> {
    let r = &AWAY_FROM_ONE;
    vec![
        case("add", &[3, 4], r, Box::new(|t, x| { let o = other(t, &[3, 4], 1); let y = t.add(x, o)?; weighted(t, y) })),
        case("sub", &[3, 4], r, Box::new(|t, x| { let o = other(t, &[3, 4], 2); let y = t.sub(o, x)?; weighted(t, y) })),
        case("mul", &[3, 4], r, Box::new(|t, x| { let o = other(t, &[3, 4], 3); let y = t.mul(x, o)?; weighted(t, y) })),
        case("div", &[3, 4], r, Box::new(|t, x| { let o = other(t, &[3, 4], 4); let a = t.div(x, o)?; let b = t.div(o, x)?; let y = t.add(a, b)?; weighted(t, y) })),
        case("add_scalar", &[5], r, Box::new(|t, x| { let y = t.add_scalar(x, 0.7); weighted(t, y) })),
        case("mul_scalar", &[5], r, Box::new(|t, x| { let y = t.mul_scalar(x, -1.3); weighted(t, y) })),
        case("pow_scalar", &[5], r, Box::new(|t, x| { let y = t.pow_scalar(x, 2.5)?; weighted(t, y) })),
        case("min_scalar", &[6], r, Box::new(|t, x| { let y = t.min_scalar(x, 1.0); weighted(t, y) })),
        case("max_scalar", &[6], r, Box::new(|t, x| { let y = t.max_scalar(x, 1.0); weighted(t, y) })),
        case("exp", &[5], r, Box::new(|t, x| { let y = t.exp(x); weighted(t, y) })),
        case("log", &[5], r, Box::new(|t, x| { let y = t.log(x)?; weighted(t, y) })),
        case("relu", &[6], r, Box::new(|t, x| { let c = t.add_scalar(x, -1.0); let y = t.relu(c); weighted(t, y) })),
        case("sigmoid", &[5], r, Box::new(|t, x| { let y = t.sigmoid(x); weighted(t, y) })),
        case("softplus", &[5], r, Box::new(|t, x| { let y = t.softplus(x); weighted(t, y) })),
        case("square", &[5], r, Box::new(|t, x| { let y = t.square(x)?; weighted(t, y) })),
        case("matmul", &[3, 4], r, Box::new(|t, x| { let o = other(t, &[4, 2], 5); let y = t.matmul(x, o)?; weighted(t, y) })),
        case("batch_matmul", &[2, 3, 4], r, Box::new(|t, x| { let o = other(t, &[2, 4, 2], 6); let a = t.batch_matmul(x, o)?; weighted(t, a) })),
        case("batch_gram", &[2, 3, 4], r, Box::new(|t, x| { let y = t.batch_gram(x)?; weighted(t, y) })),
        case("transpose", &[3, 4], r, Box::new(|t, x| { let y = t.transpose(x)?; weighted(t, y) })),
        case("conv2d", &[2, 2, 5, 5], r, Box::new(|t, x| { let k = other(t, &[3, 2, 3, 3], 7); let y = t.conv2d(x, k, 1, 1)?; weighted(t, y) })),
        case("conv2d_stride2", &[1, 2, 6, 6], r, Box::new(|t, x| { let k = other(t, &[2, 2, 3, 3], 8); let y = t.conv2d(x, k, 2, 0)?; weighted(t, y) })),
        case("max_pool2", &[2, 4, 5], r, Box::new(|t, x| { let y = t.max_pool2(x)?; weighted(t, y) })),
        case("avg_pool2", &[2, 5, 5], r, Box::new(|t, x| { let y = t.avg_pool2(x)?; weighted(t, y) })),
        case("adaptive_avg_pool", &[2, 5, 7], r, Box::new(|t, x| { let y = t.adaptive_avg_pool(x, 3)?; weighted(t, y) })),
        case("adaptive_avg_pool_up", &[1, 2, 2], r, Box::new(|t, x| { let y = t.adaptive_avg_pool(x, 3)?; weighted(t, y) })),
        case("global_avg_pool", &[2, 3, 2, 3], r, Box::new(|t, x| { let y = t.global_avg_pool(x)?; weighted(t, y) })),
        case("sum", &[2, 3], r, Box::new(|t, x| { let s = t.sum(x); t.square(s) })),
        case("mean", &[2, 3], r, Box::new(|t, x| { let s = t.mean(x); t.square(s) })),
        case("sum_axis", &[2, 3, 4], r, Box::new(|t, x| { let y = t.sum_axis(x, 1)?; weighted(t, y) })),
        case("mean_axis", &[2, 3, 4], r, Box::new(|t, x| { let y = t.mean_axis(x, 2)?; weighted(t, y) })),
        case("trace", &[2, 3, 3], r, Box::new(|t, x| { let y = t.trace(x)?; weighted(t, y) })),
        case("scale_items", &[3, 2, 2], r, Box::new(|t, x| { let s = t.sum_axis(x, 2)?; let s = t.sum_axis(s, 1)?; let y = t.scale_items(x, s)?; weighted(t, y) })),
        case("add_row_bias", &[4], r, Box::new(|t, b| { let o = other(t, &[3, 4], 9); let y = t.add_row_bias(o, b)?; let y = t.square(y)?; weighted(t, y) })),
        case("channel_affine", &[3], r, Box::new(|t, s| { let x = other(t, &[2, 3, 2, 2], 10); let sh = t.mul_scalar(s, 0.5); let y = t.channel_affine(x, s, sh)?; let y = t.square(y)?; weighted(t, y) })),
        case("reshape", &[2, 6], r, Box::new(|t, x| { let y = t.reshape(x, &[3, 4])?; let y = t.square(y)?; weighted(t, y) })),
        case("gather", &[3, 2], r, Box::new(|t, x| { let y = t.gather(x, &[2, 0, 2, 1])?; let y = t.square(y)?; weighted(t, y) })),
        case("concat", &[2, 3], r, Box::new(|t, x| { let o = other(t, &[2, 2], 11); let y = t.concat(&[x, o, x], 1)?; let y = t.square(y)?; weighted(t, y) })),
        case("segment_sum", &[5, 2], r, Box::new(|t, x| { let y = t.segment_sum(x, &[1, 0, 1, 2, 0], 3)?; let y = t.square(y)?; weighted(t, y) })),
        case("log_softmax", &[3, 4], r, Box::new(|t, x| { let y = t.log_softmax(x)?; weighted(t, y) })),
    ]
}

/// Pooling, power normalizations, descriptors and the learned heads.
pub fn pipeline_cases() -> Vec<GradCase> {
    let sym = [(-0.3, 0.3)];
    vec![
        case("autocorrelation", &[2, 4, 5], &[(-1.0, 1.0)], Box::new(|t, x| { let m = sop::autocorrelation(t, x)?; weighted(t, m) })),
        case("trace_normalize", &[2, 3, 3], &[(0.1, 1.0)], Box::new(|t, x| { let m = sop::trace_normalize(t, x)?; weighted(t, m) })),
        // kink of min(2m, 1) sits at m = 0.5
        case("pn_maxexp", &[3, 3], &[(0.05, 0.45), (0.55, 0.9)], Box::new(|t, x| { let y = sop::pn_maxexp(t, x, 2.0)?; weighted(t, y) })),
        case("pn_maxexp_pm", &[3, 3], &sym, Box::new(|t, x| { let y = sop::pn_maxexp_pm(t, x, 5.0, 0.5, 100.0)?; weighted(t, y) })),
        case("pn_sigme", &[3, 3], &sym, Box::new(|t, x| { let y = sop::pn_sigme(t, x, 7.0)?; weighted(t, y) })),
        case("pool_sigme", &[2, 3, 4], &[(0.0, 1.0)], Box::new(|t, x| {
            let y = sop::pool(t, x, &PnConfig::with_kind(PnKind::SigmE), None)?;
            weighted(t, y)
        })),
        case("descriptor_otimes_r", &[4, 3, 5], &[(0.0, 1.0)], Box::new(|t, x| {
            let y = reldesc::class_reps(t, reldesc::Descriptor::OtimesR, x, 2, 2, &PnConfig::with_kind(PnKind::SigmE))?;
            weighted(t, y)
        })),
        case("descriptor_otimes_f", &[2, 2, 4], &[(0.0, 1.0)], Box::new(|t, x| {
            let q = other(t, &[2, 2, 4], 12);
            let y = reldesc::full_pairs(t, x, q, 1, &[(0, 0), (1, 1), (1, 0)], &PnConfig::with_kind(PnKind::SigmE))?;
            weighted(t, y)
        })),
        case("cosine_match", &[3, 4], &[(0.1, 1.0)], Box::new(|t, x| {
            let o = other(t, &[3, 4], 13);
            let y = cosine_rows(t, x, o)?;
            weighted(t, y)
        })),
        case("similarity_net", &[2, 2, 4, 4], &[(0.0, 1.0)], Box::new(|t, x| {
            let mut store = ParamStore::new();
            let cfg = SimNetConfig { channels: 3, hidden: 4, grid: 2 };
            let sn = SimilarityNet::new(&mut store, "sn", 2, cfg, &mut ChaCha8Rng::seed_from_u64(14));
            let p = store.bind(t, false);
            let y = sn.relate(t, &p, x)?;
            weighted(t, y)
        })),
        case("graph_matcher", &[2, 4, 4], &[(0.1, 1.0)], Box::new(|t, x| {
            let mut store = ParamStore::new();
            let g = GraphMatcher::new(&mut store, "gr", 4, 2, 4, 3, &mut ChaCha8Rng::seed_from_u64(15));
            let p = store.bind(t, false);
            let y = g.score(t, &p, x)?;
            weighted(t, y)
        })),
    ]
}

/// Every training loss.
pub fn loss_cases() -> Vec<GradCase> {
    let unit = [(0.05, 0.95)];
    vec![
        case("loss_supervised", &[2, 3, 2], &unit, Box::new(|t, x| objectives::loss_supervised(t, x, &[1, 2], &[0, 1, 2]))),
        case("loss_scalewise", &[2, 3, 1, 4], &unit, Box::new(|t, x| objectives::loss_scalewise(t, x, &[0, 2], &[0, 1, 2], 2))),
        case("loss_matched", &[2, 4, 2, 3], &unit, Box::new(|t, x| objectives::loss_matched(t, x, &[1, 0], &[0, 0, 1, 1]))),
        case("loss_valsd", &[4, 6], &[(-2.0, 2.0)], Box::new(|t, x| objectives::loss_valsd(t, x, &[0, 5, 2, 2]))),
        case("loss_unsupervised", &[3, 3], &unit, Box::new(|t, x| {
            let s = t.mul_scalar(x, 0.5);
            let c = t.square(x)?;
            objectives::loss_unsupervised(t, &[x, s], &[s, x], &[c, x])
        })),
    ]
}

/// Worst relative error of a case over `points` random inputs.
pub fn check_case(c: &GradCase, points: usize, fault: Option<OpKind>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..points {
        let x = c.point(i, 17);
        let err = check_gradients(
            |t, v| {
                if let Some(k) = fault {
                    t.inject_fault(k);
                }
                (c.f)(t, v)
            },
            &x,
            1e-6,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn gradients(fault: Option<OpKind>) -> SuiteResult {
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    let mut total = 0;
    for c in op_cases().iter().chain(&pipeline_cases()).chain(&loss_cases()) {
        total += 1;
        match check_case(c, 10, fault) {
            Ok(e) if e < GRAD_TOL => worst = worst.max(e),
            Ok(e) => failed.push(format!("{} ({e:.2e})", c.name)),
            Err(e) => failed.push(format!("{} ({e})", c.name)),
        }
    }
    let detail = if failed.is_empty() {
        format!("{total} cases x 10 points, max rel err {worst:.2e}")
    } else {
        format!("failed: {}", failed.join(", "))
    };
    SuiteResult::new("gradients", failed.is_empty(), detail)
}

/// A random exactly-feasible plan: a convex mix of north-west-corner plans
/// under random row and column orders.
pub fn random_feasible_plan<R: Rng + ?Sized>(row: &[f64], col: &[f64], rng: &mut R) -> Vec<f64> {
    let (r, c) = (row.len(), col.len());
    let mut plan = vec![0.0; r * c];
    let parts = 3;
    let mut weights: Vec<f64> = (0..parts).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    for w in weights {
        let mut ri: Vec<usize> = (0..r).collect();
        let mut ci: Vec<usize> = (0..c).collect();
        ri.shuffle(rng);
        ci.shuffle(rng);
        let mut a: Vec<f64> = row.to_vec();
        let mut b: Vec<f64> = col.to_vec();
        let (mut i, mut j) = (0, 0);
        while i < r && j < c {
            let (ii, jj) = (ri[i], ci[j]);
            let m = a[ii].min(b[jj]);
            plan[ii * c + jj] += w * m;
            a[ii] -= m;
            b[jj] -= m;
            if a[ii] <= b[jj] {
                i += 1;
            } else {
                j += 1;
            }
        }
    }
    plan
}

pub fn ot_optimality(instances: usize, rivals: usize, seed: u64) -> SuiteResult {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_residual: f64 = 0.0;
    let mut beaten = 0;
    for _ in 0..instances {
        let cost = Tensor::uniform(&[3, 3], 0.0, 1.0, &mut r);
        let row = matching::balance_marginal(&(0..3).map(|_| r.random_range(0.01..1.0)).collect::<Vec<_>>());
        let col = matching::balance_marginal(&(0..3).map(|_| r.random_range(0.01..1.0)).collect::<Vec<_>>());
        let sol = match matching::solve_ot(&cost, &row, &col) {
            Ok(s) => s,
            Err(e) => return SuiteResult::new("ot-optimality", false, format!("solver error: {e}")),
        };
        let p = sol.plan.data();
        for i in 0..3 {
            worst_residual = worst_residual.max((p[i * 3..i * 3 + 3].iter().sum::<f64>() - row[i]).abs());
            worst_residual = worst_residual.max(((0..3).map(|k| p[k * 3 + i]).sum::<f64>() - col[i]).abs());
        }
        for _ in 0..rivals {
            let other = random_feasible_plan(&row, &col, &mut r);
            let obj: f64 = other.iter().zip(cost.data()).map(|(a, b)| a * b).sum();
            if obj < sol.objective - 1e-12 {
                beaten += 1;
            }
        }
    }
    let hand = matching::transport(&[0.0, 1.0, 1.0, 0.0], &[0.7, 0.3], &[0.4, 0.6]);
    let hand_ok = hand
        .as_ref()
        .map(|s| s.x.iter().zip([0.4, 0.3, 0.0, 0.3]).all(|(a, b)| (a - b).abs() < 1e-15))
        .unwrap_or(false);
    SuiteResult::new(
        "ot-optimality",
        worst_residual < 1e-8 && beaten == 0 && hand_ok,
        format!(
            "{instances} instances, max residual {worst_residual:.2e}, {beaten} cheaper rivals, 2x2 plan {}",
            if hand_ok { "exact" } else { "wrong" }
        ),
    )
}

pub fn gr_adjacency(seed: u64) -> SuiteResult {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut asym = 0;
    for s in 2..=4 {
        let mut store = ParamStore::new();
        let g = GraphMatcher::new(&mut store, "gr", 2 * s, s, 9, 4, &mut r);
        let mut t = Tape::new();
        let h = t.constant(Tensor::uniform(&[3, 2 * s, 9], -1.0, 1.0, &mut r));
        let a = match g.adjacency(&mut t, h) {
            Ok(a) => t.value(a).clone(),
            Err(e) => return SuiteResult::new("gr-adjacency", false, e.to_string()),
        };
        for p in 0..3 {
            for i in 0..2 * s {
                for j in 0..2 * s {
                    if a.at(&[p, i, j]) != a.at(&[p, j, i]) {
                        asym += 1;
                    }
                }
            }
        }
    }
    let rbf_err = (2..=4)
        .map(|s| (rbf_prior(0, s - 1, s) - (-4.5f64).exp()).abs())
        .fold(0.0, f64::max);
    let sigma_ok = (2..=4).all(|s| rbf_sigma(s) == (s - 1) as f64 / 3.0);
    SuiteResult::new(
        "gr-adjacency",
        asym == 0 && rbf_err < 1e-12 && sigma_ok,
        format!("{asym} asymmetric entries, max-gap prior error {rbf_err:.1e}"),
    )
}

pub fn inference(tables: usize, seed: u64) -> SuiteResult {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut wrong = 0;
    for _ in 0..tables {
        let l = r.random_range(2..=10);
        let d = r.random_range(1..=4);
        let v = Tensor::uniform(&[l, d], 0.0, 1.0, &mut r);
        let Ok(got) = objectives::infer(&v) else {
            wrong += 1;
            continue;
        };
        let mut best = 0;
        let mut best_cost = f64::INFINITY;
        for i in 0..l {
            let c: f64 = (0..d).map(|k| (v.at(&[i, k]) - 1.0).powi(2)).sum();
            if c < best_cost {
                best = i;
                best_cost = c;
            }
        }
        if got != best {
            wrong += 1;
        }
        if d == 1 {
            let arg = (0..l).fold(0, |b, i| if v.at(&[i, 0]) > v.at(&[b, 0]) { i } else { b });
            if got != arg {
                wrong += 1;
            }
        }
    }
    SuiteResult::new("inference", wrong == 0, format!("{tables} tables, {wrong} disagreements"))
}
