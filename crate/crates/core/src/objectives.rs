//! Episode losses and the inference rule.
//!
//! Score tables share one layout, `[Nq, X, G, T]`: queries, compared items
//! (class prototypes or individual support samples), groups (levels) and
//! per-group terms (scale pairs or matched combinations).

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One-hot targets `[Nq, X]`: `δ(item_class[x] − query_class[q])`.
///
/// Errors if some query has no item of its class.
pub fn targets(query_class: &[usize], item_class: &[usize]) -> Result<Tensor> {
    let (nq, nx) = (query_class.len(), item_class.len());
    let mut out = Tensor::zeros(&[nq, nx]);
    for (q, &c) in query_class.iter().enumerate() {
        let mut hit = false;
        for (x, &ic) in item_class.iter().enumerate() {
            if ic == c {
                out.set(&[q, x], 1.0);
                hit = true;
            }
        }
        if !hit {
            return Err(Error::Episode(format!("query {q} has class {c}, absent from the episode")));
        }
    }
    Ok(out)
}

/// `1/(s s′)` for 1-based scale indices, in `(s, s′)` row-major order.
pub fn scale_pair_weights(num_scales: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(num_scales * num_scales);
    for s in 1..=num_scales {
        for s2 in 1..=num_scales {
            w.push(1.0 / (s * s2) as f64);
        }
    }
    w
}

/// `mean_q Σ_x Σ_g Σ_t w_t (ζ − δ)²` for scores `[Nq, X, G, T]`.
pub fn weighted_mse(t: &mut Tape, scores: Var, targets: &Tensor, weights: &[f64]) -> Result<Var> {
    let shape = t.shape(scores).to_vec();
    let [nq, nx, ng, nt] = shape[..] else {
        return Err(Error::dim(format!("score table must be [Nq,X,G,T], got {shape:?}")));
    };
    if targets.shape() != [nq, nx] || weights.len() != nt {
        return Err(Error::dim(format!(
            "targets {:?} and {} weights do not fit scores {shape:?}",
            targets.shape(),
            weights.len()
        )));
    }
    if nq == 0 {
        return Err(Error::EmptyInput("episode has no queries".into()));
    }
    let mut tgt = Vec::with_capacity(nq * nx * ng * nt);
    let mut wts = Vec::with_capacity(tgt.capacity());
    for &d in targets.data() {
        for _ in 0..ng {
            tgt.extend(std::iter::repeat_n(d, nt));
            wts.extend_from_slice(weights);
        }
    }
    let tgt = t.constant(Tensor::new(shape.clone(), tgt)?);
    let wts = t.constant(Tensor::new(shape, wts)?);
    let diff = t.sub(scores, tgt)?;
    let sq = t.square(diff)?;
    let weighted = t.mul(sq, wts)?;
    let total = t.sum(weighted);
    Ok(t.mul_scalar(total, 1.0 / nq as f64))
}

/// Per-level prototype loss on `[Nq, L, D]` scores.
pub fn loss_supervised(t: &mut Tape, scores: Var, query_class: &[usize], class_labels: &[usize]) -> Result<Var> {
    let s = t.shape(scores).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("supervised scores must be [Nq,L,D], got {s:?}")));
    }
    let z = t.reshape(scores, &[s[0], s[1], s[2], 1])?;
    weighted_mse(t, z, &targets(query_class, class_labels)?, &[1.0])
}

/// Scale-pair weighted loss on `[Nq, L, D, S²]` scores.
pub fn loss_scalewise(
    t: &mut Tape,
    scores: Var,
    query_class: &[usize],
    class_labels: &[usize],
    num_scales: usize,
) -> Result<Var> {
    weighted_mse(t, scores, &targets(query_class, class_labels)?, &scale_pair_weights(num_scales))
}

/// Loss over matched per-support scores `[Nq, Ns, G, T]`; every matched term
/// counts once.
pub fn loss_matched(t: &mut Tape, scores: Var, query_class: &[usize], support_class: &[usize]) -> Result<Var> {
    let nt = *t.shape(scores).last().unwrap_or(&0);
    weighted_mse(t, scores, &targets(query_class, support_class)?, &vec![1.0; nt])
}

/// Joint level/scale label, 0-based: `d·S + s`.
pub fn joint_label(level: usize, scale: usize, num_scales: usize) -> usize {
    level * num_scales + scale
}

/// Mean softmax cross-entropy of logits `[B, C]` against `labels`.
pub fn loss_valsd(t: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = t.shape(logits).to_vec();
    let [b, c] = shape[..] else {
        return Err(Error::dim(format!("logits must be [B,C], got {shape:?}")));
    };
    if labels.len() != b || b == 0 {
        return Err(Error::dim(format!("{} labels for {b} logit rows", labels.len())));
    }
    let mut pick = Tensor::zeros(&[b, c]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::dim(format!("label {l} out of range for {c} classes")));
        }
        pick.set(&[i, l], 1.0);
    }
    let lp = t.log_softmax(logits)?;
    let pick = t.constant(pick);
    let chosen = t.mul(lp, pick)?;
    let total = t.sum(chosen);
    Ok(t.mul_scalar(total, -1.0 / b as f64))
}

/// `Σ_d ‖ζ_d − 1‖² + ‖ζ*_d − 1‖² + ‖ζ′_d‖²`.
pub fn loss_unsupervised(t: &mut Tape, zeta: &[Var], zeta_star: &[Var], zeta_cross: &[Var]) -> Result<Var> {
    if zeta.len() != zeta_star.len() || zeta.len() != zeta_cross.len() || zeta.is_empty() {
        return Err(Error::dim("contrastive loss needs one matrix of each kind per level"));
    }
    let mut terms = Vec::with_capacity(3 * zeta.len());
    for d in 0..zeta.len() {
        for (m, target) in [(zeta[d], 1.0), (zeta_star[d], 1.0), (zeta_cross[d], 0.0)] {
            let e = t.add_scalar(m, -target);
            let sq = t.square(e)?;
            terms.push(t.sum(sq));
        }
    }
    let mut acc = terms[0];
    for &v in &terms[1..] {
        acc = t.add(acc, v)?;
    }
    Ok(acc)
}

/// `argmin_l Σ_d (S_l^{(d)} − 1)²` over a `[L, D]` table; ties go to the
/// lowest index.
pub fn infer(votes: &Tensor) -> Result<usize> {
    let [l, d] = votes.shape()[..] else {
        return Err(Error::dim("vote table must be [L,D]"));
    };
    if l == 0 {
        return Err(Error::EmptyInput("no classes to choose from".into()));
    }
    let cost = |i: usize| -> f64 { (0..d).map(|k| (votes.at(&[i, k]) - 1.0).powi(2)).sum() };
    let mut best = 0;
    let mut best_cost = cost(0);
    for i in 1..l {
        let c = cost(i);
        if c < best_cost {
            best = i;
            best_cost = c;
        }
    }
    Ok(best)
}

/// Collapses a `[Nq, X, G, T]` score table to per-class level votes
/// `[Nq, L, G]`: a `weights`-weighted average over terms, then a plain mean
/// over the items of each class.
pub fn level_votes(scores: &Tensor, item_class: &[usize], way: usize, weights: &[f64]) -> Result<Tensor> {
    let [nq, nx, ng, nt] = scores.shape()[..] else {
        return Err(Error::dim("score table must be [Nq,X,G,T]"));
    };
    if item_class.len() != nx || weights.len() != nt || item_class.iter().any(|&c| c >= way) {
        return Err(Error::dim("item classes or weights do not fit the score table"));
    }
    let wsum: f64 = weights.iter().sum();
    let mut counts = vec![0usize; way];
    for &c in item_class {
        counts[c] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::Episode("some class has no items".into()));
    }
    let mut out = Tensor::zeros(&[nq, way, ng]);
    for q in 0..nq {
        for (x, &c) in item_class.iter().enumerate() {
            for g in 0..ng {
                let base = ((q * nx + x) * ng + g) * nt;
                let v: f64 = scores.data()[base..base + nt].iter().zip(weights).map(|(a, w)| a * w).sum();
                let cur = out.at(&[q, c, g]);
                out.set(&[q, c, g], cur + v / wsum / counts[c] as f64);
            }
        }
    }
    Ok(out)
}

/// Predicted class index per query for `[Nq, L, G]` votes.
pub fn predict(votes: &Tensor) -> Result<Vec<usize>> {
    let [nq, l, g] = votes.shape()[..] else {
        return Err(Error::dim("votes must be [Nq,L,G]"));
    };
    (0..nq)
        .map(|q| {
            let row = Tensor::new(vec![l, g], votes.data()[q * l * g..(q + 1) * l * g].to_vec())?;
            infer(&row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t).unwrap();
        t.value(v).item().unwrap()
    }

    #[test]
    fn supervised_examples() {
        let classes = [0, 1, 2, 3, 4];
        let half = Tensor::full(&[1, 5, 1], 0.5);
        assert!((eval(|t| {
            let z = t.constant(half.clone());
            loss_supervised(t, z, &[2], &classes)
        }) - 1.25)
            .abs()
            < 1e-15);
        let mut exact = Tensor::zeros(&[2, 5, 3]);
        for d in 0..3 {
            exact.set(&[0, 2, d], 1.0);
            exact.set(&[1, 4, d], 1.0);
        }
        assert_eq!(
            eval(|t| {
                let z = t.constant(exact.clone());
                loss_supervised(t, z, &[2, 4], &classes)
            }),
            0.0
        );
        let z = Tensor::zeros(&[1, 5, 1]);
        let mut t = Tape::new();
        let zv = t.constant(z);
        assert!(matches!(loss_supervised(&mut t, zv, &[7], &classes), Err(Error::Episode(_))));
    }

    #[test]
    fn supervised_matches_direct_double_sum() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let (nq, l, d) = (4, 5, 3);
        let z = Tensor::uniform(&[nq, l, d], 0.0, 1.0, &mut r);
        let qc: Vec<usize> = (0..nq).map(|_| r.random_range(0..l)).collect();
        let classes: Vec<usize> = (0..l).collect();
        let mut want = 0.0;
        for q in 0..nq {
            for c in 0..l {
                for k in 0..d {
                    let delta = if c == qc[q] { 1.0 } else { 0.0 };
                    want += (z.at(&[q, c, k]) - delta).powi(2);
                }
            }
        }
        want /= nq as f64;
        let got = eval(|t| {
            let v = t.constant(z.clone());
            loss_supervised(t, v, &qc, &classes)
        });
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn scalewise_weights() {
        let classes = [0, 1];
        let z = Tensor::zeros(&[1, 2, 1, 4]);
        let got = eval(|t| {
            let v = t.constant(z.clone());
            loss_scalewise(t, v, &[0], &classes, 2)
        });
        assert!((got - 2.25).abs() < 1e-15);

        let mut r = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::uniform(&[3, 5, 2], 0.0, 1.0, &mut r);
        let classes: Vec<usize> = (0..5).collect();
        let a = eval(|t| {
            let v = t.constant(z.clone());
            loss_supervised(t, v, &[0, 3, 4], &classes)
        });
        let b = eval(|t| {
            let v = t.constant(z.reshape(&[3, 5, 2, 1]).unwrap());
            loss_scalewise(t, v, &[0, 3, 4], &classes, 1)
        });
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn matched_equals_brute_force() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (nq, way, shot, g, tt) = (3, 3, 2, 2, 4);
        let z = Tensor::uniform(&[nq, way * shot, g, tt], 0.0, 1.0, &mut r);
        let sc: Vec<usize> = (0..way * shot).map(|i| i / shot).collect();
        let qc = [2, 0, 1];
        let mut want = 0.0;
        for q in 0..nq {
            for n in 0..way * shot {
                for d in 0..g {
                    for k in 0..tt {
                        let delta = if sc[n] == qc[q] { 1.0 } else { 0.0 };
                        want += (z.at(&[q, n, d, k]) - delta).powi(2);
                    }
                }
            }
        }
        want /= nq as f64;
        let got = eval(|t| {
            let v = t.constant(z.clone());
            loss_matched(t, v, &qc, &sc)
        });
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn valsd_values() {
        let u = Tensor::full(&[4, 9], 0.3);
        let got = eval(|t| {
            let v = t.constant(u.clone());
            loss_valsd(t, v, &[0, 3, 8, 5])
        });
        assert!((got - 9f64.ln()).abs() < 1e-12);
        assert!((9f64.ln() - 2.1972).abs() < 1e-4);
        let mut sharp = Tensor::zeros(&[2, 4]);
        sharp.set(&[0, 1], 60.0);
        sharp.set(&[1, 3], 60.0);
        let got = eval(|t| {
            let v = t.constant(sharp.clone());
            loss_valsd(t, v, &[1, 3])
        });
        assert!(got < 1e-20);

        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[3, 5], -2.0, 2.0, &mut r);
        let labels = [4, 0, 2];
        let mut want = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..5).map(|j| x.at(&[i, j])).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[l];
        }
        want /= 3.0;
        let got = eval(|t| {
            let v = t.constant(x.clone());
            loss_valsd(t, v, &labels)
        });
        assert!((got - want).abs() < 1e-12);
        assert_eq!(joint_label(2, 2, 3), 8);
    }

    #[test]
    fn unsupervised_values() {
        let opt = eval(|t| {
            let ones = t.constant(Tensor::full(&[3, 3], 1.0));
            let zero = t.constant(Tensor::zeros(&[3, 3]));
            loss_unsupervised(t, &[ones], &[ones], &[zero])
        });
        assert_eq!(opt, 0.0);
        let half = eval(|t| {
            let h = t.constant(Tensor::full(&[2, 2], 0.5));
            loss_unsupervised(t, &[h], &[h], &[h])
        });
        assert!((half - 3.0).abs() < 1e-15);

        let mut r = ChaCha8Rng::seed_from_u64(5);
        let ms: Vec<Tensor> = (0..6).map(|_| Tensor::uniform(&[4, 4], 0.0, 1.0, &mut r)).collect();
        let mut want = 0.0;
        for d in 0..2 {
            want += ms[3 * d].data().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>();
            want += ms[3 * d + 1].data().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>();
            want += ms[3 * d + 2].data().iter().map(|v| v * v).sum::<f64>();
        }
        let got = eval(|t| {
            let v: Vec<Var> = ms.iter().map(|m| t.constant(m.clone())).collect();
            loss_unsupervised(t, &[v[0], v[3]], &[v[1], v[4]], &[v[2], v[5]])
        });
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let x = Tensor::uniform(&[2, 3, 2, 4], 0.05, 0.95, &mut r);
            let sc = [0, 1, 2];
            let qc = [1, 2];
            let e1 = check_gradients(|t, v| loss_scalewise(t, v, &qc, &sc, 2), &x, 1e-6).unwrap();
            let e2 = check_gradients(|t, v| loss_matched(t, v, &qc, &sc), &x, 1e-6).unwrap();
            let x3 = x.reshape(&[2, 3, 8]).unwrap();
            let e3 = check_gradients(|t, v| loss_supervised(t, v, &qc, &sc), &x3, 1e-6).unwrap();
            let logits = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut r);
            let e4 = check_gradients(|t, v| loss_valsd(t, v, &[0, 5, 2, 2]), &logits, 1e-6).unwrap();
            let e5 = check_gradients(
                |t, v| {
                    let c = t.mul_scalar(v, 0.5);
                    loss_unsupervised(t, &[v], &[c], &[v])
                },
                &Tensor::uniform(&[3, 3], 0.0, 1.0, &mut r),
                1e-6,
            )
            .unwrap();
            for e in [e1, e2, e3, e4, e5] {
                assert!(e < 1e-6, "{e}");
            }
        }
    }

    #[test]
    fn inference_rule() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let l = r.random_range(2..7);
            let d = r.random_range(1..4);
            let v = Tensor::uniform(&[l, d], 0.0, 1.0, &mut r);
            let got = infer(&v).unwrap();
            let costs: Vec<f64> = (0..l)
                .map(|i| (0..d).map(|k| (v.at(&[i, k]) - 1.0).powi(2)).sum())
                .collect();
            assert!(costs.iter().all(|&c| costs[got] <= c));
            if d == 1 {
                let arg = (0..l).fold(0, |b, i| if v.at(&[i, 0]) > v.at(&[b, 0]) { i } else { b });
                assert_eq!(got, arg);
            }
        }
        let mut v = Tensor::full(&[3, 2], 0.4);
        v.set(&[1, 0], 1.0);
        v.set(&[1, 1], 1.0);
        assert_eq!(infer(&v).unwrap(), 1);
        assert_eq!(infer(&Tensor::full(&[4, 2], 0.5)).unwrap(), 0);
    }

    #[test]
    fn votes_average_items_and_terms() {
        let mut s = Tensor::zeros(&[1, 4, 1, 2]);
        s.data_mut().copy_from_slice(&[0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 0.0, 0.5]);
        let v = level_votes(&s, &[0, 0, 1, 1], 2, &[1.0, 1.0]).unwrap();
        assert!((v.at(&[0, 0, 0]) - 0.5).abs() < 1e-15);
        assert!((v.at(&[0, 1, 0]) - 0.625).abs() < 1e-15);
        assert_eq!(predict(&v).unwrap(), vec![1]);
        let w = level_votes(&s, &[0, 0, 1, 1], 2, &[1.0, 0.0]).unwrap();
        assert!((w.at(&[0, 0, 0]) - 0.4).abs() < 1e-15);
        assert!(level_votes(&s, &[0, 0, 0, 0], 2, &[1.0, 1.0]).is_err());
    }
}
