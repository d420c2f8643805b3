//! Graph matching: a small GNN over the support and query scale nodes of one
//! pair.
//!
//! Node features are vectorized pooled representations. The adjacency is the
//! cosine similarity of node features times an RBF prior on the scale gap,
//! `exp(−(s−s′)²/(2σ′²))` with `σ′ = (S−1)/3`. Two propagation layers
//! `H ← ReLU(A H W)` are followed by an MLP readout with a sigmoid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::simnet::Dense;
use crate::tensor::{Tape, Tensor, Var};

/// Hidden width of the readout MLP.
pub const READOUT_HIDDEN: usize = 32;

/// `σ′ = (S − 1)/3`.
pub fn rbf_sigma(num_scales: usize) -> f64 {
    num_scales.saturating_sub(1) as f64 / 3.0
}

/// RBF prior between scale indices `s` and `s2` for `num_scales` scales.
pub fn rbf_prior(s: usize, s2: usize, num_scales: usize) -> f64 {
    if s == s2 {
        return 1.0;
    }
    let gap = s.abs_diff(s2) as f64;
    let sigma = rbf_sigma(num_scales);
    (-(gap * gap) / (2.0 * sigma * sigma)).exp()
}

/// Prior matrix over `nodes` nodes whose scale index is `node % num_scales`.
pub fn prior_matrix(nodes: usize, num_scales: usize) -> Tensor {
    let mut m = Tensor::zeros(&[nodes, nodes]);
    for i in 0..nodes {
        for j in 0..nodes {
            m.set(&[i, j], rbf_prior(i % num_scales, j % num_scales, num_scales));
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct GraphMatcher {
    nodes: usize,
    num_scales: usize,
    features: usize,
    hidden: usize,
    layers: [ParamId; 2],
    fc1: Dense,
    fc2: Dense,
}

impl GraphMatcher {
    /// `nodes` is the node count per pair (`2S`, or `2DS` across levels) and
    /// `features` the node feature length `K²`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        nodes: usize,
        num_scales: usize,
        features: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w0 = store.add(
            format!("{prefix}.w0"),
            Tensor::randn(&[features, hidden], (2.0 / features as f64).sqrt(), rng),
        );
        let w1 = store.add(
            format!("{prefix}.w1"),
            Tensor::randn(&[hidden, hidden], (2.0 / hidden as f64).sqrt(), rng),
        );
        let fc1 = Dense::new(store, &format!("{prefix}.fc1"), nodes * hidden, READOUT_HIDDEN, 2.0, rng);
        let fc2 = Dense::new(store, &format!("{prefix}.fc2"), READOUT_HIDDEN, 1, 1.0, rng);
        Self {
            nodes,
            num_scales,
            features,
            hidden,
            layers: [w0, w1],
            fc1,
            fc2,
        }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Adjacency `[P, V, V]` for node features `[P, V, F]`.
    pub fn adjacency(&self, t: &mut Tape, h: Var) -> Result<Var> {
        let (p, v, f) = self.check(t, h)?;
        let sq = t.square(h)?;
        let norms = t.sum_axis(sq, 2)?;
        let norms = t.add_scalar(norms, 1e-24);
        let inv = t.pow_scalar(norms, -0.5)?;
        let inv = t.reshape(inv, &[p * v])?;
        let flat = t.reshape(h, &[p * v, f])?;
        let unit = t.scale_items(flat, inv)?;
        let unit = t.reshape(unit, &[p, v, f])?;
        let cos = t.batch_gram(unit)?;
        let prior = prior_matrix(v, self.num_scales);
        let mut tiled = Vec::with_capacity(p * v * v);
        for _ in 0..p {
            tiled.extend_from_slice(prior.data());
        }
        let prior = t.constant(Tensor::new(vec![p, v, v], tiled)?);
        t.mul(cos, prior)
    }

    /// Node states after both propagation layers, `[P, V, hidden]`.
    pub fn propagate(&self, t: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let (n, v, _) = self.check(t, h)?;
        let adj = self.adjacency(t, h)?;
        let mut x = h;
        for &w in &self.layers {
            let mixed = t.batch_matmul(adj, x)?;
            let width = t.shape(mixed)[2];
            let flat = t.reshape(mixed, &[n * v, width])?;
            let y = t.matmul(flat, p.var(w))?;
            let y = t.relu(y);
            x = t.reshape(y, &[n, v, self.hidden])?;
        }
        Ok(x)
    }

    /// Scores `[P]` in (0,1) for node features `[P, V, F]`.
    pub fn score(&self, t: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let (n, v, _) = self.check(t, h)?;
        let x = self.propagate(t, p, h)?;
        let x = t.reshape(x, &[n, v * self.hidden])?;
        let x = self.fc1.forward(t, p, x)?;
        let x = t.relu(x);
        let x = self.fc2.forward(t, p, x)?;
        let x = t.sigmoid(x);
        t.reshape(x, &[n])
    }

    fn check(&self, t: &Tape, h: Var) -> Result<(usize, usize, usize)> {
        match *t.shape(h) {
            [p, v, f] if v == self.nodes && f == self.features => Ok((p, v, f)),
            ref s => Err(Error::dim(format!(
                "graph matcher expects [P,{},{}] node features, got {s:?}",
                self.nodes, self.features
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rbf_values() {
        assert_eq!(rbf_prior(2, 2, 3), 1.0);
        assert!((rbf_prior(0, 2, 3) - (-4.5f64).exp()).abs() < 1e-15);
        assert!((rbf_prior(0, 2, 3) - 0.011109).abs() < 1e-6);
        for s in 2..=4 {
            assert!((rbf_sigma(s) - (s - 1) as f64 / 3.0).abs() < 1e-15);
            assert!((rbf_prior(0, s - 1, s) - (-4.5f64).exp()).abs() < 1e-12);
            for gap in 1..s {
                assert!(rbf_prior(0, gap, s) < rbf_prior(0, gap - 1, s));
            }
        }
        assert_eq!(rbf_prior(0, 0, 1), 1.0);
    }

    #[test]
    fn adjacency_is_exactly_symmetric() {
        let mut store = ParamStore::new();
        let g = GraphMatcher::new(&mut store, "gr", 6, 3, 4, 5, &mut ChaCha8Rng::seed_from_u64(1));
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let h = t.constant(Tensor::uniform(&[2, 6, 4], -1.0, 1.0, &mut r));
        let a = g.adjacency(&mut t, h).unwrap();
        let a = t.value(a);
        for p in 0..2 {
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(a.at(&[p, i, j]), a.at(&[p, j, i]));
                }
            }
        }
    }

    #[test]
    fn swapping_support_and_query_blocks_permutes_node_states() {
        let mut store = ParamStore::new();
        let g = GraphMatcher::new(&mut store, "gr", 4, 2, 3, 5, &mut ChaCha8Rng::seed_from_u64(3));
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::uniform(&[1, 4, 3], 0.0, 1.0, &mut r);
        let mut swapped = h.clone();
        swapped.data_mut()[..6].copy_from_slice(&h.data()[6..]);
        swapped.data_mut()[6..].copy_from_slice(&h.data()[..6]);
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let v = t.constant(x.clone());
            let a = g.adjacency(&mut t, v).unwrap();
            let s = g.propagate(&mut t, &p, v).unwrap();
            (t.value(a).clone(), t.value(s).clone())
        };
        let (a, s) = run(&h);
        let (a2, s2) = run(&swapped);
        let perm = [2, 3, 0, 1];
        for i in 0..4 {
            for j in 0..4 {
                assert!((a2.at(&[0, i, j]) - a.at(&[0, perm[i], perm[j]])).abs() < 1e-14);
            }
            for k in 0..5 {
                assert!((s2.at(&[0, i, k]) - s.at(&[0, perm[i], k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scores_are_probabilities() {
        let mut store = ParamStore::new();
        let g = GraphMatcher::new(&mut store, "gr", 4, 2, 9, 6, &mut ChaCha8Rng::seed_from_u64(5));
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let h = t.constant(Tensor::uniform(&[3, 4, 9], 0.0, 1.0, &mut r));
        let z = g.score(&mut t, &p, h).unwrap();
        assert!(t.value(z).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let bad = t.constant(Tensor::zeros(&[3, 5, 9]));
        assert!(g.score(&mut t, &p, bad).is_err());
    }
}
