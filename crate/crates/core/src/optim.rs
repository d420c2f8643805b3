//! Adam.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; store.len()],
        }
    }

    /// One update; parameters without a gradient keep their value and their
    /// moment estimates.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        for (i, (id, g)) in store.ids().collect::<Vec<_>>().into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != self.m[i].shape() {
                return Err(Error::dim(format!("gradient shape {:?} for parameter {}", g.shape(), store.name(id))));
            }
            self.steps[i] += 1;
            let step = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(step);
            let c2 = 1.0 - beta2.powi(step);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.get_mut(id).data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(vec![1.0, -2.0]));
        let b = store.add("b", Tensor::from_vec(vec![5.0]));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.step(&mut store, &[Some(Tensor::from_vec(vec![3.0, -0.5])), None]).unwrap();
        let got = store.get(a).data();
        assert!((got[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((got[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(store.get(b).data(), &[5.0]);
        assert!(opt.step(&mut store, &[None]).is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::from_vec(vec![3.0, -4.0]));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let g = store.get(x).map(|v| 2.0 * v);
            opt.step(&mut store, &[Some(g)]).unwrap();
        }
        assert!(store.get(x).data().iter().all(|v| v.abs() < 1e-3));
    }
}
