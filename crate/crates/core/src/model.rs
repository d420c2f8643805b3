//! The full few-shot network: encoder, pooling, descriptors, base learners,
//! matching heads and the level/scale discriminator.

use rand::Rng;

use crate::encoder::{Encoder, EncoderConfig};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::matching::{self, GraphMatcher, MatchMode, Matchers, PooledEpisode, Strategy};
use crate::objectives;
use crate::params::{Bound, ParamStore};
use crate::reldesc::{self, Descriptor};
use crate::simnet::{Dense, GateModule, SimNetConfig, SimilarityNet};
use crate::sop::{self, PnConfig};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub simnet: SimNetConfig,
    pub pn: PnConfig,
    pub descriptor: Descriptor,
    pub strategy: Strategy,
    pub mode: MatchMode,
    pub valsd: bool,
    pub gnn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            simnet: SimNetConfig::default(),
            pn: PnConfig::default(),
            descriptor: Descriptor::Otimes,
            strategy: Strategy::None,
            mode: MatchMode::Intra,
            valsd: false,
            gnn_hidden: 16,
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.encoder.num_levels
    }

    pub fn scales(&self) -> usize {
        self.encoder.num_scales
    }

    /// Checks the combination of options against an episode shot count.
    pub fn validate(&self, shot: usize) -> Result<()> {
        self.encoder.validate()?;
        self.pn.validate()?;
        if self.simnet.channels == 0 || self.simnet.hidden == 0 || self.simnet.grid == 0 || self.gnn_hidden == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.strategy != Strategy::None && self.descriptor != Descriptor::Otimes {
            return Err(Error::Config(format!(
                "matching `{}` compares individual supports and needs descriptor otimes, got {}",
                self.strategy,
                self.descriptor.name()
            )));
        }
        if self.descriptor == Descriptor::OtimesF && (self.scales() != 1 || shot > 2) {
            return Err(Error::Config("descriptor otimes_f needs one scale and at most 2 shots".into()));
        }
        if self.mode == MatchMode::Inter {
            if self.strategy == Strategy::None {
                return Err(Error::Config("inter-level matching needs a matching strategy".into()));
            }
            let k = self.encoder.level_channels(1);
            if (1..=self.levels()).any(|d| self.encoder.level_channels(d) != k) {
                return Err(Error::Config("inter-level matching needs equal channels on every level".into()));
            }
        }
        Ok(())
    }
}

/// Scores of one episode plus what the losses and inference need.
#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    /// `[Nq, X, G, T]`.
    pub scores: Var,
    /// Episode class of each compared item `X`.
    pub item_class: Vec<usize>,
    /// Per-term weights for losses and votes.
    pub weights: Vec<f64>,
    /// Per-sample pooled reps `[B, K, K]` at every `(d, s)`, support then
    /// query rows; filled when the discriminator is on.
    pub reps: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    encoder: Encoder,
    simnets: Vec<SimilarityNet>,
    gate: Option<GateModule>,
    graphs: Vec<GraphMatcher>,
    valsd_heads: Vec<Dense>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, shot: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate(shot)?;
        let encoder = Encoder::new(cfg.encoder.clone(), store, "fen", rng)?;
        let (levels, scales) = (cfg.levels(), cfg.scales());
        let groups = match cfg.mode {
            MatchMode::Intra => levels,
            MatchMode::Inter => 1,
        };
        let mut simnets = Vec::new();
        let mut graphs = Vec::new();
        if cfg.strategy == Strategy::Gr {
            for g in 0..groups {
                let k = cfg.encoder.level_channels(g + 1);
                let nodes = match cfg.mode {
                    MatchMode::Intra => 2 * scales,
                    MatchMode::Inter => 2 * levels * scales,
                };
                graphs.push(GraphMatcher::new(store, &format!("gr{g}"), nodes, scales, k * k, cfg.gnn_hidden, rng));
            }
        } else {
            for g in 0..groups {
                simnets.push(SimilarityNet::new(
                    store,
                    &format!("sn{g}"),
                    cfg.descriptor.channels(),
                    cfg.simnet,
                    rng,
                ));
            }
        }
        let gate = (cfg.strategy == Strategy::Gm).then(|| GateModule::new(store, "gate", rng));
        let valsd_heads = if cfg.valsd {
            (1..=levels)
                .map(|d| {
                    let k = cfg.encoder.level_channels(d);
                    Dense::new(store, &format!("valsd{d}"), k * k, levels * scales, 0.1, rng)
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            cfg,
            encoder,
            simnets,
            gate,
            graphs,
            valsd_heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn simnets(&self) -> &[SimilarityNet] {
        &self.simnets
    }

    /// Level maps `maps[d][s]`, each `[B, K, N]`, for a batch of `[H, W]`
    /// images.
    pub fn encode(&self, t: &mut Tape, p: &Bound, images: &[Tensor]) -> Result<Vec<Vec<Var>>> {
        let Some(first) = images.first() else {
            return Err(Error::EmptyInput("no images to encode".into()));
        };
        let (h, w) = (first.shape()[0], first.shape()[1]);
        let side = self.cfg.encoder.input_size;
        if h != side || w != side {
            return Err(Error::dim(format!("model expects {side}x{side} images, got {h}x{w}")));
        }
        let mut data = Vec::with_capacity(images.len() * h * w);
        for im in images {
            if im.shape() != [h, w] {
                return Err(Error::dim("images in a batch must share one size"));
            }
            data.extend_from_slice(im.data());
        }
        let mut x = t.constant(Tensor::new(vec![images.len(), 1, h, w], data)?);
        let levels = self.cfg.levels();
        let mut maps = vec![Vec::with_capacity(self.cfg.scales()); levels];
        for s in 0..self.cfg.scales() {
            if s > 0 {
                x = t.avg_pool2(x)?;
            }
            for (d, m) in self.encoder.forward(t, p, x)?.into_iter().enumerate() {
                maps[d].push(m);
            }
        }
        Ok(maps)
    }

    /// Pooled per-sample reps `[B, K, K]` for every `(d, s)`.
    pub fn pool_maps(&self, t: &mut Tape, maps: &[Vec<Var>]) -> Result<Vec<Vec<Var>>> {
        maps.iter()
            .map(|level| level.iter().map(|&m| sop::pool(t, m, &self.cfg.pn, None)).collect())
            .collect()
    }

    /// Scores every query of an episode against its classes (prototype
    /// path) or against every support sample (matching path).
    pub fn forward_episode(&self, t: &mut Tape, p: &Bound, ep: &Episode) -> Result<EpisodeOutput> {
        if ep.support.len() != ep.way * ep.shot || ep.query.is_empty() {
            return Err(Error::Episode("episode has malformed support or no queries".into()));
        }
        let ns = ep.support.len();
        let nq = ep.query.len();
        let images: Vec<Tensor> = ep.support.iter().chain(&ep.query).cloned().collect();
        let maps = self.encode(t, p, &images)?;
        let sup_idx: Vec<usize> = (0..ns).collect();
        let qry_idx: Vec<usize> = (ns..ns + nq).collect();
        let mut sup_maps = Vec::with_capacity(maps.len());
        let mut qry_maps = Vec::with_capacity(maps.len());
        for level in &maps {
            let mut sl = Vec::with_capacity(level.len());
            let mut ql = Vec::with_capacity(level.len());
            for &m in level {
                sl.push(t.gather(m, &sup_idx)?);
                ql.push(t.gather(m, &qry_idx)?);
            }
            sup_maps.push(sl);
            qry_maps.push(ql);
        }

        let need_reps = self.cfg.valsd || self.cfg.strategy != Strategy::None;
        let all_reps = if need_reps {
            self.pool_maps(t, &maps)?
        } else {
            Vec::new()
        };
        let split = |t: &mut Tape, idx: &[usize]| -> Result<Vec<Vec<Var>>> {
            all_reps
                .iter()
                .map(|l| l.iter().map(|&r| t.gather(r, idx)).collect())
                .collect()
        };

        let scales = self.cfg.scales();
        let (scores, item_class, weights) = if self.cfg.strategy != Strategy::None {
            let reps = PooledEpisode {
                support: split(t, &sup_idx)?,
                query: split(t, &qry_idx)?,
            };
            let m = Matchers {
                simnets: &self.simnets,
                gate: self.gate.as_ref(),
                graphs: &self.graphs,
            };
            let z = matching::assemble_episode_scores(t, p, &reps, self.cfg.mode, self.cfg.strategy, &m)?;
            let tt = *t.shape(z).last().unwrap_or(&1);
            (z, ep.support_class.clone(), vec![1.0; tt])
        } else if self.cfg.descriptor == Descriptor::OtimesF {
            let pairs: Vec<(usize, usize)> = (0..nq).flat_map(|q| (0..ep.way).map(move |l| (l, q))).collect();
            let mut outs = Vec::with_capacity(maps.len());
            for (d, sn) in self.simnets.iter().enumerate() {
                let desc = reldesc::full_pairs(t, sup_maps[d][0], qry_maps[d][0], ep.shot, &pairs, &self.cfg.pn)?;
                let z = sn.relate(t, p, desc)?;
                outs.push(t.reshape(z, &[nq, ep.way, 1, 1])?);
            }
            let z = t.concat(&outs, 2)?;
            (z, (0..ep.way).collect(), vec![1.0])
        } else {
            let mut protos = Vec::with_capacity(maps.len());
            let mut queries = Vec::with_capacity(maps.len());
            for d in 0..maps.len() {
                let mut pl = Vec::with_capacity(scales);
                let mut ql = Vec::with_capacity(scales);
                for s in 0..scales {
                    pl.push(reldesc::class_reps(
                        t,
                        self.cfg.descriptor,
                        sup_maps[d][s],
                        ep.way,
                        ep.shot,
                        &self.cfg.pn,
                    )?);
                    ql.push(sop::pool(t, qry_maps[d][s], &self.cfg.pn, None)?);
                }
                protos.push(pl);
                queries.push(ql);
            }
            let reps = PooledEpisode {
                support: protos,
                query: queries,
            };
            let m = Matchers {
                simnets: &self.simnets,
                gate: None,
                graphs: &[],
            };
            let z = matching::assemble_episode_scores(t, p, &reps, MatchMode::Intra, Strategy::None, &m)?;
            (z, (0..ep.way).collect(), objectives::scale_pair_weights(scales))
        };
        Ok(EpisodeOutput {
            scores,
            item_class,
            weights,
            reps: if self.cfg.valsd { all_reps } else { Vec::new() },
        })
    }

    /// Discriminator logits `[ΣB, D·S]` and joint labels for reps at every
    /// `(d, s)`.
    pub fn valsd_logits(&self, t: &mut Tape, p: &Bound, reps: &[Vec<Var>]) -> Result<(Var, Vec<usize>)> {
        if self.valsd_heads.is_empty() {
            return Err(Error::Config("the level/scale discriminator is disabled".into()));
        }
        let scales = self.cfg.scales();
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for (d, level) in reps.iter().enumerate() {
            for (s, &r) in level.iter().enumerate() {
                let shape = t.shape(r).to_vec();
                let flat = t.reshape(r, &[shape[0], shape[1] * shape[2]])?;
                logits.push(self.valsd_heads[d].forward(t, p, flat)?);
                labels.extend(std::iter::repeat_n(objectives::joint_label(d, s, scales), shape[0]));
            }
        }
        Ok((t.concat(&logits, 0)?, labels))
    }

    /// Scores `[A, B]` between two sets of reps `[A, K, K]` and `[B, K, K]`
    /// with the base learner of level `d` (0-based).
    pub fn relate_all_pairs(&self, t: &mut Tape, p: &Bound, d: usize, a: Var, b: Var) -> Result<Var> {
        let sn = self
            .simnets
            .get(d)
            .ok_or_else(|| Error::Config(format!("no base learner for level {d}")))?;
        let (na, nb) = (t.shape(a)[0], t.shape(b)[0]);
        let pairs: Vec<(usize, usize)> = (0..na).flat_map(|i| (0..nb).map(move |j| (i, j))).collect();
        let desc = reldesc::stack_pairs(t, a, b, &pairs)?;
        let z = sn.relate(t, p, desc)?;
        t.reshape(z, &[na, nb])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{gen_synthetic, sample_episode};
    use crate::tensor::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(strategy: Strategy, mode: MatchMode, descriptor: Descriptor, scales: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                channels_per_block: vec![4, 4, 4],
                num_levels: 2,
                num_scales: scales,
                input_size: 32,
                in_channels: 1,
            },
            simnet: SimNetConfig {
                channels: 4,
                hidden: 4,
                grid: 2,
            },
            descriptor,
            strategy,
            mode,
            valsd: true,
            gnn_hidden: 4,
            ..ModelConfig::default()
        }
    }

    fn episode(shot: usize) -> Episode {
        let ds = gen_synthetic(4, 5, 1).unwrap();
        sample_episode(&ds, 3, shot, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn every_configuration_scores_an_episode() {
        let mut cases = vec![
            (Strategy::None, MatchMode::Intra, Descriptor::Otimes, 2, 2),
            (Strategy::None, MatchMode::Intra, Descriptor::OtimesR, 2, 2),
            (Strategy::None, MatchMode::Intra, Descriptor::OtimesF, 1, 2),
        ];
        for s in [Strategy::Cm, Strategy::Gm, Strategy::Ot, Strategy::Gr] {
            cases.push((s, MatchMode::Intra, Descriptor::Otimes, 2, 1));
            cases.push((s, MatchMode::Inter, Descriptor::Otimes, 2, 1));
        }
        for (strategy, mode, desc, scales, shot) in cases {
            let cfg = tiny(strategy, mode, desc, scales);
            let mut store = ParamStore::new();
            let model = Model::new(cfg, shot, &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let ep = episode(shot);
            let mut t = Tape::new();
            let p = store.bind(&mut t, true);
            let out = model.forward_episode(&mut t, &p, &ep).unwrap();
            let z = t.value(out.scores).clone();
            assert_eq!(z.shape()[0], 6, "{strategy} {mode}");
            assert_eq!(z.shape()[1], out.item_class.len());
            assert_eq!(*z.shape().last().unwrap(), out.weights.len());
            assert!(z.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let tg = objectives::targets(&ep.query_class, &out.item_class).unwrap();
            let loss = objectives::weighted_mse(&mut t, out.scores, &tg, &out.weights).unwrap();
            let (logits, labels) = model.valsd_logits(&mut t, &p, &out.reps).unwrap();
            assert_eq!(labels.len(), 2 * scales * (3 * shot + 6));
            let ce = objectives::loss_valsd(&mut t, logits, &labels).unwrap();
            let total = t.add(loss, ce).unwrap();
            let mut g = t.backward(total).unwrap();
            let grads = store.collect_grads(&p, &mut g);
            assert!(grads[model.encoder.first_kernel().index()].is_some());
        }
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let bad = [
            tiny(Strategy::Cm, MatchMode::Intra, Descriptor::OtimesR, 2),
            tiny(Strategy::None, MatchMode::Inter, Descriptor::Otimes, 2),
            tiny(Strategy::None, MatchMode::Intra, Descriptor::OtimesF, 2),
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(1), Err(Error::Config(_))));
        }
        assert!(tiny(Strategy::None, MatchMode::Intra, Descriptor::OtimesF, 1).validate(3).is_err());
        let mut uneven = tiny(Strategy::Gm, MatchMode::Inter, Descriptor::Otimes, 2);
        uneven.encoder.channels_per_block = vec![4, 4, 6];
        assert!(uneven.validate(1).is_err());
    }

    #[test]
    fn episode_loss_gradient_reaches_the_first_kernel() {
        let cfg = tiny(Strategy::Gm, MatchMode::Intra, Descriptor::Otimes, 2);
        let mut store = ParamStore::new();
        let model = Model::new(cfg, 1, &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let ep = episode(1);
        let id = model.encoder.first_kernel();
        let k0 = store.get(id).clone();
        let err = check_gradients(
            |t, k| {
                let mut p = store.bind(t, false);
                p.replace(id, k);
                let out = model.forward_episode(t, &p, &ep)?;
                let tg = objectives::targets(&ep.query_class, &out.item_class)?;
                objectives::weighted_mse(t, out.scores, &tg, &out.weights)
            },
            &k0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
