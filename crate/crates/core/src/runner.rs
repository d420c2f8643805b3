//! Episode loop, evaluation and the on-disk run layout.
//!
//! A run directory holds `config.txt`, `metrics.txt`, `checkpoint.bin` and,
//! after `eval`, `eval.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, RunConfig};
use crate::episodes::{self, augment, gen_synthetic, sample_episode, Dataset, Episode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval.txt";
pub const DIVERGED_FILE: &str = "diverged.txt";
pub const METRICS_HEADER: &str = "# episode loss_r loss_aux acc";

const INIT_STREAM: u64 = u64::MAX;
const EVAL_STREAM: u64 = 1 << 62;

/// Rng for one training (`stream < 2^62`) or evaluation episode. Any single
/// episode can be replayed from `(seed, stream)`.
pub fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Train and test splits with disjoint classes.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Synthetic => {
            let ds = gen_synthetic(cfg.train_classes + cfg.test_classes, cfg.samples_per_class, cfg.data_seed)?;
            ds.split(cfg.train_classes)?
        }
        DatasetKind::Omniglot => {
            let root = cfg
                .data_root
                .as_ref()
                .ok_or_else(|| Error::Config("omniglot needs a data root".into()))?;
            let ds = episodes::load_omniglot(root)?;
            ds.split(cfg.train_classes)?
        }
    };
    let train = if cfg.class_rotations {
        train.with_rotated_classes()
    } else {
        train
    };
    if test.num_classes() < cfg.way {
        return Err(Error::Config(format!(
            "test split has {} classes, fewer than way {}",
            test.num_classes(),
            cfg.way
        )));
    }
    Ok((train, test))
}

/// Averages over one logging interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    /// Episodes completed so far.
    pub episode: usize,
    pub loss_r: f64,
    /// Discriminator loss, or zero.
    pub loss_aux: f64,
    pub acc: f64,
}

impl MetricsRecord {
    pub fn line(&self) -> String {
        format!("{} {:.6} {:.6} {:.6}", self.episode, self.loss_r, self.loss_aux, self.acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss_r: f64,
    pub loss_aux: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean: f64,
    /// 95% half-width.
    pub ci: f64,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(per_episode: Vec<f64>) -> Self {
        let (mean, ci) = mean_ci95(&per_episode);
        Self {
            episodes: per_episode.len(),
            mean,
            ci,
            per_episode,
        }
    }

    pub fn line(&self) -> String {
        format!("accuracy {:.6} +- {:.6} over {} episodes", self.mean, self.ci, self.episodes)
    }
}

/// Mean and `1.96·σ/√n` with the population standard deviation.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Model, parameters, optimizer state and data for one run.
pub struct Trainer {
    cfg: RunConfig,
    store: ParamStore,
    model: Model,
    adam: Adam,
    train: Dataset,
    test: Dataset,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = load_data(&cfg)?;
        Self::with_data(cfg, train, test)
    }

    pub fn with_data(cfg: RunConfig, train: Dataset, test: Dataset) -> Result<Self> {
        cfg.validate()?;
        let side = cfg.image_side();
        if train.side != side || test.side != side {
            return Err(Error::Config(format!("data is {}px, model expects {side}px", train.side)));
        }
        let mut store = ParamStore::new();
        let model = Model::new(cfg.model_config(), cfg.shot, &mut store, &mut episode_rng(cfg.seed, INIT_STREAM))?;
        let adam = Adam::new(cfg.adam(), &store);
        Ok(Self {
            cfg,
            store,
            model,
            adam,
            train,
            test,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn train_data(&self) -> &Dataset {
        &self.train
    }

    pub fn test_data(&self) -> &Dataset {
        &self.test
    }

    /// One optimizer step on training episode `index`.
    pub fn step(&mut self, index: usize) -> Result<StepStats> {
        let mut rng = episode_rng(self.cfg.seed, index as u64);
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, true);
        let (loss, stats) = if self.cfg.unsupervised {
            self.unsupervised_loss(&mut t, &p, &mut rng)?
        } else {
            let ep = sample_episode(&self.train, self.cfg.way, self.cfg.shot, self.cfg.train_queries, &mut rng)?;
            self.supervised_loss(&mut t, &p, &ep)?
        };
        if !(stats.loss_r.is_finite() && stats.loss_aux.is_finite()) {
            return Err(Error::Diverged {
                episode: index,
                seed: self.cfg.seed,
                reason: format!("loss_r {} loss_aux {}", stats.loss_r, stats.loss_aux),
            });
        }
        let mut grads = t.backward(loss)?;
        let g = self.store.collect_grads(&p, &mut grads);
        if g.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::Diverged {
                episode: index,
                seed: self.cfg.seed,
                reason: "non-finite gradient".into(),
            });
        }
        self.adam.step(&mut self.store, &g)?;
        Ok(stats)
    }

    fn supervised_loss(&self, t: &mut Tape, p: &crate::params::Bound, ep: &Episode) -> Result<(Var, StepStats)> {
        let out = self.model.forward_episode(t, p, ep)?;
        let tg = objectives::targets(&ep.query_class, &out.item_class)?;
        let lr = objectives::weighted_mse(t, out.scores, &tg, &out.weights)?;
        let acc = accuracy(t.value(out.scores), &out.item_class, &out.weights, ep)?;
        let loss_r = t.value(lr).item()?;
        if !self.cfg.valsd {
            return Ok((lr, StepStats { loss_r, loss_aux: 0.0, acc }));
        }
        let (logits, labels) = self.model.valsd_logits(t, p, &out.reps)?;
        let la = objectives::loss_valsd(t, logits, &labels)?;
        let loss_aux = t.value(la).item()?;
        let wa = t.mul_scalar(la, self.cfg.valsd_weight);
        Ok((t.add(lr, wa)?, StepStats { loss_r, loss_aux, acc }))
    }

    /// Contrastive loss on augmentations of two unlabeled images. `acc` is
    /// the fraction of pair scores on the right side of 0.5.
    fn unsupervised_loss<R: Rng + ?Sized>(
        &self,
        t: &mut Tape,
        p: &crate::params::Bound,
        rng: &mut R,
    ) -> Result<(Var, StepStats)> {
        let (zeta, zeta_star, zeta_cross) = self.contrastive_scores(t, p, &self.train, rng)?;
        let loss = objectives::loss_unsupervised(t, &zeta, &zeta_star, &zeta_cross)?;
        let mut right = 0usize;
        let mut total = 0usize;
        for d in 0..zeta.len() {
            for (m, positive) in [(zeta[d], true), (zeta_star[d], true), (zeta_cross[d], false)] {
                for &v in t.value(m).data() {
                    right += usize::from((v > 0.5) == positive);
                    total += 1;
                }
            }
        }
        let loss_r = t.value(loss).item()?;
        Ok((
            loss,
            StepStats {
                loss_r,
                loss_aux: 0.0,
                acc: right as f64 / total as f64,
            },
        ))
    }

    /// Per-level `M×M` scores within the augmentations of image X, within
    /// those of image Y, and across the two.
    fn contrastive_scores<R: Rng + ?Sized>(
        &self,
        t: &mut Tape,
        p: &crate::params::Bound,
        ds: &Dataset,
        rng: &mut R,
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
        let pool: Vec<(usize, usize)> = ds
            .classes
            .iter()
            .enumerate()
            .flat_map(|(c, cd)| (0..cd.images.len()).map(move |i| (c, i)))
            .collect();
        if pool.len() < 2 {
            return Err(Error::Sampling("need at least two images".into()));
        }
        let pick = sample(rng, pool.len(), 2).into_vec();
        let m = self.cfg.aug_count;
        let mut images = Vec::with_capacity(2 * m);
        for &k in &pick {
            let (c, i) = pool[k];
            for _ in 0..m {
                images.push(augment(&ds.classes[c].images[i], &self.cfg.augment, rng));
            }
        }
        let maps = self.model.encode(t, p, &images)?;
        let reps = self.model.pool_maps(t, &maps)?;
        let xs: Vec<usize> = (0..m).collect();
        let ys: Vec<usize> = (m..2 * m).collect();
        let (mut zeta, mut zeta_star, mut zeta_cross) = (Vec::new(), Vec::new(), Vec::new());
        for (d, level) in reps.iter().enumerate() {
            let rx = t.gather(level[0], &xs)?;
            let ry = t.gather(level[0], &ys)?;
            zeta.push(self.model.relate_all_pairs(t, p, d, rx, rx)?);
            zeta_star.push(self.model.relate_all_pairs(t, p, d, ry, ry)?);
            zeta_cross.push(self.model.relate_all_pairs(t, p, d, rx, ry)?);
        }
        Ok((zeta, zeta_star, zeta_cross))
    }

    /// Trains episodes `0..budget`, calling `sink` once per logging interval
    /// (and for a final partial interval).
    pub fn train(&mut self, budget: usize, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        let every = self.cfg.log_every;
        let (mut lr, mut la, mut acc, mut n) = (0.0, 0.0, 0.0, 0usize);
        for i in 0..budget {
            let s = self.step(i)?;
            lr += s.loss_r;
            la += s.loss_aux;
            acc += s.acc;
            n += 1;
            if n == every || i + 1 == budget {
                let k = n as f64;
                sink(&MetricsRecord {
                    episode: i + 1,
                    loss_r: lr / k,
                    loss_aux: la / k,
                    acc: acc / k,
                })?;
                (lr, la, acc, n) = (0.0, 0.0, 0.0, 0);
            }
        }
        Ok(())
    }

    /// Test-split evaluation episode `index`.
    pub fn eval_episode(&self, index: usize) -> Result<Episode> {
        let mut rng = episode_rng(self.cfg.seed, EVAL_STREAM + index as u64);
        sample_episode(&self.test, self.cfg.way, self.cfg.shot, self.cfg.test_queries, &mut rng)
    }

    /// Query accuracy of the current parameters on one episode.
    pub fn episode_accuracy(&self, ep: &Episode) -> Result<f64> {
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, false);
        let out = self.model.forward_episode(&mut t, &p, ep)?;
        accuracy(t.value(out.scores), &out.item_class, &out.weights, ep)
    }

    /// Mean accuracy and 95% interval over `episodes` test episodes.
    pub fn evaluate(&self, episodes: usize) -> Result<EvalReport> {
        let accs = (0..episodes)
            .map(|i| self.episode_accuracy(&self.eval_episode(i)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport::from_accuracies(accs))
    }

    /// Discriminator accuracy on the reps of held-out test episodes.
    pub fn valsd_accuracy(&self, episodes: usize) -> Result<f64> {
        let (mut right, mut total) = (0usize, 0usize);
        for i in 0..episodes {
            let ep = self.eval_episode(i)?;
            let mut t = Tape::new();
            let p = self.store.bind(&mut t, false);
            let out = self.model.forward_episode(&mut t, &p, &ep)?;
            let (logits, labels) = self.model.valsd_logits(&mut t, &p, &out.reps)?;
            let lv = t.value(logits);
            let c = lv.shape()[1];
            for (row, &label) in lv.data().chunks(c).zip(&labels) {
                let arg = (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                right += usize::from(arg == label);
                total += 1;
            }
        }
        Ok(right as f64 / total.max(1) as f64)
    }

    /// Mean positive-pair and negative-pair scores over `episodes`
    /// augmented test-split pairs.
    pub fn pair_scores(&self, episodes: usize) -> Result<(f64, f64)> {
        let (mut pos, mut np, mut neg, mut nn) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..episodes {
            let mut rng = episode_rng(self.cfg.seed, EVAL_STREAM + i as u64);
            let mut t = Tape::new();
            let p = self.store.bind(&mut t, false);
            let (z, zs, zc) = self.contrastive_scores(&mut t, &p, &self.test, &mut rng)?;
            for d in 0..z.len() {
                for m in [z[d], zs[d]] {
                    pos += t.value(m).data().iter().sum::<f64>();
                    np += t.value(m).numel();
                }
                neg += t.value(zc[d]).data().iter().sum::<f64>();
                nn += t.value(zc[d]).numel();
            }
        }
        Ok((pos / np.max(1) as f64, neg / nn.max(1) as f64))
    }
}

/// Fraction of queries of `ep` classified correctly from a score table.
pub fn accuracy(scores: &Tensor, item_class: &[usize], weights: &[f64], ep: &Episode) -> Result<f64> {
    let votes = objectives::level_votes(scores, item_class, ep.way, weights)?;
    let pred = objectives::predict(&votes)?;
    let right = pred.iter().zip(&ep.query_class).filter(|(a, b)| a == b).count();
    Ok(right as f64 / pred.len() as f64)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Outcome of `cmd_train`.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub records: Vec<MetricsRecord>,
}

/// Trains per `cfg` and writes the run directory. On divergence the offending
/// episode is written to `diverged.txt` before the error is returned.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(cfg.clone())?;
    train_into(&mut trainer, &cfg.output)
}

pub fn train_into(trainer: &mut Trainer, dir: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(CONFIG_FILE), &trainer.cfg.serialize())?;
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut records = Vec::new();
    let budget = trainer.cfg.episodes;
    let result = trainer.train(budget, |r| {
        let _ = writeln!(metrics, "{}", r.line());
        records.push(*r);
        Ok(())
    });
    write(&dir.join(METRICS_FILE), &metrics)?;
    if let Err(Error::Diverged { episode, seed, reason }) = &result {
        let dump = format!(
            "episode {episode}\nseed {seed}\nstream {episode}\nreason {reason}\n\n{}",
            trainer.cfg.serialize()
        );
        write(&dir.join(DIVERGED_FILE), &dump)?;
    }
    result?;
    trainer.store.save(&dir.join(CHECKPOINT_FILE))?;
    Ok(TrainSummary {
        dir: dir.to_path_buf(),
        records,
    })
}

/// Loads `checkpoint` into a model built from `cfg` and evaluates it on
/// `cfg.eval_episodes` test episodes; writes `eval.txt` next to the run.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.store.load(checkpoint).map_err(|e| match e {
        Error::Io { path, source } => Error::Checkpoint(format!("{}: {source}", path.display())),
        e => e,
    })?;
    let report = trainer.evaluate(cfg.eval_episodes)?;
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    write(&cfg.output.join(EVAL_FILE), &format!("{}\n", report.line()))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> RunConfig {
        let mut c = RunConfig::with_seed(seed);
        c.train_classes = 6;
        c.test_classes = 5;
        c.samples_per_class = 6;
        c.channels = vec![4; 4];
        c.train_queries = 2;
        c.test_queries = 2;
        c.log_every = 2;
        c
    }

    #[test]
    fn ci_matches_hand_computation() {
        let (m, ci) = mean_ci95(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(m, 0.5);
        assert!((ci - 1.96 * 0.5 / 2.0).abs() < 1e-15);
        let (m, ci) = mean_ci95(&[0.2, 0.4, 0.9]);
        let sd = ((0.09 + 0.01 + 0.16) / 3.0f64).sqrt();
        assert!((m - 0.5).abs() < 1e-15);
        assert!((ci - 1.96 * sd / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn metrics_line_format() {
        let r = MetricsRecord {
            episode: 100,
            loss_r: 0.5,
            loss_aux: 0.0,
            acc: 1.0 / 3.0,
        };
        assert_eq!(r.line(), "100 0.500000 0.000000 0.333333");
    }

    #[test]
    fn replayed_step_repeats_exactly() {
        let mut a = Trainer::new(small(3)).unwrap();
        let mut b = Trainer::new(small(3)).unwrap();
        let sa: Vec<_> = (0..3).map(|i| a.step(i).unwrap()).collect();
        let sb: Vec<_> = (0..3).map(|i| b.step(i).unwrap()).collect();
        assert_eq!(sa, sb);
        assert_eq!(a.store().to_bytes(), b.store().to_bytes());
    }

    #[test]
    fn perfect_scores_give_full_accuracy() {
        let tr = Trainer::new(small(1)).unwrap();
        let ep = tr.eval_episode(0).unwrap();
        let item: Vec<usize> = (0..ep.way).collect();
        let mut z = Tensor::zeros(&[ep.query.len(), ep.way, 2, 1]);
        for (q, &c) in ep.query_class.iter().enumerate() {
            z.set(&[q, c, 0, 0], 1.0);
            z.set(&[q, c, 1, 0], 1.0);
        }
        assert_eq!(accuracy(&z, &item, &[1.0], &ep).unwrap(), 1.0);
    }

    #[test]
    fn unsupervised_and_discriminator_steps_run() {
        let mut c = small(5);
        c.unsupervised = true;
        c.scales = 1;
        let mut tr = Trainer::new(c).unwrap();
        let s = tr.step(0).unwrap();
        assert!(s.loss_r.is_finite() && (0.0..=1.0).contains(&s.acc));
        let (pos, neg) = tr.pair_scores(2).unwrap();
        assert!((0.0..=1.0).contains(&pos) && (0.0..=1.0).contains(&neg));

        let mut c = small(5);
        c.valsd = true;
        let mut tr = Trainer::new(c).unwrap();
        let s = tr.step(0).unwrap();
        assert!(s.loss_aux > 0.0);
        let acc = tr.valsd_accuracy(2).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
