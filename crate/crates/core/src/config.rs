//! Run configuration: flat `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::episodes::{AugmentSpec, OMNIGLOT_SIDE, SYNTH_SIDE};
use crate::error::{Error, Result};
use crate::matching::{MatchMode, Strategy};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::reldesc::Descriptor;
use crate::simnet::SimNetConfig;
use crate::sop::{PnConfig, PnKind, SIGME_RATIO};

/// Environment variable overriding `data_root`.
pub const DATA_ROOT_ENV: &str = "MLSO_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Omniglot,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Omniglot => "omniglot",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "omniglot" => Ok(DatasetKind::Omniglot),
            _ => Err(Error::Config(format!("unknown dataset `{s}` (expected synthetic|omniglot)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_root: Option<PathBuf>,
    pub class_rotations: bool,
    pub train_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    pub data_seed: u64,
    pub way: usize,
    pub shot: usize,
    pub train_queries: usize,
    pub test_queries: usize,
    pub levels: usize,
    pub scales: usize,
    pub channels: Vec<usize>,
    pub simnet_channels: usize,
    pub simnet_hidden: usize,
    pub simnet_grid: usize,
    pub pn: PnKind,
    pub eta: Option<f64>,
    pub rho: f64,
    pub alpha: Option<f64>,
    pub sigme_ratio: f64,
    pub descriptor: Descriptor,
    pub matching: Strategy,
    pub matching_mode: MatchMode,
    pub gnn_hidden: usize,
    pub valsd: bool,
    pub valsd_weight: f64,
    pub unsupervised: bool,
    pub aug_count: usize,
    pub augment: AugmentSpec,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub episodes: usize,
    pub eval_episodes: usize,
    pub log_every: usize,
    pub seed: u64,
    pub output: PathBuf,
}

impl RunConfig {
    /// Defaults for everything except the seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            data_root: None,
            class_rotations: false,
            train_classes: 20,
            test_classes: 5,
            samples_per_class: 20,
            data_seed: 7,
            way: 5,
            shot: 1,
            train_queries: 5,
            test_queries: 3,
            levels: 2,
            scales: 2,
            channels: vec![16; 4],
            simnet_channels: 8,
            simnet_hidden: 8,
            simnet_grid: 2,
            pn: PnKind::MaxExp,
            eta: None,
            rho: 0.5,
            alpha: None,
            sigme_ratio: SIGME_RATIO,
            descriptor: Descriptor::Otimes,
            matching: Strategy::None,
            matching_mode: MatchMode::Intra,
            gnn_hidden: 16,
            valsd: false,
            valsd_weight: 0.1,
            unsupervised: false,
            aug_count: 4,
            augment: AugmentSpec::all(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            episodes: 2000,
            eval_episodes: 600,
            log_every: 100,
            seed,
            output: PathBuf::from("run"),
        }
    }

    /// Parses config text; `seed` is required.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Builds a config from `(key, value)` pairs applied in order over the
    /// defaults; `seed` must appear.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let Some((_, seed)) = pairs.iter().rev().find(|(k, _)| k == "seed") else {
            return Err(Error::Config("`seed` is required".into()));
        };
        let mut cfg = Self::with_seed(parse_num(seed, "seed")?);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "dataset" => self.dataset = v.parse()?,
            "data_root" => self.data_root = opt_str(v).map(PathBuf::from),
            "class_rotations" => self.class_rotations = parse_bool(v, key)?,
            "train_classes" => self.train_classes = parse_num(v, key)?,
            "test_classes" => self.test_classes = parse_num(v, key)?,
            "samples_per_class" => self.samples_per_class = parse_num(v, key)?,
            "data_seed" => self.data_seed = parse_num(v, key)?,
            "way" => self.way = parse_num(v, key)?,
            "shot" => self.shot = parse_num(v, key)?,
            "train_queries" => self.train_queries = parse_num(v, key)?,
            "test_queries" => self.test_queries = parse_num(v, key)?,
            "levels" => self.levels = parse_num(v, key)?,
            "scales" => self.scales = parse_num(v, key)?,
            "channels" => {
                self.channels = v
                    .split(',')
                    .map(|c| parse_num(c.trim(), key))
                    .collect::<Result<Vec<usize>>>()?
            }
            "simnet_channels" => self.simnet_channels = parse_num(v, key)?,
            "simnet_hidden" => self.simnet_hidden = parse_num(v, key)?,
            "simnet_grid" => self.simnet_grid = parse_num(v, key)?,
            "pn" => self.pn = v.parse()?,
            "eta" => self.eta = opt_num(v, key)?,
            "rho" => self.rho = parse_num(v, key)?,
            "alpha" => self.alpha = opt_num(v, key)?,
            "sigme_ratio" => self.sigme_ratio = parse_num(v, key)?,
            "descriptor" => self.descriptor = v.parse()?,
            "matching" => self.matching = v.parse()?,
            "matching_mode" => self.matching_mode = v.parse()?,
            "gnn_hidden" => self.gnn_hidden = parse_num(v, key)?,
            "valsd" => self.valsd = parse_bool(v, key)?,
            "valsd_weight" => self.valsd_weight = parse_num(v, key)?,
            "unsupervised" => self.unsupervised = parse_bool(v, key)?,
            "aug_count" => self.aug_count = parse_num(v, key)?,
            "augment" => self.augment = parse_augment(v)?,
            "lr" => self.lr = parse_num(v, key)?,
            "beta1" => self.beta1 = parse_num(v, key)?,
            "beta2" => self.beta2 = parse_num(v, key)?,
            "episodes" => self.episodes = parse_num(v, key)?,
            "eval_episodes" => self.eval_episodes = parse_num(v, key)?,
            "log_every" => self.log_every = parse_num(v, key)?,
            "seed" => self.seed = parse_num(v, key)?,
            "output" => self.output = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key in canonical order with its text form.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |x: Option<f64>| x.map_or_else(|| "auto".to_string(), |v| v.to_string());
        vec![
            ("dataset", self.dataset.name().to_string()),
            (
                "data_root",
                self.data_root
                    .as_ref()
                    .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            ),
            ("class_rotations", self.class_rotations.to_string()),
            ("train_classes", self.train_classes.to_string()),
            ("test_classes", self.test_classes.to_string()),
            ("samples_per_class", self.samples_per_class.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("way", self.way.to_string()),
            ("shot", self.shot.to_string()),
            ("train_queries", self.train_queries.to_string()),
            ("test_queries", self.test_queries.to_string()),
            ("levels", self.levels.to_string()),
            ("scales", self.scales.to_string()),
            (
                "channels",
                self.channels.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("simnet_channels", self.simnet_channels.to_string()),
            ("simnet_hidden", self.simnet_hidden.to_string()),
            ("simnet_grid", self.simnet_grid.to_string()),
            ("pn", self.pn.name().to_string()),
            ("eta", opt(self.eta)),
            ("rho", self.rho.to_string()),
            ("alpha", opt(self.alpha)),
            ("sigme_ratio", self.sigme_ratio.to_string()),
            ("descriptor", self.descriptor.name().to_string()),
            ("matching", self.matching.name().to_string()),
            ("matching_mode", self.matching_mode.name().to_string()),
            ("gnn_hidden", self.gnn_hidden.to_string()),
            ("valsd", self.valsd.to_string()),
            ("valsd_weight", self.valsd_weight.to_string()),
            ("unsupervised", self.unsupervised.to_string()),
            ("aug_count", self.aug_count.to_string()),
            ("augment", augment_text(&self.augment)),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("episodes", self.episodes.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("log_every", self.log_every.to_string()),
            ("seed", self.seed.to_string()),
            ("output", self.output.display().to_string()),
        ]
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies the data-root environment override.
    pub fn apply_env(&mut self) {
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                self.data_root = Some(PathBuf::from(root));
            }
        }
    }

    pub fn image_side(&self) -> usize {
        match self.dataset {
            DatasetKind::Synthetic => SYNTH_SIDE,
            DatasetKind::Omniglot => OMNIGLOT_SIDE,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                channels_per_block: self.channels.clone(),
                num_levels: self.levels,
                num_scales: self.scales,
                input_size: self.image_side(),
                in_channels: 1,
            },
            simnet: SimNetConfig {
                channels: self.simnet_channels,
                hidden: self.simnet_hidden,
                grid: self.simnet_grid,
            },
            pn: PnConfig {
                kind: self.pn,
                eta: self.eta,
                rho: self.rho,
                alpha: self.alpha,
                sigme_ratio: self.sigme_ratio,
            },
            descriptor: self.descriptor,
            strategy: self.matching,
            mode: self.matching_mode,
            valsd: self.valsd,
            gnn_hidden: self.gnn_hidden,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot == 0 || self.train_queries == 0 || self.test_queries == 0 {
            return Err(Error::Config("need way ≥ 2 and positive shot and query counts".into()));
        }
        if self.dataset == DatasetKind::Synthetic {
            if self.train_classes < self.way || self.test_classes < self.way {
                return Err(Error::Config("each split needs at least `way` classes".into()));
            }
            let need = self.shot + self.train_queries.max(self.test_queries);
            if self.samples_per_class < need {
                return Err(Error::Config(format!(
                    "{} samples per class cannot fill {need} per episode",
                    self.samples_per_class
                )));
            }
        } else if self.data_root.is_none() {
            return Err(Error::Config(format!(
                "omniglot needs `data_root` or {DATA_ROOT_ENV}"
            )));
        }
        if !(self.valsd_weight >= 0.0) {
            return Err(Error::Config("valsd_weight must be nonnegative".into()));
        }
        if self.unsupervised {
            if self.aug_count < 2 {
                return Err(Error::Config("unsupervised training needs aug_count ≥ 2".into()));
            }
            if self.matching != Strategy::None || self.descriptor != Descriptor::Otimes || self.scales != 1 {
                return Err(Error::Config(
                    "unsupervised training uses descriptor otimes, one scale and no matching".into(),
                ));
            }
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        self.adam().validate()?;
        self.model_config().validate(self.shot)
    }
}

/// `key = value` lines of config text, in order, without validation.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", no + 1)));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_num<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected on/off, got `{v}`"))),
    }
}

fn opt_str(v: &str) -> Option<&str> {
    (!v.is_empty() && v != "none").then_some(v)
}

fn opt_num(v: &str, key: &str) -> Result<Option<f64>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_num(v, key).map(Some)
    }
}

fn parse_augment(v: &str) -> Result<AugmentSpec> {
    let mut spec = AugmentSpec::none();
    for op in v.split(',').map(str::trim).filter(|o| !o.is_empty() && *o != "none") {
        match op {
            "rotation" => spec.rotation = true,
            "flip" => spec.flip = true,
            "crop" => spec.crop = true,
            "jitter" => spec.jitter = true,
            _ => return Err(Error::Config(format!("unknown augmentation `{op}`"))),
        }
    }
    Ok(spec)
}

fn augment_text(a: &AugmentSpec) -> String {
    let ops: Vec<&str> = [
        (a.rotation, "rotation"),
        (a.flip, "flip"),
        (a.crop, "crop"),
        (a.jitter, "jitter"),
    ]
    .into_iter()
    .filter_map(|(on, n)| on.then_some(n))
    .collect();
    if ops.is_empty() {
        "none".into()
    } else {
        ops.join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = RunConfig::with_seed(42);
        c.eta = Some(12.5);
        c.lr = 3e-4;
        c.channels = vec![8, 16, 32];
        c.levels = 3;
        c.augment = AugmentSpec {
            crop: false,
            ..AugmentSpec::all()
        };
        c.data_root = Some(PathBuf::from("/tmp/omni"));
        c.matching = Strategy::Ot;
        assert_eq!(RunConfig::parse(&c.serialize()).unwrap(), c);
        let d = RunConfig::with_seed(0);
        assert_eq!(RunConfig::parse(&d.serialize()).unwrap(), d);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(RunConfig::parse("way = 5\n"), Err(Error::Config(_))));
        assert!(RunConfig::parse("seed = 1\npn = gamma\n").is_err());
        assert!(RunConfig::parse("seed = 1\nbogus = 3\n").is_err());
        assert!(RunConfig::parse("seed = 1\nway 5\n").is_err());
        let c = RunConfig::parse("# comment\nseed = 3 # trailing\n\nway = 3\n").unwrap();
        assert_eq!((c.seed, c.way), (3, 3));
    }

    #[test]
    fn validation() {
        let c = RunConfig::with_seed(1);
        c.validate().unwrap();
        let mut bad = c.clone();
        bad.matching_mode = MatchMode::Inter;
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.unsupervised = true;
        assert!(bad.validate().is_err());
        bad.scales = 1;
        bad.validate().unwrap();
        let mut bad = c.clone();
        bad.dataset = DatasetKind::Omniglot;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.samples_per_class = 3;
        assert!(bad.validate().is_err());
    }
}
