//! Experiment plan: what to generate, train and evaluate, and where.
//!
//! Plans are read from plain-text `key = value` files (`#` starts a comment)
//! and every key can be overridden from the command line.
//!
//! | key               | default                 | meaning                                      |
//! |-------------------|-------------------------|----------------------------------------------|
//! | `family`          | `MNIST`                 | `MNIST`, `FashionMNIST` or `both`            |
//! | `data_dir`        | `data`                  | holds `<family>/train-images-idx3-ubyte` ... |
//! | `out_dir`         | `runs/default`          | every artifact is written below this         |
//! | `seed`            | `2021`                  | base seed; the seeds below derive from it    |
//! | `model_seeds`     | `seed+100+i`, i=0..4    | initialization/shuffle seed of model M_i     |
//! | `noise_seeds`     | `seed+200+op`, op=1..4  | noise seed of operation op (ops 3 and 4 use it) |
//! | `subsample_seed`  | `seed+300`              | seed of the evaluation subsample draws       |
//! | `eval_sizes`      | `10000,160`             | evaluation sample sizes                      |
//! | `repeats`         | `1`                     | subsample draws per size below the test size |
//! | `workers`         | `1`                     | concurrent training jobs                     |
//! | `epochs`          | `3`                     |                                              |
//! | `initial_lr`      | `0.1`                   |                                              |
//! | `lr_decay`        | `0.5`                   | per-epoch learning-rate multiplier           |
//! | `momentum`        | `0.95`                  |                                              |
//! | `batch_size`      | `128`                   |                                              |
//! | `train_samples`   | `all`                   | train on the first n samples only            |
//! | `monitor_samples` | `1000`                  | training slice used for loss monitoring      |
//! | `laplacian`       | `alpha:0.2`             | `alpha:<a>` or `five-point`                  |

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use crc_core::imageops::LaplacianShape;
use crc_core::nn::{Architecture, TrainConfig};

pub const NUM_DATASETS: usize = 5;
pub const NUM_OPERATIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Mnist,
    FashionMnist,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::Mnist, Family::FashionMnist];

    pub fn name(self) -> &'static str {
        match self {
            Family::Mnist => "MNIST",
            Family::FashionMnist => "FashionMNIST",
        }
    }

    /// `MNIST-D3` and friends.
    pub fn dataset_name(self, index: usize) -> String {
        format!("{}-D{index}", self.name())
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(Family::Mnist),
            "fashionmnist" | "fashion-mnist" | "fashion_mnist" | "fasionmnist" => Ok(Family::FashionMnist),
            _ => bail!("unknown dataset family {s:?} (expected MNIST or FashionMNIST)"),
        }
    }
}

/// Families selected by the `family` key.
pub fn parse_families(s: &str) -> Result<Vec<Family>> {
    if matches!(s.to_ascii_lowercase().as_str(), "both" | "all") {
        Ok(Family::ALL.to_vec())
    } else {
        s.split(',').map(|f| f.trim().parse()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub families: Vec<Family>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub model_seeds: [u64; NUM_DATASETS],
    pub noise_seeds: [u64; NUM_OPERATIONS],
    pub subsample_seed: u64,
    pub eval_sizes: Vec<usize>,
    pub repeats: usize,
    pub workers: usize,
    pub train: TrainConfig,
    pub laplacian: LaplacianShape,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        let mut plan = Self {
            families: vec![Family::Mnist],
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            model_seeds: [0; NUM_DATASETS],
            noise_seeds: [0; NUM_OPERATIONS],
            subsample_seed: 0,
            eval_sizes: vec![10_000, 160],
            repeats: 1,
            workers: 1,
            train: TrainConfig::default(),
            laplacian: LaplacianShape::default(),
        };
        plan.reseed(2021);
        plan
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("{key}: cannot parse {v:?}: {e}"))
        })
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| anyhow::anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_laplacian(value: &str) -> Result<LaplacianShape> {
    let v = value.trim().to_ascii_lowercase();
    if v == "five-point" || v == "5-point" {
        return Ok(LaplacianShape::FivePoint);
    }
    match v.strip_prefix("alpha:") {
        Some(a) => Ok(LaplacianShape::Alpha(parse_one("laplacian", a)?)),
        None => bail!("laplacian: expected alpha:<a> or five-point, got {value:?}"),
    }
}

fn format_laplacian(shape: LaplacianShape) -> String {
    match shape {
        LaplacianShape::Alpha(a) => format!("alpha:{a}"),
        LaplacianShape::FivePoint => "five-point".into(),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentPlan {
    /// Sets the base seed and re-derives every per-model/per-op seed from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        for (i, s) in self.model_seeds.iter_mut().enumerate() {
            *s = seed.wrapping_add(100 + i as u64);
        }
        for (i, s) in self.noise_seeds.iter_mut().enumerate() {
            *s = seed.wrapping_add(201 + i as u64);
        }
        self.subsample_seed = seed.wrapping_add(300);
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "family" | "families" => self.families = parse_families(value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.reseed(parse_one(key, value)?),
            "model_seeds" => {
                let v: Vec<u64> = parse_list(key, value)?;
                self.model_seeds = v.try_into().map_err(|v: Vec<u64>| {
                    anyhow::anyhow!("model_seeds: need {NUM_DATASETS} values, got {}", v.len())
                })?;
            }
            "noise_seeds" => {
                let v: Vec<u64> = parse_list(key, value)?;
                self.noise_seeds = v.try_into().map_err(|v: Vec<u64>| {
                    anyhow::anyhow!("noise_seeds: need {NUM_OPERATIONS} values, got {}", v.len())
                })?;
            }
            "subsample_seed" => self.subsample_seed = parse_one(key, value)?,
            "eval_sizes" => self.eval_sizes = parse_list(key, value)?,
            "repeats" => self.repeats = parse_one(key, value)?,
            "workers" => self.workers = parse_one(key, value)?,
            "epochs" => self.train.epochs = parse_one(key, value)?,
            "initial_lr" => self.train.initial_lr = parse_one(key, value)?,
            "lr_decay" => self.train.lr_decay = parse_one(key, value)?,
            "momentum" => self.train.momentum = parse_one(key, value)?,
            "batch_size" => self.train.batch_size = parse_one(key, value)?,
            "train_samples" => {
                self.train.max_samples = if value == "all" {
                    None
                } else {
                    Some(parse_one(key, value)?)
                }
            }
            "monitor_samples" => self.train.monitor_samples = parse_one(key, value)?,
            "laplacian" => self.laplacian = parse_laplacian(value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Applies every setting of a config file, in file order.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key = value", lineno + 1))?;
            self.set(k, v).with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(())
    }

    pub fn apply_config_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_config_text(&text)
            .with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            bail!("no dataset family selected");
        }
        if self.eval_sizes.is_empty() || self.eval_sizes.iter().any(|&n| n < 2) {
            bail!("eval_sizes must be non-empty and each at least 2 (sample standard deviation)");
        }
        if self.repeats == 0 || self.workers == 0 {
            bail!("repeats and workers must be positive");
        }
        self.train.validate()?;
        if self.train.architecture != Architecture::reference() {
            bail!("the harness trains the reference architecture only");
        }
        Ok(())
    }

    /// Training configuration for model `M_index`.
    pub fn train_config(&self, index: usize) -> TrainConfig {
        TrainConfig {
            seed: self.model_seeds[index],
            ..self.train.clone()
        }
    }

    /// Canonical `key=value` rendering, in a fixed key order.
    pub fn to_config_text(&self) -> String {
        let t = &self.train;
        let lines = [
            (
                "family",
                join(&self.families.iter().map(|f| f.name()).collect::<Vec<_>>()),
            ),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("model_seeds", join(&self.model_seeds)),
            ("noise_seeds", join(&self.noise_seeds)),
            ("subsample_seed", self.subsample_seed.to_string()),
            ("eval_sizes", join(&self.eval_sizes)),
            ("repeats", self.repeats.to_string()),
            ("workers", self.workers.to_string()),
            ("epochs", t.epochs.to_string()),
            ("initial_lr", t.initial_lr.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("momentum", t.momentum.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("train_samples", t.max_samples.map_or("all".into(), |n| n.to_string())),
            ("monitor_samples", t.monitor_samples.to_string()),
            ("laplacian", format_laplacian(self.laplacian)),
        ];
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    // ---- on-disk layout ----

    /// Directory holding the four distributed IDX files of a family.
    pub fn originals_dir(&self, family: Family) -> PathBuf {
        self.data_dir.join(family.name())
    }

    pub fn family_dir(&self, family: Family) -> PathBuf {
        self.out_dir.join(family.name())
    }

    pub fn datasets_dir(&self, family: Family) -> PathBuf {
        self.family_dir(family).join("datasets")
    }

    pub fn models_dir(&self, family: Family) -> PathBuf {
        self.family_dir(family).join("models")
    }

    pub fn checkpoint_path(&self, family: Family, index: usize) -> PathBuf {
        self.models_dir(family).join(format!("M{index}.ckpt"))
    }

    pub fn probs_dir(&self, family: Family, eval_size: usize, repeat: usize) -> PathBuf {
        self.family_dir(family).join("probs").join(run_tag(eval_size, repeat))
    }

    pub fn results_path(&self, family: Family, eval_size: usize, repeat: usize) -> PathBuf {
        self.family_dir(family)
            .join("results")
            .join(format!("{}.csv", run_tag(eval_size, repeat)))
    }

    pub fn manifest_path(&self, family: Family) -> PathBuf {
        self.family_dir(family).join("manifest.txt")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }
}

/// `N160`, or `N160_r2` for repeat 2.
pub fn run_tag(eval_size: usize, repeat: usize) -> String {
    if repeat == 0 {
        format!("N{eval_size}")
    } else {
        format!("N{eval_size}_r{repeat}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_recipe() {
        let p = ExperimentPlan::default();
        p.validate().unwrap();
        assert_eq!(p.eval_sizes, vec![10_000, 160]);
        assert_eq!(p.train.learning_rates(), vec![0.1, 0.05, 0.025]);
        assert_eq!(p.model_seeds, [2121, 2122, 2123, 2124, 2125]);
        assert_eq!(p.noise_seeds, [2222, 2223, 2224, 2225]);
    }

    #[test]
    fn config_text_roundtrips() {
        let mut p = ExperimentPlan::default();
        p.apply_config_text(
            "# desk-scale run\nfamily = both\nseed = 7\neval_sizes = 500, 40\ntrain_samples = 10000 # subset\nlaplacian = five-point\n",
        )
        .unwrap();
        assert_eq!(p.families, Family::ALL.to_vec());
        assert_eq!(p.model_seeds[0], 107);
        assert_eq!(p.train.max_samples, Some(10_000));
        assert_eq!(p.laplacian, LaplacianShape::FivePoint);
        let mut q = ExperimentPlan::default();
        q.apply_config_text(&p.to_config_text()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn bad_config_lines_are_reported() {
        let mut p = ExperimentPlan::default();
        let err = p.apply_config_text("seed = 1\nbogus = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 2"));
        assert!(p.apply_config_text("model_seeds = 1,2").is_err());
        assert!(p.apply_config_text("family = CIFAR").is_err());
        assert!(p.apply_config_text("no equals sign").is_err());
        p.eval_sizes = vec![1];
        assert!(p.validate().is_err());
    }

    #[test]
    fn explicit_seeds_survive_later_keys() {
        let mut p = ExperimentPlan::default();
        p.apply_config_text("seed = 5\nmodel_seeds = 1,2,3,4,5\n").unwrap();
        assert_eq!(p.model_seeds, [1, 2, 3, 4, 5]);
        assert_eq!(p.train_config(3).seed, 4);
    }

    #[test]
    fn layout_names() {
        let p = ExperimentPlan {
            out_dir: PathBuf::from("/o"),
            ..Default::default()
        };
        assert_eq!(
            p.checkpoint_path(Family::FashionMnist, 2),
            PathBuf::from("/o/FashionMNIST/models/M2.ckpt")
        );
        assert_eq!(
            p.results_path(Family::Mnist, 160, 0),
            PathBuf::from("/o/MNIST/results/N160.csv")
        );
        assert_eq!(run_tag(160, 3), "N160_r3");
        assert_eq!(Family::Mnist.dataset_name(4), "MNIST-D4");
    }
}
