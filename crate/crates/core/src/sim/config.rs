use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::strategies::StrategyKind;

/// One experiment, read from a TOML document. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// Root of every random stream (data, partition, init, sampling, local SGD).
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub strategy: StrategyConfig,
    pub training: TrainingConfig,
    pub timing: TimingConfig,
    /// Accuracy levels reported by the time-to-accuracy table.
    #[serde(default)]
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian class clusters; train and test share the class means.
    Synthetic {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        separation: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Iid,
    /// Every device holds samples of exactly two classes.
    Noniid2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    /// Total number of devices `|K|`.
    pub devices: usize,
    pub per_device: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Dense network; input and output sizes come from the dataset.
    Fcnn { hidden: Vec<usize> },
    FcnnMnist,
    CnnMnist,
    CnnCifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignOption {
    /// Server assigns widths from reported compute levels.
    Server,
    /// Devices pick their own width from the broadcast menu.
    Device,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RuleConfig {
    /// Compute tiers lined up with widths, fastest tier on the full model.
    TierRank,
    /// Largest width finishing within `seconds`.
    Budget { seconds: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Menu size `|I|`; ignored by fedavg.
    #[serde(default = "one")]
    pub widths: usize,
    /// Trainable layers per width, narrowest first; defaults to the deepest-suffix ladder.
    #[serde(default)]
    pub layer_counts: Option<Vec<usize>>,
    #[serde(default = "default_option")]
    pub option: AssignOption,
    #[serde(default = "default_rule")]
    pub rule: RuleConfig,
    /// Per-width complexity ratios used for timing instead of the FLOP counter.
    #[serde(default)]
    pub complexity_ratios: Option<Vec<f64>>,
    /// Per-width FedDrop keep rates; FLOP-matched to the menu when absent.
    #[serde(default)]
    pub keep_rates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { value: f64 },
    /// `scale / (t + offset)` at round `t` (1-based).
    InverseTime { scale: f64, offset: f64 },
}

impl LrSchedule {
    pub fn at(&self, round: usize) -> f64 {
        match *self {
            LrSchedule::Constant { value } => value,
            LrSchedule::InverseTime { scale, offset } => scale / (round as f64 + offset),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Devices per round `|S|`.
    pub selected: usize,
    pub rounds: usize,
    #[serde(default = "one")]
    pub eval_every: usize,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub epochs: usize,
    /// Local SGD steps; overrides `epochs · ⌈|D_k| / batch⌉` when set.
    #[serde(default)]
    pub steps: Option<usize>,
    pub lr: LrSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    /// Compute levels as fractions of the fastest device; device `k` gets `tiers[k % len]`.
    pub tiers: Vec<f64>,
    /// Stratify sampling so every tier contributes `|S| / tiers` devices.
    #[serde(default)]
    pub balanced: bool,
    /// Seconds for a full-speed device to run its local work on the full model.
    pub base_full_time: f64,
    #[serde(default)]
    pub deadline: Option<f64>,
}

fn one() -> usize {
    1
}

fn default_option() -> AssignOption {
    AssignOption::Server
}

fn default_rule() -> RuleConfig {
    RuleConfig::TierRank
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative dataset paths are resolved against the config file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        }, Some(dir)) = (&mut cfg.dataset, path.parent())
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.training;
        let p = &self.partition;
        if p.devices == 0 || p.per_device == 0 {
            return bad("partition needs positive devices and per_device".into());
        }
        if t.selected == 0 || t.selected > p.devices {
            return bad(format!(
                "selected ({}) must be in 1..={} devices",
                t.selected, p.devices
            ));
        }
        if t.rounds == 0 || t.eval_every == 0 || t.epochs == 0 {
            return bad("rounds, eval_every and epochs must be positive".into());
        }
        if t.batch_size == 0 || t.batch_size > p.per_device {
            return bad(format!(
                "batch_size {} not in 1..={}",
                t.batch_size, p.per_device
            ));
        }
        if t.steps == Some(0) {
            return bad("steps must be positive".into());
        }
        match t.lr {
            LrSchedule::Constant { value } if !(value > 0.0) => {
                return bad("learning rate must be positive".into())
            }
            LrSchedule::InverseTime { scale, offset } if !(scale > 0.0) || !(offset > -1.0) => {
                return bad("inverse-time schedule needs scale > 0 and offset > -1".into())
            }
            _ => {}
        }
        let tm = &self.timing;
        if tm.tiers.is_empty() || tm.tiers.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
            return bad("tiers must be non-empty fractions in (0, 1]".into());
        }
        if tm.balanced && !t.selected.is_multiple_of(tm.tiers.len()) {
            return bad(format!(
                "balanced sampling needs selected ({}) divisible by {} tiers",
                t.selected,
                tm.tiers.len()
            ));
        }
        if !(tm.base_full_time > 0.0) || tm.deadline.is_some_and(|d| !(d > 0.0)) {
            return bad("base_full_time and deadline must be positive".into());
        }
        let s = &self.strategy;
        if s.widths == 0 {
            return bad("widths must be >= 1".into());
        }
        let trainable = self.model_layers();
        if let Some(n) = trainable {
            if s.widths > n {
                return bad(format!("{} widths exceed {n} trainable layers", s.widths));
            }
        }
        if let Some(r) = &s.complexity_ratios {
            if r.len() != s.widths || r.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
                return bad(format!(
                    "complexity_ratios needs {} values in (0, 1]",
                    s.widths
                ));
            }
        }
        if let Some(r) = &s.keep_rates {
            if r.len() != s.widths || r.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
                return bad(format!("keep_rates needs {} values in (0, 1]", s.widths));
            }
        }
        if let RuleConfig::Budget { seconds } = s.rule {
            if !(seconds > 0.0) {
                return bad("budget seconds must be positive".into());
            }
        }
        if self.targets.iter().any(|x| !x.is_finite()) {
            return bad("targets must be finite".into());
        }
        if let DatasetConfig::Synthetic {
            classes,
            dim,
            train_per_class,
            test_per_class,
            separation,
        } = self.dataset
        {
            if classes < 2 || dim == 0 || train_per_class == 0 || test_per_class == 0 {
                return bad("synthetic data needs >= 2 classes and positive sizes".into());
            }
            if !(separation >= 0.0) {
                return bad("separation must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Trainable layer count when known without loading data.
    fn model_layers(&self) -> Option<usize> {
        match &self.model {
            ModelConfig::Fcnn { hidden } => Some(hidden.len() + 1),
            ModelConfig::FcnnMnist => Some(ModelSpec::fcnn_mnist().trainable_count()),
            ModelConfig::CnnMnist => Some(ModelSpec::cnn_mnist().trainable_count()),
            ModelConfig::CnnCifar10 => Some(ModelSpec::cnn_cifar10().trainable_count()),
        }
    }

    /// Model for samples of `sample_shape` with `classes` outputs.
    pub fn build_model(&self, sample_shape: &[usize], classes: usize) -> Result<ModelSpec> {
        let spec = match &self.model {
            ModelConfig::Fcnn { hidden } => {
                let mut sizes = vec![sample_shape.iter().product()];
                sizes.extend_from_slice(hidden);
                sizes.push(classes);
                ModelSpec::fcnn(&sizes)?
            }
            ModelConfig::FcnnMnist => ModelSpec::fcnn_mnist(),
            ModelConfig::CnnMnist => ModelSpec::cnn_mnist(),
            ModelConfig::CnnCifar10 => ModelSpec::cnn_cifar10(),
        };
        if spec.classes() != classes {
            return Err(Error::Config(format!(
                "model has {} outputs but the data has {classes} classes",
                spec.classes()
            )));
        }
        Ok(spec)
    }
}
