//! Experiment configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::knockoff::DEFAULT_RIDGE;
use crate::selection::ControlMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    /// Small generated image task, useful without downloads.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub name: DatasetName,
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Use only the first `n` training examples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnockoffConfig {
    /// Ridge added to the covariance, relative to its mean diagonal.
    pub ridge: f64,
}

impl Default for KnockoffConfig {
    fn default() -> Self {
        Self { ridge: DEFAULT_RIDGE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionStageConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub control: ControlMode,
    pub bias: bool,
    /// Random training subset used for selection; all of it when unset.
    #[serde(default)]
    pub examples: Option<usize>,
    #[serde(default)]
    pub detach_control: bool,
}

impl Default for SelectionStageConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 10,
            batch: 128,
            control: ControlMode::Knockoff,
            bias: true,
            examples: None,
            detach_control: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Scop,
    L1,
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Scop, Criterion::L1, Criterion::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Scop => "scop",
            Criterion::L1 => "l1",
            Criterion::Random => "random",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pruning criterion {s:?}; valid: scop, l1, random")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub rate: f64,
    pub criterion: Criterion,
    /// Multiply SCOP importance by `|γ|` of the following batch norm.
    #[serde(default = "yes")]
    pub bn_scale: bool,
}

fn yes() -> bool {
    true
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            rate: 0.5,
            criterion: Criterion::Scop,
            bn_scale: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: String,
    pub dataset: DataConfig,
    pub seed: u64,
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub knockoff: KnockoffConfig,
    pub selection: SelectionStageConfig,
    pub prune: PruneConfig,
    pub finetune: TrainConfig,
}

impl ExperimentConfig {
    /// Desk-scale defaults for small-cnn on MNIST.
    pub fn mnist_default(seed: u64) -> Self {
        Self {
            arch: "small-cnn".into(),
            dataset: DataConfig {
                name: DatasetName::Mnist,
                dir: None,
                train_limit: None,
                test_limit: None,
            },
            seed,
            pretrain: TrainConfig {
                lr: 0.05,
                epochs: 2,
                ..Default::default()
            },
            knockoff: KnockoffConfig::default(),
            selection: SelectionStageConfig {
                examples: Some(10_000),
                ..Default::default()
            },
            prune: PruneConfig::default(),
            finetune: TrainConfig {
                lr: 0.01,
                epochs: 20,
                ..Default::default()
            },
        }
    }

    /// A budget of a few CPU minutes per seed: one finetune epoch, a 5000-image
    /// selection subset and two selection epochs. The larger selection lr and
    /// knockoff ridge make up for the short schedule.
    pub fn mnist_quick(seed: u64) -> Self {
        let mut c = Self::mnist_default(seed);
        c.knockoff.ridge = 0.1;
        c.selection.examples = Some(5000);
        c.selection.epochs = 2;
        c.selection.lr = 0.01;
        c.finetune.epochs = 1;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let train = |name: &str, t: &TrainConfig| -> Result<()> {
            if !(t.lr.is_finite() && t.lr > 0.0) {
                return Err(Error::invalid(format!("{name}.lr must be positive, got {}", t.lr)));
            }
            if t.batch == 0 {
                return Err(Error::invalid(format!("{name}.batch must be positive")));
            }
            if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
                return Err(Error::invalid(format!("{name}.weight_decay must be non-negative")));
            }
            Ok(())
        };
        train("pretrain", &self.pretrain)?;
        train("finetune", &self.finetune)?;
        let s = &self.selection;
        if !(s.lr.is_finite() && s.lr > 0.0) || s.batch == 0 {
            return Err(Error::invalid("selection.lr and selection.batch must be positive"));
        }
        if s.examples == Some(0) || self.dataset.train_limit == Some(0) || self.dataset.test_limit == Some(0) {
            return Err(Error::invalid("example counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.prune.rate) {
            return Err(Error::invalid(format!("prune.rate must be in [0, 1), got {}", self.prune.rate)));
        }
        if !(self.knockoff.ridge.is_finite() && self.knockoff.ridge >= 0.0) {
            return Err(Error::invalid("knockoff.ridge must be non-negative"));
        }
        if !crate::nn::ARCH_NAMES.contains(&self.arch.as_str()) {
            return Err(Error::UnknownArch {
                name: self.arch.clone(),
                valid: crate::nn::ARCH_NAMES.join(", "),
            });
        }
        Ok(())
    }
}
