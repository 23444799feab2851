//! Run configuration and its flat `key = value` file format.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys are rejected. The canonical rendering
//! ([`RunConfig::to_kv_string`]) lists every key in a fixed order and is
//! what [`RunConfig::hash`] digests, so two configs hash equal exactly when
//! they describe the same run.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activations::{ActivationFn, DEFAULT_CI_BAR, DEFAULT_CI_EXPONENT, DEFAULT_PA_POWER};
use crate::autodiff::MarginLossParams;
use crate::capsule::ArchConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    MultiMnist,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "multimnist" => Ok(DatasetKind::MultiMnist),
            other => Err(Error::Config(format!("unknown dataset '{other}' (mnist, cifar10, multimnist)"))),
        }
    }
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::MultiMnist => "multimnist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Regularizer {
    None,
    /// Adds `λ·Σw²` over every trainable tensor.
    WeightDecay(f64),
    /// Drops primary capsules with probability `1 − keep`.
    Dropout(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Whole capsule vectors are zeroed.
    Capsule,
    /// Individual capsule components are zeroed.
    Element,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointAveraging {
    /// Mean of per-checkpoint error rates.
    Metric,
    /// Error rate of the parameter-averaged network.
    Weights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Step size is `learning_rate · decay_rate^(step / decay_steps)`.
    pub decay_rate: f64,
    pub decay_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_rate: 0.96,
            decay_steps: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch_preset: String,
    pub arch: ArchConfig,
    pub activation: ActivationFn,
    pub dataset: DatasetKind,
    /// Stratified training subset size; 0 keeps the full split.
    pub train_subset: usize,
    pub test_subset: usize,
    pub multimnist_per_image: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub regularizer: Regularizer,
    pub dropout_mode: DropoutMode,
    pub margin: MarginLossParams,
    /// Maximum random shift in pixels; `None` means 2 for MNIST and no
    /// augmentation for the other datasets.
    pub augment_shift: Option<usize>,
    pub routing_init_std: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub eval_every: usize,
    pub eval_checkpoints: usize,
    pub checkpoint_averaging: CheckpointAveraging,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch_preset: "mnist".into(),
            arch: ArchConfig::mnist(),
            activation: ActivationFn::OriginalSquash,
            dataset: DatasetKind::Mnist,
            train_subset: 0,
            test_subset: 0,
            multimnist_per_image: 20,
            optimizer: OptimizerConfig::default(),
            batch_size: 128,
            steps: 60_000,
            regularizer: Regularizer::None,
            dropout_mode: DropoutMode::Capsule,
            margin: MarginLossParams::default(),
            augment_shift: None,
            routing_init_std: 0.05,
            seed: 0,
            checkpoint_every: 1500,
            log_every: 100,
            eval_every: 0,
            eval_checkpoints: 40,
            checkpoint_averaging: CheckpointAveraging::Metric,
        }
    }
}

/// Every recognised key, in canonical order.
pub const KEYS: &[&str] = &[
    "arch",
    "input_channels",
    "input_size",
    "conv1_channels",
    "conv1_kernel",
    "conv1_padding",
    "conv2_kernel",
    "conv2_stride",
    "prim_channels",
    "prim_dim",
    "num_classes",
    "digit_dim",
    "routing_iters",
    "activation",
    "pa_n",
    "ci_bar",
    "ci_exponent",
    "dataset",
    "train_subset",
    "test_subset",
    "multimnist_per_image",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "lr_decay_rate",
    "lr_decay_steps",
    "batch_size",
    "steps",
    "weight_decay",
    "dropout_keep",
    "dropout_mode",
    "m_plus",
    "m_minus",
    "lambda_down",
    "augment_shift",
    "routing_init_std",
    "seed",
    "checkpoint_every",
    "log_every",
    "eval_every",
    "eval_checkpoints",
    "checkpoint_averaging",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Applies `key = value` lines on top of the current settings. The
    /// `arch` key resets all architecture fields to the preset, so it is
    /// applied before any other line regardless of position.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.sort_by_key(|(k, _)| k != "arch");
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        self.validate()
    }

    /// Sets one key. Activation hyperparameters (`pa_n`, `ci_bar`,
    /// `ci_exponent`) switch the activation to the matching variant.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.arch;
        match key {
            "arch" => {
                self.arch = ArchConfig::preset(value)?;
                self.arch_preset = value.to_string();
            }
            "input_channels" => a.input_channels = parse(key, value)?,
            "input_size" => a.input_size = parse(key, value)?,
            "conv1_channels" => a.conv1_channels = parse(key, value)?,
            "conv1_kernel" => a.conv1_kernel = parse(key, value)?,
            "conv1_padding" => a.conv1_padding = parse(key, value)?,
            "conv2_kernel" => a.conv2_kernel = parse(key, value)?,
            "conv2_stride" => a.conv2_stride = parse(key, value)?,
            "prim_channels" => a.prim_channels = parse(key, value)?,
            "prim_dim" => a.prim_dim = parse(key, value)?,
            "num_classes" => a.num_classes = parse(key, value)?,
            "digit_dim" => a.digit_dim = parse(key, value)?,
            "routing_iters" => a.routing_iters = parse(key, value)?,
            "activation" => {
                // keep already-set hyperparameters when only the kind is named
                self.activation = match (value.parse::<ActivationFn>()?, self.activation) {
                    (ActivationFn::CiSquash { .. }, prev @ ActivationFn::CiSquash { .. }) => prev,
                    (ActivationFn::PoweredActivation { .. }, prev @ ActivationFn::PoweredActivation { .. }) => prev,
                    (new, _) => new,
                };
            }
            "pa_n" => self.activation = ActivationFn::powered(parse(key, value)?)?,
            "ci_bar" => {
                let exponent = match self.activation {
                    ActivationFn::CiSquash { exponent, .. } => exponent,
                    _ => DEFAULT_CI_EXPONENT,
                };
                self.activation = ActivationFn::ci_squash_with_exponent(parse(key, value)?, exponent)?;
            }
            "ci_exponent" => {
                let bar = match self.activation {
                    ActivationFn::CiSquash { bar, .. } => bar,
                    _ => DEFAULT_CI_BAR,
                };
                self.activation = ActivationFn::ci_squash_with_exponent(bar, parse(key, value)?)?;
            }
            "dataset" => self.dataset = parse(key, value)?,
            "train_subset" => self.train_subset = parse(key, value)?,
            "test_subset" => self.test_subset = parse(key, value)?,
            "multimnist_per_image" => self.multimnist_per_image = parse(key, value)?,
            "learning_rate" => self.optimizer.learning_rate = parse(key, value)?,
            "adam_beta1" => self.optimizer.beta1 = parse(key, value)?,
            "adam_beta2" => self.optimizer.beta2 = parse(key, value)?,
            "adam_epsilon" => self.optimizer.epsilon = parse(key, value)?,
            "lr_decay_rate" => self.optimizer.decay_rate = parse(key, value)?,
            "lr_decay_steps" => self.optimizer.decay_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "weight_decay" => {
                let lambda: f64 = parse(key, value)?;
                self.regularizer = match self.regularizer {
                    _ if lambda != 0.0 => Regularizer::WeightDecay(lambda),
                    Regularizer::WeightDecay(_) => Regularizer::None,
                    other => other,
                };
            }
            "dropout_keep" => {
                let keep: f64 = parse(key, value)?;
                self.regularizer = match self.regularizer {
                    _ if keep != 1.0 => Regularizer::Dropout(keep),
                    Regularizer::Dropout(_) => Regularizer::None,
                    other => other,
                };
            }
            "dropout_mode" => {
                self.dropout_mode = match value {
                    "capsule" => DropoutMode::Capsule,
                    "element" => DropoutMode::Element,
                    _ => return Err(Error::Config(format!("dropout_mode must be capsule or element, got '{value}'"))),
                }
            }
            "m_plus" => self.margin.m_plus = parse(key, value)?,
            "m_minus" => self.margin.m_minus = parse(key, value)?,
            "lambda_down" => self.margin.lambda_down = parse(key, value)?,
            "augment_shift" => {
                self.augment_shift = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "routing_init_std" => self.routing_init_std = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_checkpoints" => self.eval_checkpoints = parse(key, value)?,
            "checkpoint_averaging" => {
                self.checkpoint_averaging = match value {
                    "metric" => CheckpointAveraging::Metric,
                    "weights" => CheckpointAveraging::Weights,
                    _ => return Err(Error::Config(format!("checkpoint_averaging must be metric or weights, got '{value}'"))),
                }
            }
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.activation.validate()?;
        self.margin.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        match self.regularizer {
            Regularizer::WeightDecay(l) if !(l.is_finite() && l >= 0.0) => {
                return Err(Error::Config(format!("weight_decay must be >= 0, got {l}")))
            }
            Regularizer::Dropout(k) if !(k > 0.0 && k <= 1.0) => {
                return Err(Error::Config(format!("dropout_keep must lie in (0, 1], got {k}")))
            }
            _ => {}
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if o.decay_steps == 0 {
            return Err(Error::Config("lr_decay_steps must be positive".into()));
        }
        if self.multimnist_per_image == 0 {
            return Err(Error::Config("multimnist_per_image must be at least 1".into()));
        }
        if self.eval_checkpoints == 0 {
            return Err(Error::Config("eval_checkpoints must be at least 1".into()));
        }
        if !(self.routing_init_std.is_finite() && self.routing_init_std >= 0.0) {
            return Err(Error::Config("routing_init_std must be >= 0".into()));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let a = &self.arch;
        let (pa_n, ci_bar, ci_exp) = match self.activation {
            ActivationFn::PoweredActivation { n } => (n, DEFAULT_CI_BAR, DEFAULT_CI_EXPONENT),
            ActivationFn::CiSquash { bar, exponent } => (DEFAULT_PA_POWER, bar, exponent),
            ActivationFn::OriginalSquash => (DEFAULT_PA_POWER, DEFAULT_CI_BAR, DEFAULT_CI_EXPONENT),
        };
        let (wd, keep) = match self.regularizer {
            Regularizer::None => (0.0, 1.0),
            Regularizer::WeightDecay(l) => (l, 1.0),
            Regularizer::Dropout(k) => (0.0, k),
        };
        match key {
            "arch" => self.arch_preset.clone(),
            "input_channels" => a.input_channels.to_string(),
            "input_size" => a.input_size.to_string(),
            "conv1_channels" => a.conv1_channels.to_string(),
            "conv1_kernel" => a.conv1_kernel.to_string(),
            "conv1_padding" => a.conv1_padding.to_string(),
            "conv2_kernel" => a.conv2_kernel.to_string(),
            "conv2_stride" => a.conv2_stride.to_string(),
            "prim_channels" => a.prim_channels.to_string(),
            "prim_dim" => a.prim_dim.to_string(),
            "num_classes" => a.num_classes.to_string(),
            "digit_dim" => a.digit_dim.to_string(),
            "routing_iters" => a.routing_iters.to_string(),
            "activation" => self.activation.short_name().to_string(),
            "pa_n" => pa_n.to_string(),
            "ci_bar" => ci_bar.to_string(),
            "ci_exponent" => ci_exp.to_string(),
            "dataset" => self.dataset.as_str().to_string(),
            "train_subset" => self.train_subset.to_string(),
            "test_subset" => self.test_subset.to_string(),
            "multimnist_per_image" => self.multimnist_per_image.to_string(),
            "learning_rate" => self.optimizer.learning_rate.to_string(),
            "adam_beta1" => self.optimizer.beta1.to_string(),
            "adam_beta2" => self.optimizer.beta2.to_string(),
            "adam_epsilon" => self.optimizer.epsilon.to_string(),
            "lr_decay_rate" => self.optimizer.decay_rate.to_string(),
            "lr_decay_steps" => self.optimizer.decay_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "weight_decay" => wd.to_string(),
            "dropout_keep" => keep.to_string(),
            "dropout_mode" => match self.dropout_mode {
                DropoutMode::Capsule => "capsule".into(),
                DropoutMode::Element => "element".into(),
            },
            "m_plus" => self.margin.m_plus.to_string(),
            "m_minus" => self.margin.m_minus.to_string(),
            "lambda_down" => self.margin.lambda_down.to_string(),
            "augment_shift" => self.augment_shift.map_or("auto".into(), |s| s.to_string()),
            "routing_init_std" => self.routing_init_std.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "log_every" => self.log_every.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_checkpoints" => self.eval_checkpoints.to_string(),
            "checkpoint_averaging" => match self.checkpoint_averaging {
                CheckpointAveraging::Metric => "metric".into(),
                CheckpointAveraging::Weights => "weights".into(),
            },
            _ => unreachable!("key list and renderer out of sync: {key}"),
        }
    }

    pub fn effective_augment_shift(&self) -> usize {
        match (self.augment_shift, self.dataset) {
            (Some(s), _) => s,
            (None, DatasetKind::Mnist) => 2,
            (None, _) => 0,
        }
    }

    /// Canonical rendering: every key, fixed order, parseable by
    /// [`RunConfig::parse_str`].
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if matches!(*key, "pa_n" | "ci_bar" | "ci_exponent") && !self.renders_activation_key(key) {
                continue;
            }
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    fn renders_activation_key(&self, key: &str) -> bool {
        matches!(
            (key, self.activation),
            ("pa_n", ActivationFn::PoweredActivation { .. }) | ("ci_bar" | "ci_exponent", ActivationFn::CiSquash { .. })
        )
    }

    /// First 16 hex digits of the SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv_string().as_bytes());
        hex::encode(&digest[..8])
    }
}
