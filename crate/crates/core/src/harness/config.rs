//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{mix_seed, AttackConfig, AttackMethod, AttackMode};
use crate::defenses::{PatStyle, TrainConfig, TrainMode};
use crate::error::{Error, Result};
use crate::metrics::BlurSpec;
use crate::models::{Architecture, ModelConfig};

/// Where the train and test splits come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    CifarBinary {
        /// One or more `data_batch_*.bin` files, concatenated in order.
        train_files: Vec<PathBuf>,
        test_file: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synthetic {
        classes: usize,
        train_size: usize,
        test_size: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        height: usize,
        width: usize,
        /// Per-pixel Gaussian noise standard deviation.
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

fn default_channels() -> usize {
    1
}

fn default_noise() -> f64 {
    0.15
}

impl DatasetSpec {
    /// Rewrites relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DatasetSpec::CifarBinary { train_files, test_file, .. } => {
                train_files.iter_mut().for_each(fix);
                fix(test_file);
            }
            DatasetSpec::Synthetic { .. } => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonScale {
    /// ε and step sizes are in [0, 1] intensity units.
    #[default]
    Unit,
    /// ε and step sizes are in 0–255 pixel units and get divided by 255.
    Pixel255,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    #[serde(default = "one")]
    pub width_factor: usize,
    /// Initialisation seed; derived from the global seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default)]
    pub method: AttackMethod,
    pub epsilon: f64,
    #[serde(default)]
    pub epsilon_scale: EpsilonScale,
    /// Per-iteration step; defaults to ε for FGSM.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "one")]
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    /// Target class for a targeted attack.
    #[serde(default)]
    pub target: Option<usize>,
}

impl AttackSection {
    pub fn to_attack_config(&self, seed: u64) -> AttackConfig {
        let scale = match self.epsilon_scale {
            EpsilonScale::Unit => 1.0,
            EpsilonScale::Pixel255 => 255.0,
        };
        let epsilon = self.epsilon / scale;
        AttackConfig {
            method: self.method,
            epsilon,
            step_size: self.step_size.map_or(epsilon, |s| s / scale),
            steps: self.steps,
            random_start: self.random_start,
            mode: self.target.map_or(AttackMode::Untargeted, AttackMode::Targeted),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub pat_style: PatStyle,
    /// Retraining schedule; the `[train]` values are used when absent.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    /// Attack used to craft training examples; the `[attack]` section is
    /// used when absent.
    #[serde(default)]
    pub attack: Option<AttackSection>,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::Pat,
            pat_style: PatStyle::default(),
            epochs: None,
            batch_size: None,
            learning_rate: None,
            attack: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Upper bound on the number of attack candidates.
    #[serde(default = "default_max_count")]
    pub max_count: usize,
    /// Rayon worker threads; 0 means the rayon default. Never affects results.
    #[serde(default)]
    pub workers: usize,
    pub dataset: DatasetSpec,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    #[serde(default)]
    pub defense: DefenseSection,
    #[serde(default)]
    pub blur: BlurSpec,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_max_count() -> usize {
    1000
}

/// Streams for deriving stage seeds from the global seed.
mod stream {
    pub const MODEL: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const ATTACK: u64 = 3;
    pub const CANDIDATES: u64 = 4;
    pub const DEFENSE: u64 = 5;
    pub const DATA: u64 = 6;
    pub const DEFENSE_ATTACK: u64 = 7;
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(config)
    }

    /// Reads a config file; relative dataset paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            config.dataset.resolve_paths(dir);
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::internal(e.to_string()))
    }

    /// Applies one `dotted.key=value` override, with the value parsed as a
    /// TOML literal (bare words are taken as strings).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        let value = parse_value(raw.trim());
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::internal(e.to_string()))?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("`{key}`: `{part}` is not inside a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            slot = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_count == 0 {
            return Err(Error::config("max_count must be ≥ 1"));
        }
        if let DatasetSpec::Synthetic {
            classes,
            train_size,
            test_size,
            channels,
            height,
            width,
            noise,
        } = &self.dataset
        {
            if *classes < 2 || *train_size == 0 || *test_size == 0 || *channels == 0 || *height == 0 || *width == 0 {
                return Err(Error::config("synthetic dataset needs ≥ 2 classes and positive sizes"));
            }
            if !(*noise >= 0.0 && noise.is_finite()) {
                return Err(Error::config("synthetic noise must be finite and ≥ 0"));
            }
        }
        if self.model.architecture == Architecture::Custom {
            return Err(Error::config("custom architectures cannot be built from a config file"));
        }
        self.train_config().validate()?;
        self.attack_config().validate()?;
        self.defense_config().validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the config. `workers` and
    /// `out_dir` are left out: neither changes any result.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config is always serializable");
        if let Some(map) = value.as_object_mut() {
            map.remove("workers");
            map.remove("out_dir");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn data_seed(&self) -> u64 {
        mix_seed(self.seed, stream::DATA)
    }

    pub fn candidate_seed(&self) -> u64 {
        mix_seed(self.seed, stream::CANDIDATES)
    }

    pub fn model_config(&self, input_shape: [usize; 3], num_classes: usize) -> ModelConfig {
        ModelConfig::new(self.model.architecture, input_shape, num_classes)
            .with_width(self.model.width_factor)
            .with_seed(self.model.seed.unwrap_or_else(|| mix_seed(self.seed, stream::MODEL)))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig::standard(t.epochs, t.batch_size, t.learning_rate).with_seed(mix_seed(self.seed, stream::TRAIN))
    }

    pub fn attack_config(&self) -> AttackConfig {
        self.attack.to_attack_config(mix_seed(self.seed, stream::ATTACK))
    }

    pub fn defense_config(&self) -> TrainConfig {
        let d = &self.defense;
        let t = &self.train;
        let attack = d
            .attack
            .as_ref()
            .unwrap_or(&self.attack)
            .to_attack_config(mix_seed(self.seed, stream::DEFENSE_ATTACK));
        let mut config = TrainConfig::standard(
            d.epochs.unwrap_or(t.epochs),
            d.batch_size.unwrap_or(t.batch_size),
            d.learning_rate.unwrap_or(t.learning_rate),
        )
        .with_seed(mix_seed(self.seed, stream::DEFENSE))
        .with_pat_style(d.pat_style);
        if d.mode != TrainMode::Standard {
            config = config.with_defense(d.mode, attack);
        }
        config
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
