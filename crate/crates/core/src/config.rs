//! `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected. The
//! resolved configuration is written beside every run's outputs in the same
//! format, so a run directory's `config.txt` reproduces the run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::DatasetVariant;
use crate::error::{Error, Result};
use crate::network::{Architecture, Encoding, NetworkSpec, Precision, TrainConfig};

pub const KEYS: [&str; 15] = [
    "network",
    "encoding",
    "variant",
    "eval_variant",
    "epochs",
    "batch_size",
    "dropout",
    "validation_size",
    "seed",
    "precision",
    "train_samples",
    "test_samples",
    "data_dir",
    "out",
    "threads",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub network: Architecture,
    pub encoding: Encoding,
    /// Variant the training split is built as.
    pub variant: DatasetVariant,
    /// Variant of the evaluation split; defaults to the one matching
    /// `variant` (see [`ExperimentConfig::evaluation_variant`]).
    pub eval_variant: Option<DatasetVariant>,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub validation_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Prefix of the base training images to use (validation included).
    pub train_samples: Option<usize>,
    /// Prefix of the evaluation split to use.
    pub test_samples: Option<usize>,
    /// Directory holding the four raw MNIST IDX files.
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            network: Architecture::Orn8,
            encoding: Encoding::OrAlign,
            variant: DatasetVariant::Rot,
            eval_variant: None,
            epochs: t.epochs,
            batch_size: t.batch_size,
            dropout: t.dropout,
            validation_size: t.validation_size,
            seed: t.seed,
            precision: t.precision,
            train_samples: None,
            test_samples: None,
            data_dir: PathBuf::from("data/mnist"),
            out: PathBuf::from("runs/default"),
            threads: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn optional(value: &str) -> bool {
    matches!(value, "" | "none" | "all")
}

impl ExperimentConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "network" => self.network = value.parse()?,
            "encoding" => self.encoding = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "eval_variant" => self.eval_variant = if optional(value) { None } else { Some(value.parse()?) },
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "validation_size" => self.validation_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "precision" => self.precision = value.parse()?,
            "train_samples" => self.train_samples = if optional(value) { None } else { Some(parse(key, value)?) },
            "test_samples" => self.test_samples = if optional(value) { None } else { Some(parse(key, value)?) },
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "threads" => self.threads = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key '{other}' (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses a configuration document on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            let k = k.trim().to_string();
            if seen.contains(&k) {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
            cfg.set(&k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            seen.push(k);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.spec()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.train_samples.is_some_and(|n| n <= self.validation_size) {
            return Err(Error::Config("train_samples must exceed validation_size".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::preset(self.network, self.encoding, self.dropout)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            dropout: self.dropout,
            validation_size: self.validation_size,
            seed: self.seed,
            precision: self.precision,
        }
    }

    /// The evaluation split's variant: `eval_variant` when set, else the
    /// rotated test split matching the training variant (`rot_plus` is
    /// evaluated on `rot`, the 12k training split on the 12k test split).
    pub fn evaluation_variant(&self) -> DatasetVariant {
        self.eval_variant.unwrap_or(match self.variant {
            DatasetVariant::RotPlus => DatasetVariant::Rot,
            DatasetVariant::Rot12kTrain => DatasetVariant::Rot12kTest,
            v => v,
        })
    }
}

/// The canonical text form, one key per line in [`KEYS`] order.
impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<usize>| v.map_or("all".to_string(), |n| n.to_string());
        writeln!(f, "network = {}", self.network)?;
        writeln!(f, "encoding = {}", self.encoding)?;
        writeln!(f, "variant = {}", self.variant)?;
        writeln!(f, "eval_variant = {}", self.evaluation_variant())?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "dropout = {}", self.dropout)?;
        writeln!(f, "validation_size = {}", self.validation_size)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "precision = {}", self.precision)?;
        writeln!(f, "train_samples = {}", opt(self.train_samples))?;
        writeln!(f, "test_samples = {}", opt(self.test_samples))?;
        writeln!(f, "data_dir = {}", self.data_dir.display())?;
        writeln!(f, "out = {}", self.out.display())?;
        writeln!(f, "threads = {}", self.threads)
    }
}
