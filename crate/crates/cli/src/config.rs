//! Run configuration: defaults, config file, command-line overrides.
//!
//! Config files are flat `key = value` text (`#` comments allowed); a flat
//! JSON object is accepted equivalently. Command-line flags override file
//! values, and the fully resolved configuration is echoed into the output
//! directory so every run is reproducible from its artifacts.

use std::path::{Path, PathBuf};

use fundusnet::model::ArchitectureDescriptor;
use fundusnet::train::TrainConfig;
use fundusnet::{Error, Result};
use serde::Serialize;

/// Environment variable providing the default output directory.
pub const OUT_DIR_ENV: &str = "FUNDUSNET_OUT";

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub csv: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub archive: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub checkpoint_cadence: usize,
    pub threshold: f64,
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub conv_filters: [usize; 3],
    pub dense_units: usize,
    pub lstm_units: usize,
    pub seq_len: usize,
    pub dropout_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = ArchitectureDescriptor::default();
        let t = TrainConfig::default();
        RunConfig {
            csv: None,
            images: None,
            manifest: None,
            archive: None,
            out_dir: std::env::var_os(OUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("run")),
            seed: 0,
            ratio: 0.7,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            checkpoint_cadence: t.checkpoint_cadence,
            threshold: t.threshold,
            input_height: d.input_height,
            input_width: d.input_width,
            input_channels: d.input_channels,
            conv_filters: d.conv_filters,
            dense_units: d.dense_units,
            lstm_units: d.lstm_units,
            seq_len: d.seq_len,
            dropout_rate: d.dropout_rate,
        }
    }
}

impl RunConfig {
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if content.trim_start().starts_with('{') {
            let value: serde_json::Value =
                serde_json::from_str(&content).map_err(|e| Error::Config {
                    key: "<json>".into(),
                    reason: e.to_string(),
                })?;
            let object = value.as_object().ok_or_else(|| Error::Config {
                key: "<json>".into(),
                reason: "top level must be an object".into(),
            })?;
            for (key, v) in object {
                let text = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                self.set(key, &text)?;
            }
        } else {
            for line in content.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                    key: line.to_string(),
                    reason: "expected key = value".into(),
                })?;
                self.set(key.trim(), value.trim())?;
            }
        }
        Ok(())
    }

    /// Apply one key. Unknown keys are errors so typos cannot silently fall
    /// back to defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |reason: String| Error::Config {
            key: key.to_string(),
            reason,
        };
        macro_rules! parse {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|e| bad(format!("cannot parse {value:?}: {e}")))?
            };
        }
        match key {
            "csv" => self.csv = Some(PathBuf::from(value)),
            "images" => self.images = Some(PathBuf::from(value)),
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "archive" => self.archive = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse!(u64),
            "ratio" => self.ratio = parse!(f64),
            "epochs" => self.epochs = parse!(usize),
            "batch_size" => self.batch_size = parse!(usize),
            "learning_rate" => self.learning_rate = parse!(f64),
            "beta1" => self.beta1 = parse!(f64),
            "beta2" => self.beta2 = parse!(f64),
            "epsilon" => self.epsilon = parse!(f64),
            "checkpoint_cadence" => self.checkpoint_cadence = parse!(usize),
            "threshold" => self.threshold = parse!(f64),
            "input_height" => self.input_height = parse!(usize),
            "input_width" => self.input_width = parse!(usize),
            "input_channels" => self.input_channels = parse!(usize),
            "conv_filters" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(bad(format!(
                        "expected three comma-separated counts, got {value:?}"
                    )));
                }
                for (slot, part) in self.conv_filters.iter_mut().zip(&parts) {
                    *slot = part
                        .parse()
                        .map_err(|e| bad(format!("cannot parse {part:?}: {e}")))?;
                }
            }
            "dense_units" => self.dense_units = parse!(usize),
            "lstm_units" => self.lstm_units = parse!(usize),
            "seq_len" => self.seq_len = parse!(usize),
            "dropout_rate" => self.dropout_rate = parse!(f64),
            other => {
                return Err(Error::Config {
                    key: other.to_string(),
                    reason: "unknown configuration key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn descriptor(&self) -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            input_height: self.input_height,
            input_width: self.input_width,
            input_channels: self.input_channels,
            conv_filters: self.conv_filters,
            dense_units: self.dense_units,
            lstm_units: self.lstm_units,
            seq_len: self.seq_len,
            dropout_rate: self.dropout_rate,
            output_units: 1,
        }
    }

    pub fn train_config(&self, out_dir: &Path, start_epoch: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            seed: self.seed,
            checkpoint_cadence: self.checkpoint_cadence,
            checkpoint_path: Some(out_dir.join("model.fnet")),
            loss_log_path: Some(out_dir.join("epochs.csv")),
            start_epoch,
            threshold: self.threshold,
        }
    }

    /// Persist the resolved configuration next to the run's other artifacts.
    pub fn echo(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("config.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Config {
            key: "<echo>".into(),
            reason: e.to_string(),
        })?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}
