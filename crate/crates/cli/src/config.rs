//! Run configuration: command-line flags layered over an optional JSON file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Deserializer, Serialize};

/// Every option any command understands. Unset fields fall back to the
/// config file, then to the command's default.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// JSON file with default values for any of these options.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Output directory; the resolved configuration is written there too.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    /// Newton step attenuation; `train` accepts a comma list for a sweep.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1)]
    #[serde(skip_serializing_if = "Option::is_none", deserialize_with = "one_or_many")]
    pub alpha: Option<Vec<f64>>,

    /// Additive noise factor.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,

    /// scaled | unscaled | dropout | none
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_mode: Option<String>,

    /// Retention rate for `--noise-mode dropout`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout_p: Option<f64>,

    /// none | conventional | normality
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm: Option<String>,

    /// batch | layer | instance | group
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grouping: Option<String>,

    /// Channels per group for `--grouping group`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,

    /// Noise factor of the robustness probe.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,

    /// Monte Carlo draws of the robustness probe.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<usize>,

    /// Also report the grid-search λ and its NLL.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub oracle: bool,

    /// Undo a previous `gaussianize` using its parameter file.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub inverse: bool,

    /// Input CSV.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,

    /// Output CSV.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,

    /// Parameter sidecar of `gaussianize` (default: `<output>.params.json`).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,

    /// Comma list of column names (default: every feature column).
    #[arg(long, global = true, value_delimiter = ',', num_args = 1)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,

    /// Dataset: a CSV path, `idx:<images>,<labels>` or
    /// `synth:<skewed-features|blobs|two-moons>[:<n>]`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,

    /// Validation dataset, same syntax as `--data`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_data: Option<String>,

    /// Hold out the last N rows of `--data` for validation.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_split: Option<usize>,

    /// Hidden layer widths.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_decay_factor: Option<f64>,

    /// Epochs between learning-rate decays (0 = constant).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_decay_every: Option<usize>,

    /// Checkpoint written by `train`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,

    /// Channels sampled per layer by `diagnose`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,

    /// Evaluation batches used by `diagnose`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batches: Option<usize>,

    /// Layers receiving noise in `robustness` (default: all but the last).
    #[arg(long, global = true, value_delimiter = ',', num_args = 1)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inject: Option<Vec<usize>>,

    /// Layers probed in `robustness` (default: every later layer).
    #[arg(long, global = true, value_delimiter = ',', num_args = 1)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<Vec<usize>>,

    /// Dataset for the global noise scales (default: `--data`).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_data: Option<String>,

    /// Sample sizes for `bench`.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,

    /// Channel count for `bench`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,

    /// Timed repetitions per size in `bench`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<f64>>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(Option::<OneOrMany>::deserialize(d)?.map(|v| match v {
        OneOrMany::One(x) => vec![x],
        OneOrMany::Many(xs) => xs,
    }))
}

/// Raised for malformed configuration files; mapped to the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

impl RunConfig {
    /// Flags take precedence over values from `--config`.
    pub fn resolve(flags: RunConfig) -> Result<RunConfig> {
        let Some(path) = flags.config.clone() else {
            return Ok(flags);
        };
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let file: RunConfig = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        let mut merged = serde_json::to_value(&file)?;
        let over = serde_json::to_value(&flags)?;
        if let (Some(m), serde_json::Value::Object(o)) = (merged.as_object_mut(), over) {
            for (k, v) in o {
                m.insert(k, v);
            }
        }
        let mut out: RunConfig = serde_json::from_value(merged)?;
        out.config = Some(path);
        Ok(out)
    }

    /// Writes the resolved configuration as `<out>/<name>_config.json`.
    pub fn write_resolved(&self, out: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(out)?;
        let path = out.join(format!("{name}_config.json"));
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}
