//! Run configuration: a TOML file with one optional section per command,
//! merged with command-line flags. Flags win over the file, the file wins
//! over built-in defaults.
//!
//! ```toml
//! seed = 7
//! threads = 1
//! out = "runs/hawkes1"
//!
//! [simulate]
//! process = "hawkes1"
//! n = 20000
//!
//! [fit]
//! data = "runs/hawkes1/hawkes1.txt"
//! model = "chfn"
//! depth_grid = [5, 10, 20, 40]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpp_core::events::SequenceFormat;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub process: Option<String>,
    pub n: Option<usize>,
    pub sequences: Option<usize>,
    pub format: Option<SequenceFormat>,
    pub mu: Option<f64>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

/// Architecture overrides; unset fields keep the standard sizes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub rnn_units: Option<usize>,
    pub hidden_layers: Option<usize>,
    pub hidden_units: Option<usize>,
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub data: Option<PathBuf>,
    pub model: Option<String>,
    pub train_frac: Option<f64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub depth_grid: Option<Vec<usize>>,
    pub validation_fraction: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub arch: ArchSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub data: Option<PathBuf>,
    pub checkpoints: Option<Vec<PathBuf>>,
    pub train_frac: Option<f64>,
    pub true_spec: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub train_frac: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub reports: Option<Vec<PathBuf>>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// `flag`, else `file`, else `default`.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// `flag`, else `file`, else a usage error naming the missing setting.
pub fn require<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T, CliError> {
    flag.or(file)
        .ok_or_else(|| CliError::Usage(format!("missing required setting `{name}`")))
}
