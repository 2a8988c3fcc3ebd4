//! Experiment specification: a flat TOML file whose grid axes are lists.
//!
//! ```toml
//! mode = "dsbd"
//! gamma = [2, 3]
//! ws = [2, 3, 4]
//! threshold_t = [0.7, 0.9]
//! wmin = [1]
//! vocab_size = 6
//! divergence = 0.3
//! trials = 50
//! ```
//!
//! Every key has a command-line flag of the same name (dashes for
//! underscores); flags override file values.

use std::path::{Path, PathBuf};

use dsbd_core::engine::Mode;
use dsbd_core::verifier::{PruneRule, RatioRule};
use dsbd_core::WarpSpec;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(HarnessError::Spec(format!("unknown format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub gamma: Vec<usize>,
    pub ws: Vec<usize>,
    pub threshold_t: Vec<f64>,
    pub wmin: Vec<usize>,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub vocab_size: usize,
    pub order: usize,
    pub divergence: f64,
    /// Dirichlet concentration of the model rows.
    pub concentration: f64,
    pub model_seed: u64,
    pub rng_seed: u64,
    pub trials: usize,
    pub max_new_tokens: usize,
    /// Length of the random prompt drawn for each trial.
    pub prompt_len: usize,
    pub ratio: RatioRule,
    pub prune: PruneRule,
    pub out: Option<PathBuf>,
    pub format: Format,
    /// Acceptance suites to run after the grid.
    pub tests: Vec<String>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Dsbd,
            gamma: vec![3],
            ws: vec![4],
            threshold_t: vec![0.7],
            wmin: vec![1],
            top_k: None,
            top_p: None,
            vocab_size: 6,
            order: 1,
            divergence: 0.3,
            concentration: 1.0,
            model_seed: 11,
            rng_seed: 7,
            trials: 20,
            max_new_tokens: 24,
            prompt_len: 2,
            ratio: RatioRule::default(),
            prune: PruneRule::default(),
            out: None,
            format: Format::Csv,
            tests: Vec::new(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|source| HarnessError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn warp(&self) -> WarpSpec {
        WarpSpec {
            top_k: self.top_k,
            top_p: self.top_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("gamma", self.gamma.len()),
            ("ws", self.ws.len()),
            ("threshold_t", self.threshold_t.len()),
            ("wmin", self.wmin.len()),
        ];
        if let Some((name, _)) = axes.iter().find(|(_, n)| *n == 0) {
            return Err(HarnessError::Spec(format!("grid axis {name} is empty")));
        }
        if self.trials < 1 {
            return Err(HarnessError::Spec("trials must be >= 1".into()));
        }
        if self.prompt_len < 1 {
            return Err(HarnessError::Spec("prompt_len must be >= 1".into()));
        }
        self.warp().validate()?;
        Ok(())
    }
}
