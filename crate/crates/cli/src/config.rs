//! TOML run configuration. Every key is optional; flags given on the command
//! line take precedence over values read here.
//!
//! ```toml
//! seed = 3
//! mode = "spdrf-capped"
//!
//! [paths]
//! train = "data/train.csv"
//! test = "data/test.csv"
//! checkpoint = "out/model.json"
//! report = "out/paces.csv"
//! target_column = "t"
//!
//! [synth]
//! n_samples = 2000
//! outlier_fraction = 0.15
//!
//! [train]
//! steps_per_pace = 500
//! learning_rate = { initial = 1.0, factor = 0.5, period = 500 }
//! schedule = { fractions = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0], exclude_fraction = 0.15 }
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use spdrf_core::data::SyntheticSpec;
use spdrf_core::trainer::{Mode, TrainConfig};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub target_column: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds both data generation and training.
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub paths: Paths,
    pub synth: SyntheticSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let table: toml::Table = text.parse()?;
        // one seed drives everything; section-level seeds would split it
        for section in ["synth", "train"] {
            if let Some(toml::Value::Table(t)) = table.get(section) {
                if t.contains_key("seed") {
                    bail!("unknown key `{section}.seed`: set the top-level `seed` instead");
                }
            }
        }
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }
}
