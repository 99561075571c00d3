//! Run configuration file: one TOML document with a section per stage.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::{LayoutSpec, ToySpec};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::training::TrainConfig;

/// Where the corpus lives and which splits to use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
    pub layout: LayoutSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            root: None,
            train_split: "dev".into(),
            test_split: "test".into(),
            layout: LayoutSpec::default(),
        }
    }
}

/// Synthetic corpus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub tracks: usize,
    pub test_tracks: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub sources: Vec<String>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            tracks: 8,
            test_tracks: 4,
            duration_s: 8.0,
            sample_rate: 8000,
            seed: 0,
            sources: vec!["tone".into(), "noise".into()],
        }
    }
}

impl ToyConfig {
    /// Specs for the training split and, if `test_tracks > 0`, the test split.
    pub fn specs(&self, train_split: &str, test_split: &str) -> Result<Vec<ToySpec>> {
        if self.tracks == 0 {
            return Err(Error::Config("toy.tracks must be >= 1".into()));
        }
        let mut dev = ToySpec::with_sources(&self.sources, self.tracks, self.duration_s, self.sample_rate, self.seed)?;
        dev.split = train_split.into();
        let mut out = vec![dev.clone()];
        if self.test_tracks > 0 {
            let mut test = dev;
            test.split = test_split.into();
            test.n_tracks = self.test_tracks;
            test.seed = self.seed.wrapping_add(1);
            out.push(test);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub toy: ToyConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Parses a run configuration; unknown keys are errors that name the key.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
    Ok(cfg)
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config snapshot: {e}")))
    }
}
