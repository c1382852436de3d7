//! `--config` TOML file. Command-line flags override its values.

use crate::error::{CliError, Result};
use occlass_core::pipeline::{HeadSpec, PostProcess};
use occlass_core::textprep::{TruncationPolicy, TruncationStrategy};
use occlass_core::train::TrainConfig;
use occlass_core::tune::TpeSettings;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Data error at the line where a TOML parse failed.
pub fn toml_error(path: &Path, text: &str, e: toml::de::Error) -> CliError {
    let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
    CliError::data(path, line, e.message())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderOpts {
    pub dim: usize,
    pub ngram: usize,
    pub buckets: u32,
    pub clean: bool,
    pub truncation: TruncationStrategy,
    pub max_len: usize,
    pub head_len: usize,
}

impl Default for EncoderOpts {
    fn default() -> Self {
        let t = TruncationPolicy::default();
        EncoderOpts { dim: 1024, ngram: 2, buckets: 1 << 20, clean: true, truncation: t.strategy, max_len: t.max_len, head_len: t.mixed_head_len }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitOpts {
    pub test_fraction: f64,
    /// Share of the training split held out for early stopping.
    pub val_fraction: f64,
}

impl Default for SplitOpts {
    fn default() -> Self {
        SplitOpts { test_fraction: 0.1, val_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneOpts {
    pub folds: usize,
    pub budget: usize,
    pub tpe: TpeSettings,
}

impl Default for TuneOpts {
    fn default() -> Self {
        TuneOpts { folds: 5, budget: 100, tpe: TpeSettings::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub head: HeadSpec,
    pub encoder: EncoderOpts,
    pub split: SplitOpts,
    pub postprocess: PostProcess,
    pub tune: TuneOpts,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| toml_error(path, &text, e))
    }

    pub fn truncation(&self) -> Result<TruncationPolicy> {
        TruncationPolicy::new(self.encoder.truncation, self.encoder.max_len, self.encoder.head_len).map_err(|e| CliError::usage("--max-len", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_fill_defaults() {
        let c: FileConfig = toml::from_str("[train]\nlearning_rate = 0.01\n[postprocess]\nmode = \"joint_prob\"\nprune_levels = [1]\n").unwrap();
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.train.accumulation_steps, 20);
        assert_eq!(c.postprocess.prune_levels, vec![1]);
        assert_eq!(c.encoder, EncoderOpts::default());
        assert!(toml::from_str::<FileConfig>("[train]\nlr = 1").is_err());
    }

    #[test]
    fn round_trips() {
        let c = FileConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<FileConfig>(&text).unwrap(), c);
    }
}
