//! The JSON configuration file shared by every command. Each section may be
//! omitted (its defaults apply); unknown keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::GeneratorConfig;
use crate::error::{Error, Result};
use crate::experiments::ExperimentConfig;
use crate::pipeline::RestorerConfig;
use crate::readability::ClassifierConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub size: usize,
    /// train / val / test fractions
    pub split: (f64, f64, f64),
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 200,
            size: 64,
            split: (0.64, 0.16, 0.20),
            generator: GeneratorConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.size < 32 {
            return Err(Error::Config(format!(
                "data: count must be >= 1 and size >= 32, got {} and {}",
                self.count, self.size
            )));
        }
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|&r| !(r > 0.0)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data: split {:?} must be positive and sum to 1", self.split)));
        }
        self.generator.validate().map_err(|e| Error::Config(format!("data.generator: {e}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub data: DataConfig,
    pub readability: ClassifierConfig,
    pub restorer: RestorerConfig,
    pub experiments: ExperimentConfig,
}

impl AppConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: AppConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.readability.validate()?;
        self.restorer.validate()?;
        self.experiments.validate()
    }

    /// Every seed in the file replaced by `seed`, as the `--seed` flag does.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.restorer.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(AppConfig::from_json("{}").unwrap(), AppConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = AppConfig::default();
        cfg.data.count = 37;
        cfg.restorer.epochs = 3;
        cfg.experiments.eval_limit = Some(5);
        assert_eq!(AppConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = AppConfig::from_json(r#"{"restorer": {"fusion": {"strategy": "upsample_dynamic"}, "epochs": 2}}"#).unwrap();
        assert_eq!(cfg.restorer.epochs, 2);
        assert_eq!(cfg.restorer.fusion.strategy.key(), "upsample_dynamic");
        assert_eq!(cfg.restorer.batch_size, RestorerConfig::default().batch_size);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"restorer": {"epoch": 3}}"#,
            r#"{"restorer": {"fusion": {"strategy": "nearest_static"}}}"#,
            r#"{"restorer": {"denoiser": {"backbone": "transformer"}}}"#,
            r#"{"readability": {"learning_rate": 0}}"#,
            r#"{"data": {"split": [0.5, 0.5, 0.5]}}"#,
            r#"{"data": {"size": 16}}"#,
            "not json",
        ] {
            let err = AppConfig::from_json(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err:?}");
            assert_eq!(err.exit_code(), 2);
        }
    }
}
