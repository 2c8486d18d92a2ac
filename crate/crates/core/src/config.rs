//! Top-level run configuration, as read by the command-line tool.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::SimulationConfig;
use crate::error::{Error, Result};
use crate::inference::MaskPolicy;
use crate::model::ArchConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub simulation: SimulationConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub policy: MaskPolicy,
}

impl RunConfig {
    /// Settings sized for a single CPU: the reduced-width architecture and
    /// a small corpus.
    pub fn desk() -> Self {
        Self {
            arch: ArchConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.policy.validate()
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"steps": 7}, "policy": {"alpha": 1.0}}"#, Path::new("x.json")).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.policy.beta, 0.01);
        assert_eq!(cfg.arch, ArchConfig::default());
    }

    #[test]
    fn unknown_and_invalid_fields_are_rejected() {
        let err = RunConfig::from_json(r#"{"trian": {}}"#, Path::new("run.json")).unwrap_err();
        assert!(err.to_string().contains("run.json"));
        let err = RunConfig::from_json(r#"{"policy": {"beta": 2.0}}"#, Path::new("run.json")).unwrap_err();
        assert!(err.to_string().contains("beta"));
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text, Path::new("a")).unwrap(), cfg);
    }
}
