//! The JSON run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claims::Window;
use crate::eval::EvalConfig;
use crate::features::FeatureConfig;
use crate::phases::PhaseConfig;
use crate::provenance::{hash_json, Provenance};
use crate::sim::SimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Claims directory read by `phases`, `features` and `oracle-check`.
    pub claims: PathBuf,
    /// Directory holding phases.csv.
    pub phases: PathBuf,
    /// Directory holding features.csv and sequences.jsonl.
    pub features: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            claims: "data".into(),
            phases: "out/phases".into(),
            features: "out/features".into(),
            models: "out/models".into(),
            reports: "out/reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Drives simulation, fold assignment, balancing and model initialization.
    pub seed: u64,
    /// Extraction window of the claims.
    pub window: Window,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    /// Write SVG charts next to the evaluation CSVs.
    pub svg: bool,
    pub paths: PathsConfig,
    pub simulation: SimConfig,
    pub phases: PhaseConfig,
    pub features: FeatureConfig,
    pub evaluation: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            window: Window::default(),
            threads: 0,
            svg: true,
            paths: PathsConfig::default(),
            simulation: SimConfig::default(),
            phases: PhaseConfig::default(),
            features: FeatureConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

impl ConfigError {
    /// Offending keys or messages, one per entry.
    pub fn details(&self) -> Vec<String> {
        match self {
            ConfigError::UnknownKeys(v) | ConfigError::Invalid(v) => v.clone(),
            other => vec![other.to_string()],
        }
    }
}

impl RunConfig {
    /// Parses JSON, rejecting unknown keys (all of them are listed) and
    /// invalid values.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut unknown = Vec::new();
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string())).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        cfg.validated()
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        RunConfig::from_json(&text)
    }

    /// Checks every section and copies the run-level seed and window into
    /// the simulation settings.
    pub fn validated(mut self) -> Result<Self, ConfigError> {
        self.simulation.seed = self.seed;
        self.simulation.window = self.window;
        let mut errors = Vec::new();
        if self.window.start >= self.window.end {
            errors.push("window.start must precede window.end".to_string());
        }
        errors.extend(self.simulation.validate());
        errors.extend(self.phases.validate());
        errors.extend(self.features.validate());
        errors.extend(self.evaluation.validate());
        if let Some(h) = self.evaluation.horizons.iter().find(|h| !self.phases.horizons.contains(h)) {
            errors.push(format!("evaluation horizon {h} is not among phases.horizons"));
        }
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    /// Short hash of the resolved configuration.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.hash(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.simulation.seed, 42);
        assert_eq!(cfg.evaluation.horizons, vec![90, 180, 360]);
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = RunConfig::from_json(r#"{"sed": 1, "phases": {"gap_rule": 3}, "evaluation": {"models": {"mlp": {"hiden": 4}}}}"#).unwrap_err();
        let ConfigError::UnknownKeys(keys) = err else { panic!("{err}") };
        assert_eq!(keys, vec!["sed", "phases.gap_rule", "evaluation.models.mlp.hiden"]);
    }

    #[test]
    fn invalid_values_are_all_reported() {
        let err = RunConfig::from_json(r#"{"evaluation": {"folds": 1, "horizons": [45]}}"#).unwrap_err();
        let details = err.details();
        assert!(details.iter().any(|d| d.contains("folds")), "{details:?}");
        assert!(details.iter().any(|d| d.contains("horizon 45")), "{details:?}");
    }

    #[test]
    fn seed_changes_hash() {
        let a = RunConfig::from_json(r#"{"seed": 1}"#).unwrap();
        let b = RunConfig::from_json(r#"{"seed": 2}"#).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::from_json(r#"{"seed": 1}"#).unwrap().hash());
        assert_eq!(b.simulation.seed, 2);
    }

    #[test]
    fn simulation_window_follows_run_window() {
        let cfg = RunConfig::from_json(r#"{"window": {"start": "2014-01-01", "end": "2016-06-30"}}"#).unwrap();
        assert_eq!(cfg.simulation.window, cfg.window);
    }
}
