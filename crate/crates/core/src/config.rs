//! Service configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finetune::SamplingPolicy;
use crate::session::StepFlags;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Source CSV of labeled applicants.
    pub dataset: PathBuf,
    /// Content-addressed artifact directory.
    pub artifacts: PathBuf,
    /// Audit log file.
    pub log: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: PathBuf::from("data/loan_data.csv"),
            artifacts: PathBuf::from("state/artifacts"),
            log: PathBuf::from("state/audit.log"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub case_study: usize,
    pub temporary: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 18_000, case_study: 200, temporary: 1795, seed: 20_250_416 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig { max_depth: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    pub n_masks: usize,
    pub mask_prob: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub palette: String,
    /// Base seed; each session derives its own mask seed from it.
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig { n_masks: 1500, mask_prob: 0.5, grid_h: 7, grid_w: 7, palette: "vivid6".into(), seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub n_components: usize,
    pub k: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig { n_components: 14, k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub policy: SamplingPolicy,
    /// User decisions needed before a retrain is attempted.
    pub threshold: usize,
    pub floor: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { policy: SamplingPolicy::BinaryPair, threshold: 50, floor: 0.75, seed: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub listen: String,
    pub authority_token: String,
    /// External predictor endpoints to register at startup.
    pub predictors: Vec<String>,
    pub predictor_timeout_ms: u64,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            listen: "127.0.0.1:8080".into(),
            authority_token: String::new(),
            predictors: Vec::new(),
            predictor_timeout_ms: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub tree: TreeConfig,
    pub explainer: ExplainerConfig,
    pub similarity: SimilarityConfig,
    pub finetune: FinetuneConfig,
    pub steps: StepFlags,
    pub service: ServiceSection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid TOML: {0}")]
    Parse(String),
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<ServiceConfig, ConfigError> {
        let cfg: ServiceConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ServiceConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_relative_to(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative data paths relative to the config file's directory.
    pub fn resolve_relative_to(&mut self, base: &Path) {
        for p in [&mut self.data.dataset, &mut self.data.artifacts, &mut self.data.log] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, field: &str, message: &str| {
            if !ok {
                errs.push(FieldError { field: field.into(), message: message.into() });
            }
        };
        need(self.similarity.k >= 1, "similarity.k", "must be at least 1");
        need(self.similarity.n_components >= 1, "similarity.n_components", "must be at least 1");
        need(self.explainer.n_masks >= 1, "explainer.n_masks", "must be at least 1");
        need(
            self.explainer.mask_prob > 0.0 && self.explainer.mask_prob <= 1.0,
            "explainer.mask_prob",
            "must be in (0, 1]",
        );
        need(self.explainer.grid_h >= 1, "explainer.grid_h", "must be at least 1");
        need(self.explainer.grid_w >= 1, "explainer.grid_w", "must be at least 1");
        need(
            crate::explain::Palette::by_id(&self.explainer.palette).is_ok(),
            "explainer.palette",
            "unknown palette",
        );
        need(self.finetune.threshold >= 1, "finetune.threshold", "must be at least 1");
        need((0.0..=1.0).contains(&self.finetune.floor), "finetune.floor", "must be in [0, 1]");
        need(self.split.train.is_multiple_of(2) && self.split.train > 0, "split.train", "must be a positive even number");
        need(self.split.case_study.is_multiple_of(2) && self.split.case_study > 0, "split.case_study", "must be a positive even number");
        need(self.service.listen.parse::<std::net::SocketAddr>().is_ok(), "service.listen", "must be host:port");
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = ServiceConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ServiceConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.explainer.n_masks, 1500);
        assert_eq!(cfg.similarity.k, 3);
    }

    #[test]
    fn field_level_errors() {
        let err = ServiceConfig::from_toml("[similarity]\nk = 0\n[finetune]\nfloor = 1.5\n").unwrap_err();
        match err {
            ConfigError::Invalid(v) => {
                let fields: Vec<&str> = v.iter().map(|e| e.field.as_str()).collect();
                assert_eq!(fields, vec!["similarity.k", "finetune.floor"]);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(matches!(ServiceConfig::from_toml("[tree]\ndepth = 3\n"), Err(ConfigError::Parse(_))));
    }
}
