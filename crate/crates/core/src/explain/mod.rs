//! Suggestions shown before the model's verdict: the rule path a case
//! follows through the tree, and randomized-mask importance scores for any
//! black-box scorer.

pub mod grid;
pub mod mask;
pub mod palette;
pub mod rules;

pub use grid::{mask_importance_grid, GridConfig, GridMask, MaskedImagePredictor, RegionBrightness};
pub use mask::{mask_importance, BlackBox, FnBlackBox, MaskConfig, MaskSampling, PredictorFailure, Saliency};
pub use palette::Palette;
pub use rules::{extract_rule_path, render_rules, Clause, Comparator, Operand, RuleExplanation, StyledLine, StyledRuleText};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ExplainError {
    #[error("unknown palette `{0}`")]
    UnknownPalette(String),
    #[error("invalid mask configuration: {0}")]
    InvalidConfig(String),
    #[error("predictor `{predictor}` failed at mask {mask_index}: {message}")]
    PredictorFailed {
        predictor: String,
        mask_index: usize,
        message: String,
    },
    #[error("predictor `{predictor}` failed on the unmasked input: {message}")]
    ReferenceFailed { predictor: String, message: String },
    /// `mask_index` is `None` for the unmasked input.
    #[error("timed out waiting for predictor at {endpoint} ({})", .mask_index.map_or("unmasked input".to_string(), |i| format!("mask {i}")))]
    Timeout { endpoint: String, mask_index: Option<usize> },
}
