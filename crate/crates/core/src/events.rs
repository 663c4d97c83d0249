//! Typed bodies of audit-log entries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audit::LogKind;
use crate::config::ExplainerConfig;
use crate::dataset::Dataset;
use crate::explain::{GridConfig, Saliency};
use crate::finetune::{Origin, RetrainOutcome, SamplingPolicy};
use crate::predictor::PredictorDescriptor;
use crate::session::{Action, Decision, Step, StepFlags};
use crate::suggest::{ConfidenceRecord, ExplanationRecord, NeighborsRecord};

/// A body that knows which entry kind it belongs to.
pub trait EventBody: Serialize {
    const KIND: LogKind;
}

macro_rules! body_kind {
    ($t:ty, $k:ident) => {
        impl EventBody for $t {
            const KIND: LogKind = LogKind::$k;
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Source,
    Train,
    CaseStudy,
    Temporary,
    /// Training set after a rehearsal retrain that was swapped in.
    Merged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDerivation {
    pub source_hash: String,
    pub train: usize,
    pub case_study: usize,
    pub temporary: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRegistered {
    pub role: DatasetRole,
    pub dataset_hash: String,
    pub rows: usize,
    pub label_counts: BTreeMap<String, usize>,
    pub schema_version: String,
    pub split: Option<SplitDerivation>,
    pub ingest_warnings: usize,
}
body_kind!(DatasetRegistered, DatasetRegistered);

impl DatasetRegistered {
    pub fn of(role: DatasetRole, ds: &Dataset, split: Option<SplitDerivation>) -> Self {
        DatasetRegistered {
            role,
            dataset_hash: ds.content_hash.clone(),
            rows: ds.len(),
            label_counts: ds.label_counts().into_iter().map(|(l, c)| (l.as_str().to_string(), c)).collect(),
            schema_version: ds.schema.version.clone(),
            split,
            ingest_warnings: ds.warnings.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTrained {
    pub model_hash: String,
    pub train_hash: String,
    pub max_depth: usize,
    pub seed: u64,
    pub train_accuracy: f64,
    pub case_study_accuracy: Option<f64>,
}
body_kind!(ModelTrained, ModelTrained);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub code: String,
    pub message: String,
}

/// Parameters fixed when a session is created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSetup {
    pub flags: StepFlags,
    pub model_hash: String,
    pub reference_hash: String,
    pub n_components: usize,
    pub k: usize,
    pub mask_seed: u64,
    pub explainer: ExplainerConfig,
    pub row_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub session_id: Option<String>,
    pub case_id: Option<u64>,
    pub action: Action,
    pub accepted: bool,
    pub seq: u64,
    pub from: Option<Step>,
    pub to: Option<Step>,
    pub at: String,
    pub error: Option<ErrorInfo>,
    pub payload_kind: Option<String>,
    pub payload_digest: Option<String>,
    pub warnings: Vec<String>,
    pub setup: Option<SessionSetup>,
}
body_kind!(SessionEvent, SessionEvent);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SaliencyComputed {
    Tabular {
        session_id: String,
        mask_seed: u64,
        record: ExplanationRecord,
    },
    External {
        endpoint: String,
        predictor_hash: String,
        payload: Value,
        config: GridConfig,
        saliency: Saliency,
        scores_digest: String,
        replies_digest: String,
    },
}
body_kind!(SaliencyComputed, SaliencyComputed);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborsComputed {
    pub session_id: String,
    pub record: NeighborsRecord,
}
body_kind!(NeighborsComputed, NeighborsComputed);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRevealed {
    pub session_id: String,
    pub record: ConfidenceRecord,
}
body_kind!(ConfidenceRevealed, ConfidenceRevealed);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionFinalized {
    pub decision: Decision,
    pub row_id: u64,
    pub model_hash: String,
}
body_kind!(DecisionFinalized, DecisionFinalized);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulatedEntry {
    pub row_id: u64,
    pub class: usize,
    #[serde(flatten)]
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneAccumulated {
    pub session_id: String,
    pub policy: SamplingPolicy,
    pub seed: u64,
    pub entries: Vec<AccumulatedEntry>,
    pub warnings: Vec<String>,
    pub pool_remaining: usize,
    pub set_sessions: usize,
    pub set_size: usize,
}
body_kind!(FinetuneAccumulated, FinetuneAccumulated);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainTrigger {
    Threshold,
    Forced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainAttempted {
    pub trigger: RetrainTrigger,
    pub base_hash: String,
    pub merged_hash: Option<String>,
    pub finetune_sessions: usize,
    pub finetune_size: usize,
    pub max_depth: usize,
    pub seed: u64,
    pub holdout_hash: String,
    pub outcome: Option<RetrainOutcome>,
    pub error: Option<String>,
}
body_kind!(RetrainAttempted, RetrainAttempted);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSwapped {
    pub from: String,
    pub to: String,
    pub base_hash: String,
    pub holdout_accuracy: f64,
    pub floor: f64,
}
body_kind!(ModelSwapped, ModelSwapped);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub message: String,
    pub context: Value,
}
body_kind!(Warning, Warning);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorStatus {
    New,
    Unchanged,
    HashChanged,
    Acknowledged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorRegistered {
    pub descriptor: PredictorDescriptor,
    pub status: PredictorStatus,
    pub previous_hash: Option<String>,
    pub blocked: bool,
}
body_kind!(PredictorRegistered, PredictorRegistered);
