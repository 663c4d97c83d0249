//! The step-gated decision session.
//!
//! ```text
//! CaseSelected → FirstImpression → ExplanationShown → SimilarityShown → ConfidenceShown → Finalized
//! ```
//!
//! Forward and backward moves go one enabled step at a time. Skip jumps from
//! CaseSelected or FirstImpression straight to ConfidenceShown and cannot be
//! undone. Disabled suggestion steps are left out of the graph.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dataset::Label;
use crate::explain::StyledRuleText;
use crate::similarity::PlotData;
use crate::tree::ClassDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Step {
    CaseSelected,
    FirstImpression,
    ExplanationShown,
    SimilarityShown,
    ConfidenceShown,
    Finalized,
}

impl Step {
    pub const ALL: [Step; 6] = [
        Step::CaseSelected,
        Step::FirstImpression,
        Step::ExplanationShown,
        Step::SimilarityShown,
        Step::ConfidenceShown,
        Step::Finalized,
    ];

    pub fn reveals_outcome(self) -> bool {
        self >= Step::ConfidenceShown
    }
}

impl std::fmt::Display for Step {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Which optional steps are part of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    pub explanation: bool,
    pub similarity: bool,
    /// Tabular mask importance alongside the rule view.
    pub saliency: bool,
    /// Abstention before the confidence step.
    pub early_abstention: bool,
}

impl Default for StepFlags {
    fn default() -> Self {
        StepFlags { explanation: true, similarity: true, saliency: true, early_abstention: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalLabel {
    Grant,
    Deny,
    Abstain,
}

impl FinalLabel {
    pub fn as_label(self) -> Option<Label> {
        match self {
            FinalLabel::Grant => Some(Label::Grant),
            FinalLabel::Deny => Some(Label::Deny),
            FinalLabel::Abstain => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Create,
    Impression { label: Option<Label>, note: String },
    Advance,
    Back,
    Skip,
    Annotate { label: Option<Label>, note: String },
    Finalize { decision: FinalLabel, note: Option<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Create,
    Impression,
    Advance,
    Back,
    Skip,
    Annotate,
    Finalize,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Create => ActionKind::Create,
            Action::Impression { .. } => ActionKind::Impression,
            Action::Advance => ActionKind::Advance,
            Action::Back => ActionKind::Back,
            Action::Skip => ActionKind::Skip,
            Action::Annotate { .. } => ActionKind::Annotate,
            Action::Finalize { .. } => ActionKind::Finalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub step: Step,
    pub text: String,
    pub timestamp: String,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub session_id: String,
    pub case_id: u64,
    pub final_label: FinalLabel,
    pub decided_at: String,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub case_id: u64,
    pub step: Step,
    pub provisional_label: Option<Label>,
    pub notes: Vec<Note>,
    pub skip_used: bool,
    /// Set once any suggestion step has been entered.
    pub suggestions_seen: bool,
    pub started: String,
    pub updated: String,
    pub config_snapshot: StepFlags,
    /// Model serving this session for its whole lifetime.
    pub model_hash: String,
    /// Accepted transitions so far.
    pub seq: u64,
    pub decision: Option<Decision>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum GateError {
    #[error("`{action:?}` is not allowed at {current}; allowed at {allowed:?}")]
    WrongStep { action: ActionKind, current: Step, allowed: Vec<Step> },
    #[error("session is finalized; `{action:?}` is not allowed")]
    Terminal { action: ActionKind },
    #[error("cannot skip to the confidence step after suggestions were shown")]
    SkipAfterSuggestions { current: Step },
    #[error("cannot go back after skipping to the confidence step")]
    BackAfterSkip { current: Step },
    #[error("only abstention is allowed before the confidence step, and only when early abstention is enabled")]
    EarlyDecision { current: Step },
}

impl GateError {
    pub fn current(&self) -> Step {
        match self {
            GateError::WrongStep { current, .. }
            | GateError::SkipAfterSuggestions { current }
            | GateError::BackAfterSkip { current }
            | GateError::EarlyDecision { current } => *current,
            GateError::Terminal { .. } => Step::Finalized,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            GateError::Terminal { .. } => "terminal_state",
            _ => "gating",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: Step,
    pub to: Step,
    pub seq: u64,
    pub warnings: Vec<String>,
}

impl SessionState {
    pub fn new(session_id: String, case_id: u64, flags: StepFlags, model_hash: String, now: &str) -> SessionState {
        SessionState {
            session_id,
            case_id,
            step: Step::CaseSelected,
            provisional_label: None,
            notes: Vec::new(),
            skip_used: false,
            suggestions_seen: false,
            started: now.to_string(),
            updated: now.to_string(),
            config_snapshot: flags,
            model_hash,
            seq: 0,
            decision: None,
        }
    }

    pub fn enabled_steps(&self) -> Vec<Step> {
        Step::ALL
            .into_iter()
            .filter(|s| match s {
                Step::ExplanationShown => self.config_snapshot.explanation,
                Step::SimilarityShown => self.config_snapshot.similarity,
                _ => true,
            })
            .collect()
    }

    fn neighbor(&self, step: Step, forward: bool) -> Option<Step> {
        let steps = self.enabled_steps();
        let i = steps.iter().position(|s| *s == step)?;
        if forward {
            steps.get(i + 1).copied()
        } else {
            i.checked_sub(1).map(|j| steps[j])
        }
    }

    /// Actions that would be accepted in the current state.
    pub fn legal_actions(&self) -> Vec<ActionKind> {
        let probes = [
            Action::Impression { label: None, note: String::new() },
            Action::Advance,
            Action::Back,
            Action::Skip,
            Action::Annotate { label: None, note: String::new() },
            Action::Finalize { decision: FinalLabel::Abstain, note: None },
        ];
        probes
            .iter()
            .filter(|a| self.clone().apply(a, &self.updated).is_ok())
            .map(Action::kind)
            .collect()
    }

    /// Applies `action`, or leaves the state untouched and explains why not.
    pub fn apply(&mut self, action: &Action, now: &str) -> Result<Transition, GateError> {
        let from = self.step;
        let kind = action.kind();
        if from == Step::Finalized {
            return Err(GateError::Terminal { action: kind });
        }
        let wrong = |allowed: Vec<Step>| GateError::WrongStep { action: kind, current: from, allowed };
        let mut warnings = Vec::new();
        let to = match action {
            Action::Create => return Err(wrong(Vec::new())),
            Action::Impression { label, note } => {
                if from != Step::CaseSelected {
                    return Err(wrong(vec![Step::CaseSelected]));
                }
                if note.trim().is_empty() {
                    warnings.push("empty_note".to_string());
                }
                self.provisional_label = *label;
                self.notes.push(Note { step: Step::FirstImpression, text: note.clone(), timestamp: now.to_string(), label: *label });
                Step::FirstImpression
            }
            Action::Advance => {
                let allowed: Vec<Step> = self
                    .enabled_steps()
                    .into_iter()
                    .filter(|s| (Step::FirstImpression..Step::ConfidenceShown).contains(s))
                    .collect();
                if !allowed.contains(&from) {
                    return Err(wrong(allowed));
                }
                self.neighbor(from, true).expect("confidence step is always enabled")
            }
            Action::Back => {
                if from == Step::CaseSelected {
                    let steps = self.enabled_steps();
                    return Err(wrong(steps[1..steps.len() - 1].to_vec()));
                }
                if self.skip_used && from == Step::ConfidenceShown {
                    return Err(GateError::BackAfterSkip { current: from });
                }
                self.neighbor(from, false).expect("not the first step")
            }
            Action::Skip => {
                if !matches!(from, Step::CaseSelected | Step::FirstImpression) {
                    return Err(wrong(vec![Step::CaseSelected, Step::FirstImpression]));
                }
                if self.suggestions_seen {
                    return Err(GateError::SkipAfterSuggestions { current: from });
                }
                self.skip_used = true;
                Step::ConfidenceShown
            }
            Action::Annotate { label, note } => {
                if !(Step::FirstImpression..=Step::ConfidenceShown).contains(&from) {
                    return Err(wrong(
                        self.enabled_steps()
                            .into_iter()
                            .filter(|s| (Step::FirstImpression..=Step::ConfidenceShown).contains(s))
                            .collect(),
                    ));
                }
                if label.is_some() {
                    self.provisional_label = *label;
                }
                self.notes.push(Note { step: from, text: note.clone(), timestamp: now.to_string(), label: *label });
                from
            }
            Action::Finalize { decision, note } => {
                if from != Step::ConfidenceShown {
                    let early = self.config_snapshot.early_abstention && *decision == FinalLabel::Abstain;
                    if !early {
                        return Err(GateError::EarlyDecision { current: from });
                    }
                }
                if let Some(n) = note {
                    self.notes.push(Note { step: Step::Finalized, text: n.clone(), timestamp: now.to_string(), label: decision.as_label() });
                }
                self.decision = Some(Decision {
                    session_id: self.session_id.clone(),
                    case_id: self.case_id,
                    final_label: *decision,
                    decided_at: now.to_string(),
                    note: note.clone(),
                });
                Step::Finalized
            }
        };
        if matches!(to, Step::ExplanationShown | Step::SimilarityShown) {
            self.suggestions_seen = true;
        }
        self.step = to;
        self.seq += 1;
        self.updated = now.to_string();
        Ok(Transition { from, to, seq: self.seq, warnings })
    }
}

/// Case attributes as shown on every page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    pub case_id: u64,
    pub attributes: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: String,
    pub score: f64,
}

/// Mask importance without the explained class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyView {
    pub scores: Vec<FeatureScore>,
    pub n_masks: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborView {
    pub case_id: u64,
    pub outcome: Option<Label>,
    pub distance: f64,
    pub attributes: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepPayload {
    Case { case: CaseView },
    Explanation { case: CaseView, rules: Option<StyledRuleText>, saliency: Option<SaliencyView> },
    Similarity { case: CaseView, neighbors: Vec<NeighborView>, short: bool, plot: Option<PlotData>, plot_notice: Option<String> },
    Confidence { case: CaseView, distribution: ClassDistribution, predicted_class: String },
    Decision { case: CaseView, decision: Decision },
}

impl StepPayload {
    pub fn kind_name(&self) -> &'static str {
        match self {
            StepPayload::Case { .. } => "case",
            StepPayload::Explanation { .. } => "explanation",
            StepPayload::Similarity { .. } => "similarity",
            StepPayload::Confidence { .. } => "confidence",
            StepPayload::Decision { .. } => "decision",
        }
    }
}

/// Payload kinds permitted at each step.
pub fn allowed_payload_kinds(step: Step) -> &'static [&'static str] {
    match step {
        Step::CaseSelected | Step::FirstImpression => &["case"],
        Step::ExplanationShown => &["explanation"],
        Step::SimilarityShown => &["similarity"],
        Step::ConfidenceShown => &["confidence"],
        Step::Finalized => &["decision"],
    }
}

/// Keys that carry a model verdict or its confidence.
pub const OUTCOME_KEYS: &[&str] = &[
    "predicted_class",
    "prediction",
    "probabilities",
    "probability",
    "confidence",
    "distribution",
    "class_counts",
    "leaf_class_counts",
    "explained_class",
];

/// Schema check on a serialized response for `step`: the payload kind must be
/// one permitted at that step, and before the confidence step no object at
/// any depth may carry an outcome key.
pub fn check_outcome_hidden(step: Step, response: &Value) -> Result<(), String> {
    let payload = response.get("payload").unwrap_or(response);
    if let Some(kind) = payload.get("kind").and_then(Value::as_str) {
        if !allowed_payload_kinds(step).contains(&kind) {
            return Err(format!("payload kind `{kind}` not permitted at {step}"));
        }
    }
    if step.reveals_outcome() {
        return Ok(());
    }
    fn walk(v: &Value, path: &str) -> Result<(), String> {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    if OUTCOME_KEYS.contains(&k.as_str()) {
                        return Err(format!("outcome field `{path}.{k}` present"));
                    }
                    walk(child, &format!("{path}.{k}"))?;
                }
                Ok(())
            }
            Value::Array(items) => items.iter().enumerate().try_for_each(|(i, c)| walk(c, &format!("{path}[{i}]"))),
            _ => Ok(()),
        }
    }
    walk(response, "")
}
