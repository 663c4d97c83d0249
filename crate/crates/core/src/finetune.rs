//! Rehearsal finetuning: user decisions plus counter-label samples from the
//! temporary pool, full retraining once a threshold is reached, and a model
//! swap gated by holdout accuracy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CaseRecord, Dataset, Label};
use crate::par::Execution;
use crate::tree::{train_tree, TreeError, TreeModel};

/// Something with a stable id and an optional class index.
pub trait Labeled: Clone {
    fn case_id(&self) -> u64;
    fn class_index(&self) -> Option<usize>;
    fn with_class(&self, class: usize) -> Self;
}

impl Labeled for CaseRecord {
    fn case_id(&self) -> u64 {
        self.row_id
    }

    fn class_index(&self) -> Option<usize> {
        self.label.map(Label::class_index)
    }

    fn with_class(&self, class: usize) -> Self {
        CaseRecord {
            label: Label::from_class_index(class),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingPolicy {
    /// One temporary case with any label other than the user's.
    BinaryPair,
    /// One temporary case for each class the user did not choose.
    OnePerOtherClass,
}

impl SamplingPolicy {
    pub fn default_for(n_classes: usize) -> SamplingPolicy {
        if n_classes <= 2 {
            SamplingPolicy::BinaryPair
        } else {
            SamplingPolicy::OnePerOtherClass
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "snake_case")]
pub enum Origin {
    User { session_id: String },
    Temporary { sample_seed: u64, paired_session: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEntry<T> {
    pub case: T,
    pub class: usize,
    #[serde(flatten)]
    pub origin: Origin,
}

impl<T: Labeled> FinetuneEntry<T> {
    pub fn is_user(&self) -> bool {
        matches!(self.origin, Origin::User { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSet<T> {
    pub entries: Vec<FinetuneEntry<T>>,
    pub threshold: usize,
}

impl<T: Labeled> FinetuneSet<T> {
    pub fn new(threshold: usize) -> Self {
        FinetuneSet { entries: Vec::new(), threshold }
    }

    /// Number of user decisions accumulated.
    pub fn sessions(&self) -> usize {
        self.entries.iter().filter(|e| e.is_user()).count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut c = vec![0; n_classes];
        for e in &self.entries {
            c[e.class] += 1;
        }
        c
    }
}

/// Labeled cases set aside for counter-label sampling. Draws are removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporaryPool<T> {
    pub items: Vec<T>,
}

impl<T: Labeled> TemporaryPool<T> {
    pub fn new(items: Vec<T>) -> Self {
        TemporaryPool { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count_of(&self, class: usize) -> usize {
        self.items.iter().filter(|t| t.class_index() == Some(class)).count()
    }

    fn draw<F: Fn(usize) -> bool>(&mut self, rng: &mut ChaCha8Rng, accept: F) -> Option<T> {
        let candidates: Vec<usize> = self
            .items
            .iter()
            .enumerate()
            .filter(|(_, t)| t.class_index().is_some_and(&accept))
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let pick = candidates[rng.random_range(0..candidates.len())];
        Some(self.items.remove(pick))
    }
}

/// What one decision added to the finetune set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulationDelta<T> {
    pub entries: Vec<FinetuneEntry<T>>,
    pub policy: SamplingPolicy,
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// Adds the user's labeled case and, per `policy`, counter-label samples.
#[allow(clippy::too_many_arguments)]
pub fn accumulate<T: Labeled>(
    set: &mut FinetuneSet<T>,
    pool: &mut TemporaryPool<T>,
    case: &T,
    class: usize,
    session_id: &str,
    n_classes: usize,
    policy: SamplingPolicy,
    seed: u64,
) -> AccumulationDelta<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = vec![FinetuneEntry {
        case: case.with_class(class),
        class,
        origin: Origin::User { session_id: session_id.to_string() },
    }];
    let mut warnings = Vec::new();
    let temp = |t: T, c: usize| FinetuneEntry {
        case: t,
        class: c,
        origin: Origin::Temporary { sample_seed: seed, paired_session: session_id.to_string() },
    };
    match policy {
        SamplingPolicy::BinaryPair => match pool.draw(&mut rng, |c| c != class) {
            Some(t) => {
                let c = t.class_index().expect("drawn items are labeled");
                entries.push(temp(t, c));
            }
            None => warnings.push(format!("temporary pool has no case with a label other than class {class}")),
        },
        SamplingPolicy::OnePerOtherClass => {
            for other in (0..n_classes).filter(|c| *c != class) {
                match pool.draw(&mut rng, |c| c == other) {
                    Some(t) => entries.push(temp(t, other)),
                    None => warnings.push(format!("temporary pool exhausted for class {other}")),
                }
            }
        }
    }
    set.entries.extend(entries.iter().cloned());
    AccumulationDelta { entries, policy, seed, warnings }
}

/// Base records in order with user relabels applied in place, followed by
/// finetune cases not already present. The latest entry for an id wins.
pub fn merge_rehearsal<T: Labeled>(base: &[T], entries: &[FinetuneEntry<T>]) -> Vec<T> {
    let mut latest: HashMap<u64, &FinetuneEntry<T>> = HashMap::new();
    let mut order: Vec<u64> = Vec::new();
    for e in entries {
        let id = e.case.case_id();
        if latest.insert(id, e).is_none() {
            order.push(id);
        }
    }
    let base_ids: BTreeSet<u64> = base.iter().map(Labeled::case_id).collect();
    let mut out: Vec<T> = base
        .iter()
        .map(|b| match latest.get(&b.case_id()) {
            Some(e) if e.is_user() => b.with_class(e.class),
            _ => b.clone(),
        })
        .collect();
    for id in order {
        if !base_ids.contains(&id) {
            let e = latest[&id];
            out.push(e.case.with_class(e.class));
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("retraining failed: {0}")]
    Training(#[from] TreeError),
}

#[allow(clippy::large_enum_variant)]
pub enum RetrainDecision {
    NotYet { size: usize, threshold: usize },
    Candidate { model: TreeModel, merged: Dataset },
}

/// Trains on `base ∪ finetune` once the set holds `threshold` user decisions.
pub fn maybe_retrain(
    set: &FinetuneSet<CaseRecord>,
    base: &Dataset,
    max_depth: usize,
    seed: u64,
) -> Result<RetrainDecision, FinetuneError> {
    if set.sessions() < set.threshold {
        return Ok(RetrainDecision::NotYet { size: set.sessions(), threshold: set.threshold });
    }
    let merged = Dataset::new(merge_rehearsal(&base.records, &set.entries), base.schema.clone());
    let model = train_tree(&merged, max_depth, seed)?;
    Ok(RetrainDecision::Candidate { model, merged })
}

/// The serving model; swaps replace the whole reference at once.
#[derive(Debug)]
pub struct ModelSlot {
    current: RwLock<Arc<TreeModel>>,
}

impl ModelSlot {
    pub fn new(model: TreeModel) -> Self {
        ModelSlot { current: RwLock::new(Arc::new(model)) }
    }

    pub fn current(&self) -> Arc<TreeModel> {
        self.current.read().expect("model slot lock").clone()
    }

    pub fn hash(&self) -> String {
        self.current().model_hash.clone()
    }

    fn replace(&self, model: Arc<TreeModel>) -> Arc<TreeModel> {
        std::mem::replace(&mut *self.current.write().expect("model slot lock"), model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Swapped,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainOutcome {
    pub candidate_hash: String,
    pub serving_hash_before: String,
    pub serving_hash_after: String,
    pub holdout_accuracy: Option<f64>,
    pub holdout_size: usize,
    pub floor: f64,
    pub verdict: Verdict,
    pub error: Option<String>,
}

/// Swap rule: accuracy at or above the floor.
pub fn passes(accuracy: f64, floor: f64) -> bool {
    accuracy >= floor
}

/// Evaluates `candidate` on `holdout` and installs it iff accuracy ≥ floor.
pub fn guardrail_swap(candidate: TreeModel, holdout: &Dataset, floor: f64, slot: &ModelSlot, exec: Execution) -> RetrainOutcome {
    let before = slot.hash();
    let candidate_hash = candidate.model_hash.clone();
    let rejected = |accuracy, error| RetrainOutcome {
        candidate_hash: candidate_hash.clone(),
        serving_hash_before: before.clone(),
        serving_hash_after: before.clone(),
        holdout_accuracy: accuracy,
        holdout_size: holdout.len(),
        floor,
        verdict: Verdict::Rejected,
        error,
    };
    if holdout.is_empty() {
        return rejected(None, Some("holdout set is empty".to_string()));
    }
    let accuracy = match candidate.evaluate_with(holdout, exec) {
        Ok(m) => m.accuracy,
        Err(e) => return rejected(None, Some(e.to_string())),
    };
    if !passes(accuracy, floor) {
        return rejected(Some(accuracy), None);
    }
    slot.replace(Arc::new(candidate));
    RetrainOutcome {
        candidate_hash: candidate_hash.clone(),
        serving_hash_before: before,
        serving_hash_after: candidate_hash,
        holdout_accuracy: Some(accuracy),
        holdout_size: holdout.len(),
        floor,
        verdict: Verdict::Swapped,
        error: None,
    }
}

/// The case-study set minus cases that already received a decision.
pub fn holdout(case_study: &Dataset, decided: &BTreeSet<u64>) -> Dataset {
    Dataset::new(
        case_study.records.iter().filter(|r| !decided.contains(&r.row_id)).cloned().collect(),
        case_study.schema.clone(),
    )
}

/// Per-class counts of a labeled collection.
pub fn class_histogram<T: Labeled>(items: &[T]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for t in items {
        if let Some(c) = t.class_index() {
            *m.entry(c).or_insert(0) += 1;
        }
    }
    m
}
