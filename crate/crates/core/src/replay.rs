//! Re-execution of an audit log against the artifact store.
//!
//! The same fold rebuilds engine state on restart ([`Mode::Trust`]) and
//! checks every recorded computation ([`Mode::Verify`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifacts::{ArtifactError, ArtifactStore};
use crate::audit::{verify_bytes, LogEntry, LogKind, Verification};
use crate::dataset::{balance_and_split, CaseRecord, Dataset, Splits};
use crate::digest::digest_of;
use crate::engine::FinetuneState;
use crate::events::{
    AccumulatedEntry, ConfidenceRevealed, DatasetRegistered, DatasetRole, DecisionFinalized, FinetuneAccumulated,
    ModelSwapped, ModelTrained, NeighborsComputed, PredictorRegistered, PredictorStatus, RetrainAttempted,
    SaliencyComputed, SessionEvent, SessionSetup, SplitDerivation,
};
use crate::explain::mask_importance_grid;
use crate::finetune::{accumulate, holdout, merge_rehearsal, FinetuneSet, TemporaryPool};
use crate::par::Execution;
use crate::predictor::{PredictorRegistry, RemotePredictor};
use crate::schema::Schema;
use crate::session::{Action, SessionState, Step, StepPayload};
use crate::suggest::{self, Context, Reference};
use crate::tree::{train_tree, TreeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Rebuild state only.
    Trust,
    /// Rebuild state and recompute every recorded output.
    Verify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EntryStatus {
    Matched,
    Diverged { field: String, recorded: Value, recomputed: Value },
    Unreplayable { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryReport {
    pub index: u64,
    pub kind: LogKind,
    #[serde(flatten)]
    pub status: EntryStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub chain_ok: bool,
    pub first_bad_index: Option<u64>,
    pub entries: Vec<EntryReport>,
    pub matched: usize,
    pub diverged: usize,
    pub unreplayable: usize,
}

impl ReplayReport {
    pub fn first_divergence(&self) -> Option<&EntryReport> {
        self.entries.iter().find(|e| matches!(e.status, EntryStatus::Diverged { .. }))
    }

    pub fn all_matched(&self) -> bool {
        self.chain_ok && self.diverged == 0 && self.unreplayable == 0
    }
}

#[derive(Debug, Clone)]
pub struct ReplaySession {
    pub state: SessionState,
    pub setup: SessionSetup,
    pub record: CaseRecord,
    pub logged: BTreeSet<Step>,
}

/// State reconstructed from the log.
#[derive(Default)]
pub struct ReplayState {
    pub source: Option<Arc<Dataset>>,
    pub train: Option<Arc<Dataset>>,
    pub case_study: Option<Arc<Dataset>>,
    pub temporary: Option<Arc<Dataset>>,
    pub serving_model: Option<Arc<TreeModel>>,
    pub models: BTreeMap<String, Arc<TreeModel>>,
    pub references: BTreeMap<String, Arc<Reference>>,
    /// Reference of the current base, when already fitted.
    pub reference: Option<Arc<Reference>>,
    pub finetune: Option<FinetuneState>,
    pub sessions: BTreeMap<String, ReplaySession>,
    pub registry: PredictorRegistry,
}

enum Failure {
    Diverged(String, Value, Value),
    Unreplayable(String),
}

type Checked = std::result::Result<(), Failure>;

fn unreplayable(reason: impl Into<String>) -> Failure {
    Failure::Unreplayable(reason.into())
}

fn compare<T: Serialize>(field: &str, recorded: &T, recomputed: &T) -> Checked {
    let a = serde_json::to_value(recorded).unwrap_or(Value::Null);
    let b = serde_json::to_value(recomputed).unwrap_or(Value::Null);
    if a == b {
        Ok(())
    } else {
        Err(Failure::Diverged(field.into(), a, b))
    }
}

fn artifact_failure(e: ArtifactError) -> Failure {
    match e {
        ArtifactError::HashMismatch { expected, actual } => {
            Failure::Diverged("artifact".into(), Value::String(expected), Value::String(actual))
        }
        other => Failure::Unreplayable(other.to_string()),
    }
}

pub struct Replayer {
    store: ArtifactStore,
    schema: Schema,
    mode: Mode,
    exec: Execution,
    state: ReplayState,
    splits: HashMap<String, Splits>,
    payloads: HashMap<(String, Step), StepPayload>,
    predictor_timeout: Duration,
}

impl Replayer {
    pub fn new(store: ArtifactStore, schema: Schema, mode: Mode, exec: Execution) -> Replayer {
        Replayer {
            store,
            schema,
            mode,
            exec,
            state: ReplayState::default(),
            splits: HashMap::new(),
            payloads: HashMap::new(),
            predictor_timeout: Duration::from_secs(5),
        }
    }

    pub fn state(&self) -> &ReplayState {
        &self.state
    }

    pub fn into_state(self) -> ReplayState {
        self.state
    }

    fn verify(&self) -> bool {
        self.mode == Mode::Verify
    }

    pub fn apply(&mut self, entry: &LogEntry) -> EntryStatus {
        let result = match entry.kind {
            LogKind::DatasetRegistered => self.body(entry).and_then(|b| self.dataset_registered(b)),
            LogKind::ModelTrained => self.body(entry).and_then(|b| self.model_trained(b)),
            LogKind::SessionEvent => self.body(entry).and_then(|b| self.session_event(b)),
            LogKind::SaliencyComputed => self.body(entry).and_then(|b| self.saliency(b)),
            LogKind::NeighborsComputed => self.body(entry).and_then(|b| self.neighbors(b)),
            LogKind::ConfidenceRevealed => self.body(entry).and_then(|b| self.confidence(b)),
            LogKind::DecisionFinalized => self.body(entry).and_then(|b| self.decision(b)),
            LogKind::FinetuneAccumulated => self.body(entry).and_then(|b| self.accumulated(b)),
            LogKind::RetrainAttempted => self.body(entry).and_then(|b| self.retrain(b)),
            LogKind::ModelSwapped => self.body(entry).and_then(|b| self.swapped(b)),
            LogKind::PredictorRegistered => self.body(entry).and_then(|b| self.predictor(b)),
            LogKind::Warning => Ok(()),
        };
        match result {
            Ok(()) => EntryStatus::Matched,
            Err(Failure::Diverged(field, recorded, recomputed)) => EntryStatus::Diverged { field, recorded, recomputed },
            Err(Failure::Unreplayable(reason)) => EntryStatus::Unreplayable { reason },
        }
    }

    fn body<T: for<'de> Deserialize<'de>>(&self, entry: &LogEntry) -> std::result::Result<T, Failure> {
        entry.body_as().map_err(|e| unreplayable(format!("unreadable body: {e}")))
    }

    fn dataset(&self, hash: &str) -> std::result::Result<Arc<Dataset>, Failure> {
        self.store.get_dataset(hash, &self.schema).map(Arc::new).map_err(artifact_failure)
    }

    fn model(&mut self, hash: &str) -> std::result::Result<Arc<TreeModel>, Failure> {
        if let Some(m) = self.state.models.get(hash) {
            return Ok(m.clone());
        }
        let m = Arc::new(self.store.get_model(hash).map_err(artifact_failure)?);
        self.state.models.insert(hash.into(), m.clone());
        Ok(m)
    }

    fn reference(&mut self, hash: &str, n_components: usize) -> std::result::Result<Arc<Reference>, Failure> {
        if let Some(r) = self.state.references.get(hash) {
            return Ok(r.clone());
        }
        let ds = self.dataset(hash)?;
        let r = Reference::fit((*ds).clone(), n_components, self.exec).map_err(|e| unreplayable(e.to_string()))?;
        let r = Arc::new(r);
        self.state.references.insert(hash.into(), r.clone());
        Ok(r)
    }

    fn derived_split(&mut self, d: &SplitDerivation) -> std::result::Result<&Splits, Failure> {
        let key = digest_of(d);
        if !self.splits.contains_key(&key) {
            let source = match &self.state.source {
                Some(s) if s.content_hash == d.source_hash => s.clone(),
                _ => self.dataset(&d.source_hash)?,
            };
            let s = balance_and_split(&source, d.train, d.case_study, d.temporary, d.seed)
                .map_err(|e| unreplayable(e.to_string()))?;
            self.splits.insert(key.clone(), s);
        }
        Ok(&self.splits[&key])
    }

    fn dataset_registered(&mut self, b: DatasetRegistered) -> Checked {
        let ds = self.dataset(&b.dataset_hash)?;
        if self.verify() {
            compare("rows", &b.rows, &ds.len())?;
            if let Some(d) = &b.split {
                let splits = self.derived_split(d)?;
                let derived = match b.role {
                    DatasetRole::Train => Some(&splits.train),
                    DatasetRole::CaseStudy => Some(&splits.case_study),
                    DatasetRole::Temporary => Some(&splits.temporary),
                    _ => None,
                };
                if let Some(derived) = derived {
                    compare("dataset_hash", &b.dataset_hash, &derived.content_hash)?;
                }
            }
        }
        match b.role {
            DatasetRole::Source => self.state.source = Some(ds),
            DatasetRole::Train => self.state.train = Some(ds),
            DatasetRole::CaseStudy => self.state.case_study = Some(ds),
            DatasetRole::Temporary => self.state.temporary = Some(ds),
            DatasetRole::Merged => {
                if self.verify() {
                    let ft = self.state.finetune.as_ref().ok_or_else(|| unreplayable("merge before splits"))?;
                    let merged = Dataset::new(merge_rehearsal(&ft.base.records, &ft.set.entries), ft.base.schema.clone());
                    compare("dataset_hash", &b.dataset_hash, &merged.content_hash)?;
                }
            }
        }
        if matches!(b.role, DatasetRole::Train | DatasetRole::Temporary) {
            if let (Some(train), Some(temp)) = (&self.state.train, &self.state.temporary) {
                self.state.finetune = Some(FinetuneState {
                    set: FinetuneSet::new(usize::MAX),
                    pool: TemporaryPool::new(temp.records.clone()),
                    base: train.clone(),
                    decided: BTreeSet::new(),
                    accumulations: 0,
                });
                self.state.reference = None;
            }
        }
        Ok(())
    }

    fn model_trained(&mut self, b: ModelTrained) -> Checked {
        let model = self.model(&b.model_hash)?;
        if self.verify() {
            let train = self.dataset(&b.train_hash)?;
            let retrained = train_tree(&train, b.max_depth, b.seed).map_err(|e| unreplayable(e.to_string()))?;
            compare("model_hash", &b.model_hash, &retrained.model_hash)?;
            compare("train_accuracy", &b.train_accuracy, &retrained.metrics.train_accuracy)?;
            if let (Some(acc), Some(cs)) = (b.case_study_accuracy, &self.state.case_study) {
                let m = retrained.evaluate_with(cs, self.exec).map_err(|e| unreplayable(e.to_string()))?;
                compare("case_study_accuracy", &acc, &m.accuracy)?;
            }
        }
        self.state.serving_model = Some(model);
        Ok(())
    }

    fn session_mut(&mut self, id: &str) -> std::result::Result<&mut ReplaySession, Failure> {
        self.state.sessions.get_mut(id).ok_or_else(|| unreplayable(format!("unknown session {id}")))
    }

    /// Payload the engine would have shown at `step`, recomputed.
    fn payload(&mut self, id: &str, step: Step) -> std::result::Result<StepPayload, Failure> {
        if let Some(p) = self.payloads.get(&(id.to_string(), step)) {
            return Ok(p.clone());
        }
        let s = self.state.sessions.get(id).ok_or_else(|| unreplayable(format!("unknown session {id}")))?.clone();
        let p = match step {
            Step::CaseSelected | Step::FirstImpression => {
                StepPayload::Case { case: suggest::case_view(s.state.case_id, &s.record, &self.schema) }
            }
            Step::Finalized => {
                let d = s.state.decision.as_ref().ok_or_else(|| unreplayable("finalized without decision"))?;
                suggest::decision_payload(s.state.case_id, &s.record, &self.schema, d)
            }
            _ => {
                let model = self.model(&s.setup.model_hash)?;
                let reference = self.reference(&s.setup.reference_hash, s.setup.n_components)?;
                let ctx = Context {
                    model: &model,
                    reference: &reference,
                    schema: &self.schema,
                    explainer: &s.setup.explainer,
                    k: s.setup.k,
                    flags: s.setup.flags,
                    exec: self.exec,
                };
                match step {
                    Step::ExplanationShown => {
                        suggest::explanation(&ctx, s.state.case_id, &s.record, s.setup.mask_seed)
                            .map_err(|e| unreplayable(e.to_string()))?
                            .0
                    }
                    Step::SimilarityShown => {
                        suggest::similarity(&ctx, s.state.case_id, &s.record).map_err(|e| unreplayable(e.to_string()))?.0
                    }
                    _ => suggest::confidence(&ctx, s.state.case_id, &s.record).0,
                }
            }
        };
        if !matches!(step, Step::Finalized) {
            self.payloads.insert((id.to_string(), step), p.clone());
        }
        Ok(p)
    }

    fn session_event(&mut self, b: SessionEvent) -> Checked {
        let Some(id) = b.session_id.clone() else {
            return Ok(());
        };
        if !b.accepted {
            if self.verify() {
                if let (Some(s), Some(_)) = (self.state.sessions.get(&id), b.from) {
                    let mut trial = s.state.clone();
                    let recomputed = trial.apply(&b.action, &b.at).err().map(|g| g.code().to_string());
                    compare("error.code", &b.error.as_ref().map(|e| e.code.clone()), &recomputed)?;
                }
            }
            return Ok(());
        }
        if let Action::Create = b.action {
            let setup = b.setup.clone().ok_or_else(|| unreplayable("create without setup"))?;
            let case_id = b.case_id.ok_or_else(|| unreplayable("create without case"))?;
            let cs = self.state.case_study.as_ref().ok_or_else(|| unreplayable("no case-study set"))?;
            let record = usize::try_from(case_id)
                .ok()
                .and_then(|i| cs.records.get(i))
                .cloned()
                .ok_or_else(|| unreplayable(format!("case {case_id} out of range")))?;
            compare("setup.row_id", &setup.row_id, &record.row_id)?;
            let state = SessionState::new(id.clone(), case_id, setup.flags, setup.model_hash.clone(), &b.at);
            self.state.sessions.insert(id.clone(), ReplaySession { state, setup, record, logged: BTreeSet::new() });
        } else {
            let s = self.session_mut(&id)?;
            let t = s.state.apply(&b.action, &b.at).map_err(|g| unreplayable(format!("action rejected on replay: {g}")))?;
            compare("to", &b.to, &Some(t.to))?;
            compare("seq", &b.seq, &t.seq)?;
        }
        let step = self.state.sessions[&id].state.step;
        let first = self.session_mut(&id)?.logged.insert(step);
        if self.verify() {
            let needs = matches!(step, Step::CaseSelected | Step::FirstImpression | Step::Finalized) || !first;
            if needs || self.payloads.contains_key(&(id.clone(), step)) {
                let p = self.payload(&id, step)?;
                compare("payload_digest", &b.payload_digest, &Some(digest_of(&p)))?;
            }
        }
        Ok(())
    }

    fn saliency(&mut self, b: SaliencyComputed) -> Checked {
        match b {
            SaliencyComputed::Tabular { session_id, mask_seed, record } => {
                let s = self.session_mut(&session_id)?;
                s.logged.insert(Step::ExplanationShown);
                if !self.verify() {
                    return Ok(());
                }
                let s = self.state.sessions[&session_id].clone();
                compare("mask_seed", &mask_seed, &s.setup.mask_seed)?;
                let model = self.model(&s.setup.model_hash)?;
                let reference = self.reference(&s.setup.reference_hash, s.setup.n_components)?;
                let ctx = Context {
                    model: &model,
                    reference: &reference,
                    schema: &self.schema,
                    explainer: &s.setup.explainer,
                    k: s.setup.k,
                    flags: s.setup.flags,
                    exec: self.exec,
                };
                let (payload, recomputed) = suggest::explanation(&ctx, s.state.case_id, &s.record, mask_seed)
                    .map_err(|e| unreplayable(e.to_string()))?;
                self.payloads.insert((session_id, Step::ExplanationShown), payload);
                compare("record.rules_digest", &record.rules_digest, &recomputed.rules_digest)?;
                compare("record.saliency_digest", &record.saliency_digest, &recomputed.saliency_digest)?;
                compare("record", &record, &recomputed)
            }
            SaliencyComputed::External { endpoint, predictor_hash, payload, config, saliency, scores_digest, .. } => {
                if !self.verify() {
                    return Ok(());
                }
                let remote = RemotePredictor::handshake(&endpoint, self.predictor_timeout)
                    .map_err(|e| unreplayable(format!("predictor unavailable: {e}")))?;
                if remote.descriptor().model_hash != predictor_hash {
                    return Err(unreplayable(format!(
                        "predictor now serves {}, log recorded {predictor_hash}",
                        remote.descriptor().model_hash
                    )));
                }
                let recomputed = mask_importance_grid(&remote, &payload, &config, saliency.seed, self.exec)
                    .map_err(|e| unreplayable(e.to_string()))?;
                compare("scores_digest", &scores_digest, &digest_of(&recomputed.scores))?;
                compare("saliency", &saliency, &recomputed)
            }
        }
    }

    fn recompute_step<R: Serialize + PartialEq>(
        &mut self,
        session_id: &str,
        step: Step,
        recorded: &R,
        f: impl Fn(&Context, &ReplaySession) -> std::result::Result<(StepPayload, R), String>,
    ) -> Checked {
        self.session_mut(session_id)?.logged.insert(step);
        if !self.verify() {
            return Ok(());
        }
        let s = self.state.sessions[session_id].clone();
        let model = self.model(&s.setup.model_hash)?;
        let reference = self.reference(&s.setup.reference_hash, s.setup.n_components)?;
        let ctx = Context {
            model: &model,
            reference: &reference,
            schema: &self.schema,
            explainer: &s.setup.explainer,
            k: s.setup.k,
            flags: s.setup.flags,
            exec: self.exec,
        };
        let (payload, recomputed) = f(&ctx, &s).map_err(unreplayable)?;
        self.payloads.insert((session_id.to_string(), step), payload);
        compare("record", recorded, &recomputed)
    }

    fn neighbors(&mut self, b: NeighborsComputed) -> Checked {
        self.recompute_step(&b.session_id, Step::SimilarityShown, &b.record, |ctx, s| {
            suggest::similarity(ctx, s.state.case_id, &s.record).map_err(|e| e.to_string())
        })
    }

    fn confidence(&mut self, b: ConfidenceRevealed) -> Checked {
        self.recompute_step(&b.session_id, Step::ConfidenceShown, &b.record, |ctx, s| {
            Ok(suggest::confidence(ctx, s.state.case_id, &s.record))
        })
    }

    fn decision(&mut self, b: DecisionFinalized) -> Checked {
        let s = self.session_mut(&b.decision.session_id)?;
        compare("row_id", &b.row_id, &s.record.row_id)?;
        compare("model_hash", &b.model_hash, &s.setup.model_hash)?;
        compare("decision.case_id", &b.decision.case_id, &s.state.case_id)
    }

    fn accumulated(&mut self, b: FinetuneAccumulated) -> Checked {
        let s = self.state.sessions.get(&b.session_id).ok_or_else(|| unreplayable("unknown session"))?;
        let label = s
            .state
            .decision
            .as_ref()
            .and_then(|d| d.final_label.as_label())
            .ok_or_else(|| unreplayable("accumulation without a grant or deny"))?;
        let record = s.record.clone();
        let ft = self.state.finetune.as_mut().ok_or_else(|| unreplayable("accumulation before splits"))?;
        let delta = accumulate(&mut ft.set, &mut ft.pool, &record, label.class_index(), &b.session_id, 2, b.policy, b.seed);
        ft.decided.insert(record.row_id);
        ft.accumulations += 1;
        let recomputed: Vec<AccumulatedEntry> = delta
            .entries
            .iter()
            .map(|e| AccumulatedEntry { row_id: e.case.row_id, class: e.class, origin: e.origin.clone() })
            .collect();
        compare("entries", &b.entries, &recomputed)?;
        compare("pool_remaining", &b.pool_remaining, &ft.pool.len())?;
        compare("set_size", &b.set_size, &ft.set.len())
    }

    fn retrain(&mut self, b: RetrainAttempted) -> Checked {
        if !self.verify() {
            return Ok(());
        }
        let ft = self.state.finetune.as_ref().ok_or_else(|| unreplayable("retrain before splits"))?;
        let cs = self.state.case_study.as_ref().ok_or_else(|| unreplayable("no case-study set"))?;
        compare("base_hash", &b.base_hash, &ft.base.content_hash)?;
        let held = holdout(cs, &ft.decided);
        compare("holdout_hash", &b.holdout_hash, &held.content_hash)?;
        let merged = Dataset::new(merge_rehearsal(&ft.base.records, &ft.set.entries), ft.base.schema.clone());
        compare("merged_hash", &b.merged_hash, &Some(merged.content_hash.clone()))?;
        let Some(outcome) = b.outcome else {
            return Ok(());
        };
        let candidate = train_tree(&merged, b.max_depth, b.seed).map_err(|e| unreplayable(e.to_string()))?;
        compare("outcome.candidate_hash", &outcome.candidate_hash, &candidate.model_hash)?;
        if !held.is_empty() {
            let acc = candidate.evaluate_with(&held, self.exec).map_err(|e| unreplayable(e.to_string()))?.accuracy;
            compare("outcome.holdout_accuracy", &outcome.holdout_accuracy, &Some(acc))?;
            let verdict = if crate::finetune::passes(acc, outcome.floor) {
                crate::finetune::Verdict::Swapped
            } else {
                crate::finetune::Verdict::Rejected
            };
            compare("outcome.verdict", &outcome.verdict, &verdict)?;
        }
        Ok(())
    }

    fn swapped(&mut self, b: ModelSwapped) -> Checked {
        let model = self.model(&b.to)?;
        let base = self.dataset(&b.base_hash)?;
        if let Some(current) = &self.state.serving_model {
            compare("from", &b.from, &current.model_hash)?;
        }
        let ft = self.state.finetune.as_mut().ok_or_else(|| unreplayable("swap before splits"))?;
        ft.base = base;
        ft.set.entries.clear();
        self.state.serving_model = Some(model);
        self.state.reference = self.state.references.get(&b.base_hash).cloned();
        Ok(())
    }

    fn predictor(&mut self, b: PredictorRegistered) -> Checked {
        let reg = &mut self.state.registry;
        match b.status {
            PredictorStatus::Acknowledged => {
                reg.acknowledge(&b.descriptor.endpoint);
            }
            _ => {
                reg.register(&b.descriptor);
            }
        }
        compare("blocked", &b.blocked, &reg.is_blocked(&b.descriptor.endpoint))
    }
}

/// Verifies the chain, then re-executes every entry in [`Mode::Verify`].
pub fn replay_bytes(bytes: &[u8], store: &ArtifactStore, schema: &Schema, exec: Execution) -> ReplayReport {
    let chain = verify_bytes(bytes);
    let (chain_ok, first_bad_index) = match chain {
        Verification::Ok { .. } => (true, None),
        Verification::FirstBadIndex(i) => (false, Some(i)),
    };
    let entries = crate::audit::parse_entries(bytes);
    let mut replayer = Replayer::new(store.clone(), schema.clone(), Mode::Verify, exec);
    let mut report = ReplayReport { chain_ok, first_bad_index, entries: Vec::new(), matched: 0, diverged: 0, unreplayable: 0 };
    for e in entries.iter().take_while(|e| first_bad_index.is_none_or(|b| e.index < b)) {
        let status = replayer.apply(e);
        match status {
            EntryStatus::Matched => report.matched += 1,
            EntryStatus::Diverged { .. } => report.diverged += 1,
            EntryStatus::Unreplayable { .. } => report.unreplayable += 1,
        }
        report.entries.push(EntryReport { index: e.index, kind: e.kind, status });
    }
    report
}
