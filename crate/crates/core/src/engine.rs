//! The decision-support engine: sessions, suggestions, decisions and
//! rehearsal finetuning, with every event appended to the audit log.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::artifacts::{ArtifactError, ArtifactStore};
use crate::audit::{AuditError, AuditLog, Head, LogEntry};
use crate::config::ServiceConfig;
use crate::dataset::{balance_and_split, load_dataset, CaseRecord, Dataset, DatasetError};
use crate::digest::digest_of;
use crate::events::{
    AccumulatedEntry, ConfidenceRevealed, DatasetRegistered, DatasetRole, DecisionFinalized, ErrorInfo, EventBody,
    FinetuneAccumulated, ModelSwapped, ModelTrained, NeighborsComputed, PredictorRegistered, PredictorStatus,
    RetrainAttempted, RetrainTrigger, SaliencyComputed, SessionEvent, SessionSetup, SplitDerivation, Warning,
};
use crate::explain::{mask_importance_grid, ExplainError, GridConfig};
use crate::finetune::{
    accumulate, guardrail_swap, FinetuneError, holdout, maybe_retrain, merge_rehearsal, FinetuneSet, ModelSlot, RetrainDecision,
    RetrainOutcome, TemporaryPool, Verdict,
};
use crate::par::Execution;
use crate::predictor::{PredictorError, PredictorRegistry, Registration, RemotePredictor};
use crate::replay::{Mode, Replayer};
use crate::schema::Schema;
use crate::session::{
    check_outcome_hidden, Action, ActionKind, FinalLabel, GateError, Note, SessionState, Step, StepFlags, StepPayload,
};
use crate::similarity::SimilarityError;
use crate::suggest::{self, derive_seed, Context, Reference};
use crate::tree::{train_tree, TreeError, TreeModel};

pub const SESSION_SCHEMA: &str = "session-v1";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{what} `{id}` not found")]
    NotFound { what: &'static str, id: String },
    #[error("the introduction must be acknowledged before a session can start")]
    NotAcknowledged,
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error("predictor {endpoint} changed its model hash; sessions are blocked until an operator acknowledges")]
    Blocked { endpoint: String },
    #[error("authority token required")]
    Unauthorized,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("cannot resume from log: {0}")]
    Resume(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl EngineError {
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::NotFound { .. } => "not_found",
            EngineError::NotAcknowledged => "not_acknowledged",
            EngineError::Gate(g) => g.code(),
            EngineError::Blocked { .. } => "predictor_blocked",
            EngineError::Unauthorized => "unauthorized",
            EngineError::BadRequest(_) => "bad_request",
            EngineError::Predictor(PredictorError::Timeout { .. }) => "predictor_timeout",
            EngineError::Predictor(_) => "predictor_error",
            EngineError::Explain(ExplainError::Timeout { .. }) => "predictor_timeout",
            EngineError::Explain(ExplainError::PredictorFailed { .. } | ExplainError::ReferenceFailed { .. }) => {
                "predictor_error"
            }
            EngineError::Explain(_) => "bad_request",
            _ => "internal",
        }
    }

    pub fn step(&self) -> Option<Step> {
        match self {
            EngineError::Gate(g) => Some(g.current()),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Finetune bookkeeping shared by all sessions.
#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub set: FinetuneSet<CaseRecord>,
    pub pool: TemporaryPool<CaseRecord>,
    pub base: Arc<Dataset>,
    /// Row ids of case-study records that received a grant or deny.
    pub decided: BTreeSet<u64>,
    pub accumulations: u64,
}

struct Runtime {
    state: SessionState,
    record: CaseRecord,
    model: Arc<TreeModel>,
    reference: Arc<Reference>,
    setup: SessionSetup,
    cache: BTreeMap<Step, StepPayload>,
    logged: BTreeSet<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub case_id: u64,
    pub provisional_label: Option<crate::dataset::Label>,
    pub notes: Vec<Note>,
    pub skip_used: bool,
    pub legal_actions: Vec<ActionKind>,
    pub enabled_steps: Vec<Step>,
    pub flags: StepFlags,
    pub started: String,
    pub updated: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub accumulated: Vec<AccumulatedEntry>,
    pub set_sessions: usize,
    pub threshold: usize,
    pub retrain: Option<RetrainOutcome>,
    pub warnings: Vec<String>,
}

/// Body of every session endpoint's response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResponse {
    pub schema_version: String,
    pub session_id: String,
    pub step: Step,
    pub seq: u64,
    pub payload: StepPayload,
    pub state: SessionSummary,
    pub warnings: Vec<String>,
    pub finetune: Option<FinetuneSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: u64,
    pub attributes: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub serving_model: String,
    pub log_entries: u64,
    pub head_hash: String,
    pub sessions: usize,
    pub parallel: bool,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true)
}

pub struct Engine {
    config: ServiceConfig,
    schema: Schema,
    store: ArtifactStore,
    log: Mutex<AuditLog>,
    case_study: Arc<Dataset>,
    slot: ModelSlot,
    reference: RwLock<Arc<Reference>>,
    references: Mutex<HashMap<String, Arc<Reference>>>,
    models: Mutex<HashMap<String, Arc<TreeModel>>>,
    finetune: Mutex<FinetuneState>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Runtime>>>>,
    acks: Mutex<HashSet<String>>,
    registry: Mutex<PredictorRegistry>,
    predictors: RwLock<BTreeMap<String, Arc<RemotePredictor>>>,
    exec: Execution,
}

impl Engine {
    /// Opens the configured log and artifact store, then resumes from the
    /// log or, if it is empty, ingests the configured dataset.
    pub fn open(config: ServiceConfig) -> Result<Engine> {
        let store = ArtifactStore::open(&config.data.artifacts)?;
        let log = AuditLog::open_file(&config.data.log)?;
        if log.is_empty() {
            let source = load_dataset(&config.data.dataset, &Schema::loan())?;
            Engine::fresh(config, source, log, store, Execution::default())
        } else {
            Engine::resume(config, log, store, Execution::default())
        }
    }

    /// Ingests `source`, splits it, trains the first model and logs it all.
    pub fn fresh(config: ServiceConfig, source: Dataset, log: AuditLog, store: ArtifactStore, exec: Execution) -> Result<Engine> {
        let schema = source.schema.clone();
        let log = Mutex::new(log);
        let append = |body: &dyn ErasedBody| -> Result<LogEntry> {
            Ok(log.lock().expect("log lock").append(body.kind(), body.value())?)
        };
        store.put_dataset(&source)?;
        append(&DatasetRegistered::of(DatasetRole::Source, &source, None))?;
        for w in source.warnings.iter().take(100) {
            append(&Warning { message: format!("row {}: {}", w.row, w.message), context: json!({"dataset": source.content_hash}) })?;
        }
        let s = &config.split;
        let splits = balance_and_split(&source, s.train, s.case_study, s.temporary, s.seed)?;
        let derivation = SplitDerivation {
            source_hash: source.content_hash.clone(),
            train: s.train,
            case_study: s.case_study,
            temporary: s.temporary,
            seed: s.seed,
        };
        for (role, ds) in [
            (DatasetRole::Train, &splits.train),
            (DatasetRole::CaseStudy, &splits.case_study),
            (DatasetRole::Temporary, &splits.temporary),
        ] {
            store.put_dataset(ds)?;
            append(&DatasetRegistered::of(role, ds, Some(derivation.clone())))?;
        }
        let model = train_tree(&splits.train, config.tree.max_depth, config.tree.seed)?;
        store.put_model(&model)?;
        let case_acc = model.evaluate_with(&splits.case_study, exec)?.accuracy;
        append(&ModelTrained {
            model_hash: model.model_hash.clone(),
            train_hash: splits.train.content_hash.clone(),
            max_depth: model.max_depth,
            seed: model.train_seed,
            train_accuracy: model.metrics.train_accuracy,
            case_study_accuracy: Some(case_acc),
        })?;
        let reference = Arc::new(Reference::fit(splits.train.clone(), config.similarity.n_components, exec)?);
        let base = Arc::new(splits.train);
        let finetune = FinetuneState {
            set: FinetuneSet::new(config.finetune.threshold),
            pool: TemporaryPool::new(splits.temporary.records.clone()),
            base,
            decided: BTreeSet::new(),
            accumulations: 0,
        };
        let engine = Engine::assemble(config, schema, store, log, Arc::new(splits.case_study), model, reference, finetune, exec);
        engine.connect_predictors()?;
        Ok(engine)
    }

    /// Rebuilds state from an existing log.
    pub fn resume(config: ServiceConfig, log: AuditLog, store: ArtifactStore, exec: Execution) -> Result<Engine> {
        let schema = Schema::loan();
        let mut replayer = Replayer::new(store.clone(), schema.clone(), Mode::Trust, exec);
        for e in log.entries() {
            replayer.apply(e);
        }
        let st = replayer.into_state();
        let missing = |what: &str| EngineError::Resume(format!("log does not register {what}"));
        let case_study = st.case_study.clone().ok_or_else(|| missing("a case-study set"))?;
        let model = st.serving_model.clone().ok_or_else(|| missing("a trained model"))?;
        let finetune = st.finetune.clone().ok_or_else(|| missing("a temporary set"))?;
        let reference = match &st.reference {
            Some(r) => r.clone(),
            None => Arc::new(Reference::fit((*finetune.base).clone(), config.similarity.n_components, exec)?),
        };
        let mut finetune = finetune;
        finetune.set.threshold = config.finetune.threshold;
        let engine = Engine::assemble(
            config,
            schema,
            store,
            Mutex::new(log),
            case_study,
            (*model).clone(),
            reference,
            finetune,
            exec,
        );
        *engine.registry.lock().expect("registry lock") = st.registry.clone();
        {
            let mut refs = engine.references.lock().expect("refs lock");
            for (h, r) in &st.references {
                refs.insert(h.clone(), r.clone());
            }
            let mut models = engine.models.lock().expect("models lock");
            for (h, m) in &st.models {
                models.insert(h.clone(), m.clone());
            }
        }
        let mut sessions = engine.sessions.write().expect("sessions lock");
        for (id, s) in st.sessions {
            let model = engine.model_by_hash(&s.setup.model_hash)?;
            let reference = engine.reference_by_hash(&s.setup.reference_hash, s.setup.n_components)?;
            sessions.insert(
                id,
                Arc::new(Mutex::new(Runtime {
                    state: s.state,
                    record: s.record,
                    model,
                    reference,
                    setup: s.setup,
                    cache: BTreeMap::new(),
                    logged: s.logged,
                })),
            );
        }
        drop(sessions);
        engine.connect_predictors()?;
        Ok(engine)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: ServiceConfig,
        schema: Schema,
        store: ArtifactStore,
        log: Mutex<AuditLog>,
        case_study: Arc<Dataset>,
        model: TreeModel,
        reference: Arc<Reference>,
        finetune: FinetuneState,
        exec: Execution,
    ) -> Engine {
        let mut references = HashMap::new();
        references.insert(reference.hash().to_string(), reference.clone());
        Engine {
            config,
            schema,
            store,
            log,
            case_study,
            slot: ModelSlot::new(model),
            reference: RwLock::new(reference),
            references: Mutex::new(references),
            models: Mutex::new(HashMap::new()),
            finetune: Mutex::new(finetune),
            sessions: RwLock::new(HashMap::new()),
            acks: Mutex::new(HashSet::new()),
            registry: Mutex::new(PredictorRegistry::default()),
            predictors: RwLock::new(BTreeMap::new()),
            exec,
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    pub fn case_study(&self) -> &Dataset {
        &self.case_study
    }

    pub fn serving_model(&self) -> Arc<TreeModel> {
        self.slot.current()
    }

    pub fn finetune_state(&self) -> FinetuneState {
        self.finetune.lock().expect("finetune lock").clone()
    }

    fn log<B: EventBody>(&self, body: &B) -> Result<LogEntry> {
        let value = serde_json::to_value(body).map_err(|e| EngineError::Internal(e.to_string()))?;
        Ok(self.log.lock().expect("log lock").append(B::KIND, value)?)
    }

    fn model_by_hash(&self, hash: &str) -> Result<Arc<TreeModel>> {
        let current = self.slot.current();
        if current.model_hash == hash {
            return Ok(current);
        }
        let mut models = self.models.lock().expect("models lock");
        if let Some(m) = models.get(hash) {
            return Ok(m.clone());
        }
        let m = Arc::new(self.store.get_model(hash)?);
        models.insert(hash.to_string(), m.clone());
        Ok(m)
    }

    fn reference_by_hash(&self, hash: &str, n_components: usize) -> Result<Arc<Reference>> {
        if let Some(r) = self.references.lock().expect("refs lock").get(hash) {
            return Ok(r.clone());
        }
        let ds = self.store.get_dataset(hash, &self.schema)?;
        let r = Arc::new(Reference::fit(ds, n_components, self.exec)?);
        self.references.lock().expect("refs lock").insert(hash.to_string(), r.clone());
        Ok(r)
    }

    // ---- intro and cases ----

    /// Records the user's acknowledgment of the introduction; returns the
    /// token that `create_session` requires.
    pub fn acknowledge(&self) -> String {
        let token = uuid::Uuid::new_v4().to_string();
        self.acks.lock().expect("acks lock").insert(token.clone());
        token
    }

    pub fn list_cases(&self) -> Vec<CaseSummary> {
        self.case_study
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| CaseSummary { case_id: i as u64, attributes: r.display_values(&self.schema) })
            .collect()
    }

    pub fn get_case(&self, case_id: u64) -> Result<CaseSummary> {
        let r = self.case_record(case_id)?;
        Ok(CaseSummary { case_id, attributes: r.display_values(&self.schema) })
    }

    fn case_record(&self, case_id: u64) -> Result<&CaseRecord> {
        usize::try_from(case_id)
            .ok()
            .and_then(|i| self.case_study.records.get(i))
            .ok_or_else(|| EngineError::NotFound { what: "case", id: case_id.to_string() })
    }

    // ---- sessions ----

    fn reject(&self, session_id: Option<String>, case_id: Option<u64>, action: Action, from: Option<Step>, err: &EngineError) -> Result<()> {
        self.log(&SessionEvent {
            session_id,
            case_id,
            action,
            accepted: false,
            seq: 0,
            from,
            to: None,
            at: now(),
            error: Some(ErrorInfo { code: err.code().into(), message: err.to_string() }),
            payload_kind: None,
            payload_digest: None,
            warnings: Vec::new(),
            setup: None,
        })?;
        Ok(())
    }

    pub fn create_session(&self, case_id: u64, ack_token: &str) -> Result<SessionResponse> {
        let fail = |e: EngineError| -> Result<SessionResponse> {
            self.reject(None, Some(case_id), Action::Create, None, &e)?;
            Err(e)
        };
        if !self.acks.lock().expect("acks lock").contains(ack_token) {
            return fail(EngineError::NotAcknowledged);
        }
        let record = match self.case_record(case_id) {
            Ok(r) => r.clone(),
            Err(e) => return fail(e),
        };
        let blocked = self
            .registry
            .lock()
            .expect("registry lock")
            .endpoints
            .iter()
            .find(|(_, r)| r.blocked)
            .map(|(e, _)| e.clone());
        if let Some(endpoint) = blocked {
            return fail(EngineError::Blocked { endpoint });
        }
        let model = self.slot.current();
        let reference = self.reference.read().expect("reference lock").clone();
        let session_id = uuid::Uuid::new_v4().to_string();
        let setup = SessionSetup {
            flags: self.config.steps,
            model_hash: model.model_hash.clone(),
            reference_hash: reference.hash().to_string(),
            n_components: reference.index.pca.n_components,
            k: self.config.similarity.k,
            mask_seed: derive_seed(self.config.explainer.seed, &session_id),
            explainer: self.config.explainer.clone(),
            row_id: record.row_id,
        };
        let at = now();
        let state = SessionState::new(session_id.clone(), case_id, setup.flags, model.model_hash.clone(), &at);
        let mut rt = Runtime { state, record, model, reference, setup: setup.clone(), cache: BTreeMap::new(), logged: BTreeSet::new() };
        let payload = self.payload_for(&mut rt, Step::CaseSelected)?;
        let response = self.response(&rt, payload.clone(), Vec::new(), None);
        self.guard(&response)?;
        self.log(&SessionEvent {
            session_id: Some(session_id.clone()),
            case_id: Some(case_id),
            action: Action::Create,
            accepted: true,
            seq: 0,
            from: None,
            to: Some(Step::CaseSelected),
            at,
            error: None,
            payload_kind: Some(payload.kind_name().into()),
            payload_digest: Some(digest_of(&payload)),
            warnings: Vec::new(),
            setup: Some(setup),
        })?;
        self.sessions.write().expect("sessions lock").insert(session_id, Arc::new(Mutex::new(rt)));
        Ok(response)
    }

    fn runtime(&self, session_id: &str) -> Option<Arc<Mutex<Runtime>>> {
        self.sessions.read().expect("sessions lock").get(session_id).cloned()
    }

    pub fn get_session(&self, session_id: &str) -> Result<SessionResponse> {
        let rt = self.runtime(session_id).ok_or_else(|| EngineError::NotFound { what: "session", id: session_id.into() })?;
        let mut rt = rt.lock().expect("session lock");
        let step = rt.state.step;
        let payload = self.payload_for(&mut rt, step)?;
        Ok(self.response(&rt, payload, Vec::new(), None))
    }

    pub fn record_first_impression(&self, session_id: &str, label: Option<crate::dataset::Label>, note: &str) -> Result<SessionResponse> {
        self.act(session_id, Action::Impression { label, note: note.into() })
    }

    pub fn advance(&self, session_id: &str) -> Result<SessionResponse> {
        self.act(session_id, Action::Advance)
    }

    pub fn go_back(&self, session_id: &str) -> Result<SessionResponse> {
        self.act(session_id, Action::Back)
    }

    pub fn skip_to_final(&self, session_id: &str) -> Result<SessionResponse> {
        self.act(session_id, Action::Skip)
    }

    pub fn annotate(&self, session_id: &str, label: Option<crate::dataset::Label>, note: &str) -> Result<SessionResponse> {
        self.act(session_id, Action::Annotate { label, note: note.into() })
    }

    pub fn finalize(&self, session_id: &str, decision: FinalLabel, note: Option<String>) -> Result<SessionResponse> {
        self.act(session_id, Action::Finalize { decision, note })
    }

    /// Applies one protocol action. Exactly one `SessionEvent` is logged,
    /// accepted or not; computation entries for a newly shown suggestion
    /// precede it.
    pub fn act(&self, session_id: &str, action: Action) -> Result<SessionResponse> {
        let Some(rt) = self.runtime(session_id) else {
            let e = EngineError::NotFound { what: "session", id: session_id.into() };
            self.reject(Some(session_id.into()), None, action, None, &e)?;
            return Err(e);
        };
        let mut rt = rt.lock().expect("session lock");
        let at = now();
        let mut trial = rt.state.clone();
        let transition = match trial.apply(&action, &at) {
            Ok(t) => t,
            Err(g) => {
                let from = rt.state.step;
                let e = EngineError::Gate(g);
                self.reject(Some(session_id.into()), Some(rt.state.case_id), action, Some(from), &e)?;
                return Err(e);
            }
        };
        let payload = if transition.to == Step::Finalized {
            let decision = trial.decision.clone().expect("finalize sets a decision");
            self.log(&DecisionFinalized { decision: decision.clone(), row_id: rt.record.row_id, model_hash: rt.model.model_hash.clone() })?;
            suggest::decision_payload(trial.case_id, &rt.record, &self.schema, &decision)
        } else {
            self.payload_for(&mut rt, transition.to)?
        };
        let previous = std::mem::replace(&mut rt.state, trial);
        let response = self.response(&rt, payload.clone(), transition.warnings.clone(), None);
        if let Err(e) = self.guard(&response) {
            rt.state = previous;
            return Err(e);
        }
        self.log(&SessionEvent {
            session_id: Some(session_id.into()),
            case_id: Some(rt.state.case_id),
            action: action.clone(),
            accepted: true,
            seq: transition.seq,
            from: Some(transition.from),
            to: Some(transition.to),
            at,
            error: None,
            payload_kind: Some(payload.kind_name().into()),
            payload_digest: Some(digest_of(&payload)),
            warnings: transition.warnings.clone(),
            setup: None,
        })?;
        let mut response = response;
        if let Action::Finalize { decision, .. } = action {
            if let Some(label) = decision.as_label() {
                response.finetune = Some(self.after_decision(&rt, label)?);
            }
        }
        Ok(response)
    }

    fn guard(&self, response: &SessionResponse) -> Result<()> {
        let value = serde_json::to_value(response).map_err(|e| EngineError::Internal(e.to_string()))?;
        check_outcome_hidden(response.step, &value).map_err(|m| EngineError::Internal(format!("outcome leak blocked: {m}")))
    }

    fn response(&self, rt: &Runtime, payload: StepPayload, warnings: Vec<String>, finetune: Option<FinetuneSummary>) -> SessionResponse {
        SessionResponse {
            schema_version: SESSION_SCHEMA.into(),
            session_id: rt.state.session_id.clone(),
            step: rt.state.step,
            seq: rt.state.seq,
            payload,
            state: SessionSummary {
                case_id: rt.state.case_id,
                provisional_label: rt.state.provisional_label,
                notes: rt.state.notes.clone(),
                skip_used: rt.state.skip_used,
                legal_actions: rt.state.legal_actions(),
                enabled_steps: rt.state.enabled_steps(),
                flags: rt.state.config_snapshot,
                started: rt.state.started.clone(),
                updated: rt.state.updated.clone(),
            },
            warnings,
            finetune,
        }
    }

    fn payload_for(&self, rt: &mut Runtime, step: Step) -> Result<StepPayload> {
        if let Some(p) = rt.cache.get(&step) {
            return Ok(p.clone());
        }
        let ctx = Context {
            model: &rt.model,
            reference: &rt.reference,
            schema: &self.schema,
            explainer: &rt.setup.explainer,
            k: rt.setup.k,
            flags: rt.setup.flags,
            exec: self.exec,
        };
        let case_id = rt.state.case_id;
        let session_id = rt.state.session_id.clone();
        let first = !rt.logged.contains(&step);
        let payload = match step {
            Step::CaseSelected | Step::FirstImpression => {
                StepPayload::Case { case: suggest::case_view(case_id, &rt.record, &self.schema) }
            }
            Step::ExplanationShown => {
                let (payload, record) = suggest::explanation(&ctx, case_id, &rt.record, rt.setup.mask_seed)?;
                if first {
                    self.log(&SaliencyComputed::Tabular { session_id, mask_seed: rt.setup.mask_seed, record })?;
                }
                payload
            }
            Step::SimilarityShown => {
                let (payload, record) = suggest::similarity(&ctx, case_id, &rt.record)?;
                if first {
                    self.log(&NeighborsComputed { session_id, record })?;
                }
                payload
            }
            Step::ConfidenceShown => {
                let (payload, record) = suggest::confidence(&ctx, case_id, &rt.record);
                if first {
                    if !record.unknown_routes.is_empty() {
                        self.log(&Warning {
                            message: "unknown category routed to the heavier branch".into(),
                            context: json!({"session_id": session_id, "attributes": record.unknown_routes}),
                        })?;
                    }
                    self.log(&ConfidenceRevealed { session_id, record })?;
                }
                payload
            }
            Step::Finalized => {
                let decision = rt.state.decision.clone().ok_or_else(|| EngineError::Internal("finalized without decision".into()))?;
                suggest::decision_payload(case_id, &rt.record, &self.schema, &decision)
            }
        };
        rt.logged.insert(step);
        rt.cache.insert(step, payload.clone());
        Ok(payload)
    }

    // ---- finetuning ----

    fn after_decision(&self, rt: &Runtime, label: crate::dataset::Label) -> Result<FinetuneSummary> {
        let mut ft = self.finetune.lock().expect("finetune lock");
        let seed = derive_seed(self.config.finetune.seed, &format!("accumulate/{}", ft.accumulations));
        ft.accumulations += 1;
        let state = &mut *ft;
        let delta = accumulate(
            &mut state.set,
            &mut state.pool,
            &rt.record,
            label.class_index(),
            &rt.state.session_id,
            2,
            self.config.finetune.policy,
            seed,
        );
        state.decided.insert(rt.record.row_id);
        let accumulated: Vec<AccumulatedEntry> = delta
            .entries
            .iter()
            .map(|e| AccumulatedEntry { row_id: e.case.row_id, class: e.class, origin: e.origin.clone() })
            .collect();
        self.log(&FinetuneAccumulated {
            session_id: rt.state.session_id.clone(),
            policy: delta.policy,
            seed,
            entries: accumulated.clone(),
            warnings: delta.warnings.clone(),
            pool_remaining: state.pool.len(),
            set_sessions: state.set.sessions(),
            set_size: state.set.len(),
        })?;
        for w in &delta.warnings {
            self.log(&Warning { message: w.clone(), context: json!({"session_id": rt.state.session_id}) })?;
        }
        let retrain = if state.set.sessions() >= state.set.threshold {
            Some(self.retrain_locked(state, RetrainTrigger::Threshold)?)
        } else {
            None
        };
        Ok(FinetuneSummary {
            accumulated,
            set_sessions: state.set.sessions(),
            threshold: state.set.threshold,
            retrain,
            warnings: delta.warnings,
        })
    }

    /// Retrains on base ∪ finetune regardless of the threshold.
    pub fn retrain_now(&self) -> Result<RetrainOutcome> {
        let mut ft = self.finetune.lock().expect("finetune lock");
        self.retrain_locked(&mut ft, RetrainTrigger::Forced)
    }

    fn retrain_locked(&self, ft: &mut FinetuneState, trigger: RetrainTrigger) -> Result<RetrainOutcome> {
        let depth = self.config.tree.max_depth;
        let seed = self.config.tree.seed;
        let held = holdout(&self.case_study, &ft.decided);
        let trained = match trigger {
            RetrainTrigger::Threshold => maybe_retrain(&ft.set, &ft.base, depth, seed).map(|d| match d {
                RetrainDecision::Candidate { model, merged } => Some((model, merged)),
                RetrainDecision::NotYet { .. } => None,
            }),
            RetrainTrigger::Forced => {
                let merged = Dataset::new(merge_rehearsal(&ft.base.records, &ft.set.entries), ft.base.schema.clone());
                train_tree(&merged, depth, seed).map(|m| Some((m, merged))).map_err(Into::into)
            }
        };
        let mut attempt = RetrainAttempted {
            trigger,
            base_hash: ft.base.content_hash.clone(),
            merged_hash: None,
            finetune_sessions: ft.set.sessions(),
            finetune_size: ft.set.len(),
            max_depth: depth,
            seed,
            holdout_hash: held.content_hash.clone(),
            outcome: None,
            error: None,
        };
        let (candidate, merged) = match trained {
            Ok(Some(x)) => x,
            Ok(None) => return Err(EngineError::Internal("retrain requested below threshold".into())),
            Err(e) => {
                attempt.error = Some(e.to_string());
                self.log(&attempt)?;
                return Err(e.into());
            }
        };
        self.store.put_dataset(&merged)?;
        self.store.put_model(&candidate)?;
        self.log(&DatasetRegistered::of(DatasetRole::Merged, &merged, None))?;
        attempt.merged_hash = Some(merged.content_hash.clone());
        let outcome = guardrail_swap(candidate, &held, self.config.finetune.floor, &self.slot, self.exec);
        attempt.outcome = Some(outcome.clone());
        self.log(&attempt)?;
        if outcome.verdict == Verdict::Swapped {
            let reference = Arc::new(Reference::fit(merged.clone(), self.config.similarity.n_components, self.exec)?);
            self.references.lock().expect("refs lock").insert(reference.hash().to_string(), reference.clone());
            *self.reference.write().expect("reference lock") = reference;
            ft.base = Arc::new(merged);
            ft.set.entries.clear();
            self.log(&ModelSwapped {
                from: outcome.serving_hash_before.clone(),
                to: outcome.serving_hash_after.clone(),
                base_hash: ft.base.content_hash.clone(),
                holdout_accuracy: outcome.holdout_accuracy.unwrap_or(0.0),
                floor: outcome.floor,
            })?;
        }
        Ok(outcome)
    }

    // ---- external predictors ----

    fn connect_predictors(&self) -> Result<()> {
        for endpoint in self.config.service.predictors.clone() {
            if let Err(e) = self.register_predictor(&endpoint) {
                self.log(&Warning { message: format!("predictor registration failed: {e}"), context: json!({"endpoint": endpoint}) })?;
            }
        }
        Ok(())
    }

    /// Handshakes with `endpoint` and records its model hash.
    pub fn register_predictor(&self, endpoint: &str) -> Result<PredictorRegistered> {
        let timeout = Duration::from_millis(self.config.service.predictor_timeout_ms);
        let remote = RemotePredictor::handshake(endpoint, timeout)?;
        let descriptor = remote.descriptor().clone();
        let reg = self.registry.lock().expect("registry lock").register(&descriptor);
        let (status, previous_hash) = match reg {
            Registration::New => (PredictorStatus::New, None),
            Registration::Unchanged => (PredictorStatus::Unchanged, None),
            Registration::HashChanged { previous } => (PredictorStatus::HashChanged, Some(previous)),
        };
        let blocked = self.registry.lock().expect("registry lock").is_blocked(endpoint);
        let body = PredictorRegistered { descriptor, status, previous_hash, blocked };
        if status != PredictorStatus::Unchanged {
            self.log(&body)?;
        }
        if status == PredictorStatus::HashChanged {
            self.log(&Warning {
                message: "external predictor model hash changed; sessions blocked until acknowledged".into(),
                context: json!({"endpoint": endpoint}),
            })?;
        }
        self.predictors.write().expect("predictors lock").insert(endpoint.to_string(), Arc::new(remote));
        Ok(body)
    }

    pub fn acknowledge_predictor(&self, endpoint: &str, token: &str) -> Result<()> {
        self.authorize(token)?;
        let mut reg = self.registry.lock().expect("registry lock");
        if !reg.acknowledge(endpoint) {
            return Err(EngineError::NotFound { what: "blocked predictor", id: endpoint.into() });
        }
        let record = reg.endpoints[endpoint].clone();
        drop(reg);
        let descriptor = self
            .predictors
            .read()
            .expect("predictors lock")
            .get(endpoint)
            .map(|p| p.descriptor().clone())
            .ok_or_else(|| EngineError::NotFound { what: "predictor", id: endpoint.into() })?;
        self.log(&PredictorRegistered { descriptor, status: PredictorStatus::Acknowledged, previous_hash: record.previous_hash, blocked: false })?;
        Ok(())
    }

    pub fn registry(&self) -> PredictorRegistry {
        self.registry.lock().expect("registry lock").clone()
    }

    /// Grid mask importance from a registered external predictor.
    pub fn external_saliency(&self, endpoint: &str, payload: &Value, config: &GridConfig, seed: u64) -> Result<SaliencyComputed> {
        if self.registry.lock().expect("registry lock").is_blocked(endpoint) {
            return Err(EngineError::Blocked { endpoint: endpoint.into() });
        }
        let remote = self
            .predictors
            .read()
            .expect("predictors lock")
            .get(endpoint)
            .cloned()
            .ok_or_else(|| EngineError::NotFound { what: "predictor", id: endpoint.into() })?;
        remote.take_replies_digest();
        let saliency = mask_importance_grid(remote.as_ref(), payload, config, seed, self.exec)?;
        let body = SaliencyComputed::External {
            endpoint: endpoint.into(),
            predictor_hash: remote.descriptor().model_hash.clone(),
            payload: payload.clone(),
            config: config.clone(),
            scores_digest: digest_of(&saliency.scores),
            replies_digest: remote.take_replies_digest(),
            saliency,
        };
        self.log(&body)?;
        Ok(body)
    }

    // ---- authority access ----

    /// Accepts only the configured, non-empty authority token.
    pub fn authorize(&self, token: &str) -> Result<()> {
        let expected = &self.config.service.authority_token;
        if expected.is_empty() || expected.as_bytes() != token.as_bytes() {
            return Err(EngineError::Unauthorized);
        }
        Ok(())
    }

    pub fn log_bytes(&self, token: &str) -> Result<Vec<u8>> {
        self.authorize(token)?;
        Ok(self.log.lock().expect("log lock").to_bytes())
    }

    pub fn log_entries(&self, token: &str) -> Result<Vec<LogEntry>> {
        self.authorize(token)?;
        Ok(self.log.lock().expect("log lock").entries().to_vec())
    }

    /// Entries from index `from` onward.
    pub fn log_entries_since(&self, token: &str, from: usize) -> Result<Vec<LogEntry>> {
        self.authorize(token)?;
        let log = self.log.lock().expect("log lock");
        Ok(log.entries().get(from..).unwrap_or_default().to_vec())
    }

    pub fn head(&self) -> Head {
        self.log.lock().expect("log lock").head()
    }

    pub fn health(&self) -> Health {
        let head = self.head();
        Health {
            status: "ok".into(),
            serving_model: self.slot.hash(),
            log_entries: head.entries,
            head_hash: head.head_hash,
            sessions: self.sessions.read().expect("sessions lock").len(),
            parallel: self.exec == Execution::Parallel,
        }
    }

    /// Writes the log to `path` (used by tests and the CLI).
    pub fn export_log(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.log.lock().expect("log lock").to_bytes()).map_err(|e| EngineError::Internal(e.to_string()))
    }
}

/// Object-safe view of an [`EventBody`].
trait ErasedBody {
    fn kind(&self) -> crate::audit::LogKind;
    fn value(&self) -> Value;
}

impl<T: EventBody> ErasedBody for T {
    fn kind(&self) -> crate::audit::LogKind {
        T::KIND
    }
    fn value(&self) -> Value {
        serde_json::to_value(self).expect("event body serializes")
    }
}
