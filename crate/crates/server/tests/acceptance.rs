//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! A criterion whose external input is missing (the public loan CSV) is
//! reported as FAIL with the reason; only failures on available inputs make
//! the process exit non-zero.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tower::ServiceExt;

use deliberate::artifacts::ArtifactStore;
use deliberate::audit::{verify_bytes, AuditLog, LogKind, Verification};
use deliberate::config::ServiceConfig;
use deliberate::dataset::{balance_and_split, load_dataset, Dataset, Label};
use deliberate::engine::Engine;
use deliberate::events::{ModelSwapped, ModelTrained, RetrainAttempted, SessionEvent};
use deliberate::explain::{extract_rule_path, mask_importance, FnBlackBox, MaskConfig, MaskSampling};
use deliberate::finetune::{accumulate, FinetuneSet, Origin, SamplingPolicy, TemporaryPool, Verdict};
use deliberate::par::Execution;
use deliberate::replay::{replay_bytes, EntryStatus};
use deliberate::schema::Schema;
use deliberate::session::{Action, FinalLabel, Step, StepFlags};
use deliberate::similarity::{euclidean, SimilarityIndex};
use deliberate::synth;
use deliberate::tree::train_tree;

const SPLIT_SEED: u64 = 20250416;

struct Outcome {
    pass: bool,
    detail: String,
    /// The criterion could not run because an external input is absent.
    missing_input: bool,
}

impl Outcome {
    fn check(pass: bool, detail: String) -> Outcome {
        Outcome { pass, detail, missing_input: false }
    }
}

fn loan_csv() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("LOAN_DATASET").map(PathBuf::from),
        std::env::var_os("DELIBERATE_LOAN_CSV").map(PathBuf::from),
        Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/loan_data.csv")),
    ];
    candidates.into_iter().flatten().find(|p| p.is_file())
}

/// The public dataset when present, otherwise a same-schema surrogate.
fn loan_source() -> (Dataset, &'static str) {
    match loan_csv().and_then(|p| load_dataset(&p, &Schema::loan()).ok()) {
        Some(ds) => (ds, "public dataset"),
        None => (synth::loan_like(45_000, 1), "surrogate data"),
    }
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

// ---- 1 ----

fn loan_model_accuracy() -> Outcome {
    let Some(path) = loan_csv() else {
        let start = Instant::now();
        let ds = synth::loan_like(45_000, 1);
        let s = balance_and_split(&ds, 18_000, 200, 1795, SPLIT_SEED).expect("surrogate splits");
        let m = train_tree(&s.train, 4, 0).expect("train");
        let acc = m.evaluate(&s.case_study).expect("evaluate").accuracy;
        return Outcome {
            pass: false,
            missing_input: true,
            detail: format!(
                "public loan CSV not found (set LOAN_DATASET or place data/loan_data.csv); \
                 surrogate pipeline for reference: accuracy {acc:.3} in {:.1}s",
                start.elapsed().as_secs_f64()
            ),
        };
    };
    let start = Instant::now();
    let result = load_dataset(&path, &Schema::loan())
        .map_err(|e| e.to_string())
        .and_then(|ds| balance_and_split(&ds, 18_000, 200, 1795, SPLIT_SEED).map_err(|e| e.to_string()))
        .and_then(|s| {
            let m = train_tree(&s.train, 4, 0).map_err(|e| e.to_string())?;
            m.evaluate(&s.case_study).map(|x| x.accuracy).map_err(|e| e.to_string())
        });
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(acc) => Outcome::check(
            (0.78..=0.88).contains(&acc) && secs < 60.0,
            format!("accuracy {acc:.3} (band [0.78, 0.88]) in {secs:.1}s (< 60s)"),
        ),
        Err(e) => Outcome::check(false, format!("{}: {e}", path.display())),
    }
}

// ---- 2 ----

fn rule_faithfulness() -> Outcome {
    let (ds, origin) = loan_source();
    let s = balance_and_split(&ds, 18_000, 200, 1795, SPLIT_SEED).expect("splits");
    let model = train_tree(&s.train, 4, 0).expect("train");
    let start = Instant::now();
    let agree = s
        .case_study
        .records
        .iter()
        .filter(|r| {
            let rules = extract_rule_path(&model, r);
            let all_hold = rules.clauses.iter().all(|c| c.holds(r));
            let counts = &rules.leaf_class_counts;
            let rule_class = (0..counts.len()).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap_or(0);
            all_hold && rule_class == model.predict_distribution(r).predicted
        })
        .count();
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        agree == s.case_study.len() && secs < 1.0,
        format!("{agree}/{} rule paths reproduce the model argmax in {secs:.3}s ({origin})", s.case_study.len()),
    )
}

// ---- 3 ----

fn mask_importance_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for d in 1..=3 {
        for _ in 0..20 {
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = rng.random_range(0.2..0.9);
            let c = 10.0;
            let f = |v: &[f64]| vec![c + v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()];
            let bb = FnBlackBox::new("linear", f);
            let cfg = MaskConfig { n_masks: 1, mask_prob: p, sampling: MaskSampling::Exhaustive, baseline_id: "oracle".into() };
            let s = mask_importance(&bb, &x, &b, None, &cfg, 0, Execution::Sequential).expect("saliency");
            for i in 0..d {
                let expected = c
                    + w[i] * x[i]
                    + (0..d).filter(|&j| j != i).map(|j| w[j] * (p * x[j] + (1.0 - p) * b[j])).sum::<f64>();
                worst = worst.max((s.scores[i] - expected).abs());
            }
        }
    }
    let d = 10;
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x: Vec<f64> = vec![1.0; d];
    let b: Vec<f64> = vec![0.0; d];
    let bb = FnBlackBox::new("linear10", |v: &[f64]| {
        let s: f64 = v.iter().zip(&w).map(|(a, b)| a * b.abs()).sum();
        vec![s, -s]
    });
    let cfg = MaskConfig { n_masks: 5000, ..MaskConfig::default() };
    let s = mask_importance(&bb, &x, &b, None, &cfg, 17, Execution::default()).expect("saliency");
    let abs_w: Vec<f64> = w.iter().map(|v| v.abs()).collect();
    let rho = spearman(&s.scores, &abs_w);
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        worst <= 1e-9 && rho >= 0.9 && secs < 10.0,
        format!("exhaustive max error {worst:.2e} (≤ 1e-9); d=10 Spearman {rho:.3} (≥ 0.9); {secs:.2}s"),
    )
}

// ---- 4 ----

fn similarity_oracle() -> Outcome {
    let reference = synth::loan_like(1000, 41);
    let queries = synth::loan_like(100, 42);
    let index = SimilarityIndex::fit(&reference, 8, Execution::default()).expect("index");
    let mut agree = 0;
    for q in &queries.records {
        let (e, set) = index.query(q, 3, Execution::default()).expect("query");
        let mut brute: Vec<(f64, u64)> = index
            .reference
            .iter()
            .map(|r| (r.embedding.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), r.case_id))
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expect: Vec<u64> = brute.iter().take(3).map(|x| x.1).collect();
        let got: Vec<u64> = set.neighbors.iter().map(|n| n.case_id).collect();
        if got == expect {
            agree += 1;
        }
    }
    let mut rng = StdRng::seed_from_u64(4);
    let n = index.reference.len();
    let mut violations = 0;
    for _ in 0..1000 {
        let pick = |rng: &mut StdRng| &index.reference[rng.random_range(0..n)].embedding;
        let (x, y, z) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
        let ok = euclidean(x, x).abs() <= 1e-9
            && euclidean(x, y) >= 0.0
            && (euclidean(x, y) - euclidean(y, x)).abs() <= 1e-9
            && euclidean(x, z) <= euclidean(x, y) + euclidean(y, z) + 1e-9;
        if !ok {
            violations += 1;
        }
    }
    Outcome::check(
        agree == 100 && violations == 0,
        format!("top-3 equals brute force in {agree}/100 queries; metric-axiom violations {violations}/1000 triples"),
    )
}

// ---- shared engine fixtures ----

fn small_config(dir: &std::path::Path) -> ServiceConfig {
    let mut c = ServiceConfig::default();
    c.data.artifacts = dir.join("artifacts");
    c.data.log = dir.join("audit.log");
    c.split.train = 1200;
    c.split.case_study = 60;
    c.split.temporary = 300;
    c.split.seed = 5;
    c.similarity.n_components = 8;
    c.service.authority_token = "authority".into();
    c
}

fn memory_engine(config: ServiceConfig, source: Dataset) -> Engine {
    let store = ArtifactStore::open(&config.data.artifacts).expect("store");
    let (log, _sink) = AuditLog::in_memory();
    Engine::fresh(config, source, log, store, Execution::default()).expect("engine")
}

// ---- 5 ----

#[derive(Clone, Copy)]
struct Oracle {
    step: Step,
    flags: StepFlags,
    skip_used: bool,
    seen: bool,
}

impl Oracle {
    fn enabled(&self) -> Vec<Step> {
        let mut v = vec![Step::CaseSelected, Step::FirstImpression];
        if self.flags.explanation {
            v.push(Step::ExplanationShown);
        }
        if self.flags.similarity {
            v.push(Step::SimilarityShown);
        }
        v.extend([Step::ConfidenceShown, Step::Finalized]);
        v
    }

    fn next(&self, a: &Action) -> Option<Oracle> {
        if self.step == Step::Finalized {
            return None;
        }
        let steps = self.enabled();
        let pos = steps.iter().position(|s| *s == self.step).expect("enabled");
        let mut o = *self;
        match a {
            Action::Create => return None,
            Action::Impression { .. } => {
                if self.step != Step::CaseSelected {
                    return None;
                }
                o.step = Step::FirstImpression;
            }
            Action::Advance => {
                if self.step == Step::CaseSelected || self.step == Step::ConfidenceShown {
                    return None;
                }
                o.step = steps[pos + 1];
            }
            Action::Back => {
                if self.step == Step::CaseSelected || (self.skip_used && self.step == Step::ConfidenceShown) {
                    return None;
                }
                o.step = steps[pos - 1];
            }
            Action::Skip => {
                if !matches!(self.step, Step::CaseSelected | Step::FirstImpression) || self.seen {
                    return None;
                }
                o.skip_used = true;
                o.step = Step::ConfidenceShown;
            }
            Action::Annotate { .. } => {
                if self.step == Step::CaseSelected {
                    return None;
                }
            }
            Action::Finalize { decision, .. } => {
                let early = self.flags.early_abstention && *decision == FinalLabel::Abstain;
                if self.step != Step::ConfidenceShown && !early {
                    return None;
                }
                o.step = Step::Finalized;
            }
        }
        if matches!(o.step, Step::ExplanationShown | Step::SimilarityShown) {
            o.seen = true;
        }
        Some(o)
    }
}

const VERDICT_KEYS: [&str; 9] = [
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

fn leaked_key(v: &Value) -> Option<String> {
    match v {
        Value::Object(m) => m.iter().find_map(|(k, x)| {
            if VERDICT_KEYS.contains(&k.as_str()) {
                Some(k.clone())
            } else {
                leaked_key(x)
            }
        }),
        Value::Array(a) => a.iter().find_map(leaked_key),
        _ => None,
    }
}

fn random_action(rng: &mut StdRng) -> Action {
    let note = if rng.random_bool(0.2) { String::new() } else { "considered".to_string() };
    let label = match rng.random_range(0..3) {
        0 => None,
        1 => Some(Label::Grant),
        _ => Some(Label::Deny),
    };
    match rng.random_range(0..12) {
        0 | 1 => Action::Impression { label, note },
        2..=5 => Action::Advance,
        6 | 7 => Action::Back,
        8 => Action::Skip,
        9 => Action::Annotate { label, note },
        _ => Action::Finalize {
            decision: [FinalLabel::Grant, FinalLabel::Deny, FinalLabel::Abstain][rng.random_range(0..3)],
            note: None,
        },
    }
}

fn gating() -> Outcome {
    let source = synth::loan_like(6000, 8);
    let mut rng = StdRng::seed_from_u64(5);
    let (mut sequences, mut calls, mut wrong_verdict, mut leaks, mut wrong_kind, mut log_mismatch) = (0, 0, 0, 0, 0, 0);
    let flag_sets = [
        StepFlags { explanation: true, similarity: true, saliency: true, early_abstention: false },
        StepFlags { explanation: true, similarity: true, saliency: true, early_abstention: true },
        StepFlags { explanation: false, similarity: true, saliency: true, early_abstention: false },
        StepFlags { explanation: true, similarity: false, saliency: false, early_abstention: true },
        StepFlags { explanation: false, similarity: false, saliency: true, early_abstention: false },
    ];
    for batch in 0..10 {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut cfg = small_config(dir.path());
        cfg.explainer.n_masks = 40;
        cfg.finetune.threshold = 1_000_000;
        cfg.steps = flag_sets[batch % flag_sets.len()];
        let engine = memory_engine(cfg.clone(), source.clone());
        let token = engine.acknowledge();
        for _ in 0..1000 {
            sequences += 1;
            let case_id = rng.random_range(0..cfg.split.case_study as u64);
            let created = engine.create_session(case_id, &token).expect("create");
            let id = created.session_id.clone();
            let mut oracle = Oracle { step: Step::CaseSelected, flags: cfg.steps, skip_used: false, seen: false };
            let mut responses = vec![created];
            let len = rng.random_range(1..14);
            for _ in 0..len {
                let action = random_action(&mut rng);
                calls += 1;
                let before = engine.head().entries as usize;
                let expected = oracle.next(&action);
                let got = engine.act(&id, action);
                let after = engine.log_entries_since("authority", before).expect("log");
                let events = after.iter().filter(|e| e.kind == LogKind::SessionEvent).count();
                if events != 1 {
                    log_mismatch += 1;
                }
                match (expected, got) {
                    (Some(o), Ok(r)) if r.step == o.step => {
                        oracle = o;
                        responses.push(r);
                    }
                    (None, Err(e)) if e.step() == Some(oracle.step) || e.code() == "terminal_state" => {}
                    _ => wrong_verdict += 1,
                }
            }
            responses.push(engine.get_session(&id).expect("get"));
            for r in &responses {
                let kind = r.payload.kind_name();
                let expected_kind = match r.step {
                    Step::CaseSelected | Step::FirstImpression => "case",
                    Step::ExplanationShown => "explanation",
                    Step::SimilarityShown => "similarity",
                    Step::ConfidenceShown => "confidence",
                    Step::Finalized => "decision",
                };
                if kind != expected_kind {
                    wrong_kind += 1;
                }
                if r.step < Step::ConfidenceShown {
                    let v = serde_json::to_value(r).expect("json");
                    if leaked_key(&v).is_some() {
                        leaks += 1;
                    }
                }
            }
        }
    }
    Outcome::check(
        wrong_verdict == 0 && leaks == 0 && wrong_kind == 0 && log_mismatch == 0 && sequences == 10_000,
        format!(
            "{sequences} sequences / {calls} calls: {wrong_verdict} mis-gated, {leaks} verdict leaks before confidence, \
             {wrong_kind} wrong payload kinds, {log_mismatch} calls without exactly one session event"
        ),
    )
}

// ---- 6 ----

fn scripted_sessions(engine: &Engine, n: usize, rng: &mut StdRng) {
    let token = engine.acknowledge();
    for i in 0..n {
        let id = engine.create_session((i % 60) as u64, &token).expect("create").session_id;
        engine.record_first_impression(&id, Some(Label::Grant), "first look").expect("impression");
        engine.advance(&id).expect("rules");
        engine.advance(&id).expect("similar");
        if rng.random_bool(0.3) {
            engine.go_back(&id).expect("back");
            engine.advance(&id).expect("again");
        }
        engine.advance(&id).expect("confidence");
        let d = [FinalLabel::Grant, FinalLabel::Deny, FinalLabel::Abstain][rng.random_range(0..3)];
        engine.finalize(&id, d, Some("final".into())).expect("finalize");
    }
}

fn log_integrity() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut cfg = small_config(dir.path());
    cfg.finetune.threshold = 6;
    cfg.finetune.floor = 0.5;
    let mut rng = StdRng::seed_from_u64(6);
    let store = ArtifactStore::open(&cfg.data.artifacts).expect("store");
    let log = AuditLog::open_file(&cfg.data.log).expect("log");
    let engine = Engine::fresh(cfg.clone(), synth::loan_like(6000, 9), log, store.clone(), Execution::default()).expect("engine");
    while engine.head().entries < 200 {
        scripted_sessions(&engine, 1, &mut rng);
    }
    let full = std::fs::read(&cfg.data.log).expect("log file");
    let lines: Vec<&[u8]> = full.split(|b| *b == b'\n').filter(|l| !l.is_empty()).collect();
    let mut fixture = Vec::new();
    for l in &lines[..200] {
        fixture.extend_from_slice(l);
        fixture.push(b'\n');
    }
    let fixture_ok = matches!(verify_bytes(&fixture), Verification::Ok { entries: 200, .. });
    let mut detected = 0;
    for _ in 0..100 {
        let mut bytes = fixture.clone();
        let pos = loop {
            let p = rng.random_range(0..bytes.len());
            if bytes[p] != b'\n' {
                break p;
            }
        };
        let original = bytes[pos];
        bytes[pos] = loop {
            let c = rng.random_range(0x20u8..0x7f);
            if c != original {
                break c;
            }
        };
        let expected = fixture[..pos].iter().filter(|b| **b == b'\n').count() as u64;
        if verify_bytes(&bytes) == Verification::FirstBadIndex(expected) {
            detected += 1;
        }
    }
    let report = replay_bytes(&full, &store, &Schema::loan(), Execution::default());
    let saliency = report
        .entries
        .iter()
        .filter(|e| e.kind == LogKind::SaliencyComputed)
        .collect::<Vec<_>>();
    let saliency_ok = !saliency.is_empty() && saliency.iter().all(|e| e.status == EntryStatus::Matched);
    let pct = 100.0 * report.matched as f64 / report.entries.len().max(1) as f64;
    Outcome::check(
        fixture_ok && detected == 100 && report.all_matched() && saliency_ok,
        format!(
            "{detected}/100 mutations located at the right index; golden replay {}/{} matched ({pct:.0}%), \
             {} saliency entries regenerated bit-identically",
            report.matched,
            report.entries.len(),
            saliency.len()
        ),
    )
}

// ---- 7 ----

fn finetune_balance_and_guardrail() -> Outcome {
    let ds = synth::loan_like(6000, 10);
    let s = balance_and_split(&ds, 1200, 500, 600, 7).expect("splits");
    let mut rng = StdRng::seed_from_u64(7);
    let mut set = FinetuneSet::new(usize::MAX);
    let mut pool = TemporaryPool::new(s.temporary.records.clone());
    let (mut balanced, mut while_lasting) = (0, 0);
    for (i, case) in s.case_study.records.iter().enumerate() {
        let class = rng.random_range(0..2usize);
        let available = pool.count_of(1 - class) > 0;
        let delta = accumulate(&mut set, &mut pool, case, class, &format!("s{i}"), 2, SamplingPolicy::BinaryPair, i as u64);
        if available {
            while_lasting += 1;
            let user = delta.entries.iter().filter(|e| matches!(e.origin, Origin::User { .. })).count();
            let counts = [0, 1].map(|c| delta.entries.iter().filter(|e| e.class == c).count());
            if user == 1 && delta.entries.len() == 2 && counts == [1, 1] {
                balanced += 1;
            }
        }
    }
    let balance_ok = balanced == while_lasting && while_lasting > 0;

    let source = synth::loan_like(6000, 11);
    let mut guard_violations = 0;
    let mut attempts = 0;
    let mut swaps = 0;
    for floor in [1.0, 0.95, 0.85, 0.8, 0.5, 0.0] {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut cfg = small_config(dir.path());
        cfg.explainer.n_masks = 40;
        cfg.finetune.threshold = 5;
        cfg.finetune.floor = floor;
        let engine = memory_engine(cfg, source.clone());
        let mut r = StdRng::seed_from_u64(70);
        scripted_sessions(&engine, 25, &mut r);
        let entries = engine.log_entries("authority").expect("log");
        let mut serving = entries
            .iter()
            .find(|e| e.kind == LogKind::ModelTrained)
            .and_then(|e| e.body_as::<ModelTrained>().ok())
            .map(|m| m.model_hash)
            .expect("initial model");
        let mut pending: Option<String> = None;
        for e in &entries {
            match e.kind {
                LogKind::RetrainAttempted => {
                    attempts += 1;
                    let a: RetrainAttempted = e.body_as().expect("attempt");
                    let o = a.outcome.expect("outcome");
                    let passes = o.holdout_accuracy.is_some_and(|acc| acc >= floor);
                    let swapped = o.verdict == Verdict::Swapped;
                    if passes != swapped || (!swapped && o.serving_hash_after != serving) || o.serving_hash_before != serving {
                        guard_violations += 1;
                    }
                    pending = swapped.then(|| o.candidate_hash.clone());
                }
                LogKind::ModelSwapped => {
                    let m: ModelSwapped = e.body_as().expect("swap");
                    if pending.take().as_deref() != Some(m.to.as_str()) || m.holdout_accuracy < floor {
                        guard_violations += 1;
                    }
                    serving = m.to;
                    swaps += 1;
                }
                LogKind::DecisionFinalized
                    if pending.is_some() => {
                        guard_violations += 1;
                    }
                _ => {}
            }
        }
        if engine.serving_model().model_hash != serving {
            guard_violations += 1;
        }
    }
    Outcome::check(
        balance_ok && guard_violations == 0 && attempts > 0,
        format!(
            "{balanced}/{while_lasting} deltas balanced while the pool lasted over 500 sessions; \
             {attempts} retrain attempts across six floors, {swaps} swaps, {guard_violations} guardrail violations in the log"
        ),
    )
}

// ---- 8 ----

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .expect("request");
    let resp = app.clone().oneshot(req).await.expect("response");
    let status = resp.status();
    let bytes = resp.into_body().collect().await.expect("body").to_bytes().to_vec();
    (status, bytes)
}

async fn json_call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn director_trajectory() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (source, origin) = loan_source();
    let mut cfg = ServiceConfig::default();
    cfg.data.artifacts = dir.path().join("artifacts");
    cfg.data.log = dir.path().join("audit.log");
    cfg.service.authority_token = "authority".into();
    let store = ArtifactStore::open(&cfg.data.artifacts).map_err(|e| e.to_string())?;
    let log = AuditLog::open_file(&cfg.data.log).map_err(|e| e.to_string())?;
    let engine = tokio::task::spawn_blocking(move || Engine::fresh(cfg, source, log, store.clone(), Execution::default()).map(|e| (e, store)))
        .await
        .map_err(|e| e.to_string())?
        .map_err(|e| e.to_string())?;
    let (engine, store) = engine;
    let app = deliberate_server::api::router(Arc::new(engine));

    let (_, ack) = json_call(&app, "POST", "/api/v1/intro/ack", None).await;
    let token = ack["ack_token"].as_str().ok_or("no ack token")?.to_string();
    let (s, cases) = json_call(&app, "GET", "/api/v1/cases", None).await;
    let listed = cases.as_array().map_or(0, Vec::len);
    if s != StatusCode::OK || listed != 200 {
        return Err(format!("case list returned {s} with {listed} cases"));
    }
    let (s, created) = json_call(&app, "POST", "/api/v1/sessions", Some(json!({"case_id": 144, "ack_token": token}))).await;
    if s != StatusCode::CREATED {
        return Err(format!("create returned {s}: {created}"));
    }
    let id = created["session_id"].as_str().ok_or("no session id")?.to_string();
    let note = "Worth considering. Perhaps the years of employment; they are not too few, but not too much either. \
                We would also observe the solvency of the employer, mildly";
    let mut trail = vec![created["step"].clone()];
    let (_, r) = json_call(&app, "POST", &format!("/api/v1/sessions/{id}/impression"), Some(json!({"note": note}))).await;
    trail.push(r["step"].clone());
    let (_, rules) = json_call(&app, "POST", &format!("/api/v1/sessions/{id}/advance"), None).await;
    trail.push(rules["step"].clone());
    let rule_lines = rules["payload"]["rules"]["lines"].as_array().map_or(0, Vec::len);
    let (_, sim) = json_call(&app, "POST", &format!("/api/v1/sessions/{id}/advance"), None).await;
    trail.push(sim["step"].clone());
    let neighbors = sim["payload"]["neighbors"].as_array().map_or(0, Vec::len);
    let (_, conf) = json_call(&app, "POST", &format!("/api/v1/sessions/{id}/advance"), None).await;
    trail.push(conf["step"].clone());
    let (_, fin) = json_call(
        &app,
        "POST",
        &format!("/api/v1/sessions/{id}/finalize"),
        Some(json!({"decision": "abstain", "note": "missing parameters such as the rent amount"})),
    )
    .await;
    trail.push(fin["step"].clone());
    let expected = ["CaseSelected", "FirstImpression", "ExplanationShown", "SimilarityShown", "ConfidenceShown", "Finalized"];
    if trail.iter().map(|v| v.as_str().unwrap_or("")).ne(expected) {
        return Err(format!("trajectory {trail:?}"));
    }
    if rule_lines == 0 || neighbors != 3 || conf["payload"]["distribution"].is_null() {
        return Err(format!("rules {rule_lines} lines, {neighbors} neighbors, confidence {}", conf["payload"]));
    }
    let (s, _) = call(&app, "GET", "/api/v1/log?format=jsonl", None, None).await;
    if s != StatusCode::UNAUTHORIZED {
        return Err(format!("log without token returned {s}"));
    }
    let (s, bytes) = call(&app, "GET", "/api/v1/log?format=jsonl", None, Some("authority")).await;
    if s != StatusCode::OK {
        return Err(format!("log with token returned {s}"));
    }
    let entries = deliberate::audit::parse_entries(&bytes);
    let accepted: Vec<String> = entries
        .iter()
        .filter(|e| e.kind == LogKind::SessionEvent)
        .filter_map(|e| e.body_as::<SessionEvent>().ok())
        .filter(|e| e.accepted && e.session_id.as_deref() == Some(id.as_str()))
        .map(|e| e.to.map(|s| format!("{s:?}")).unwrap_or_default())
        .collect();
    let computed: BTreeSet<LogKind> = entries.iter().map(|e| e.kind).collect();
    for k in [LogKind::SaliencyComputed, LogKind::NeighborsComputed, LogKind::ConfidenceRevealed, LogKind::DecisionFinalized] {
        if !computed.contains(&k) {
            return Err(format!("no {} entry", k.as_str()));
        }
    }
    if accepted.len() != 6 {
        return Err(format!("{} accepted session events: {accepted:?}", accepted.len()));
    }
    let report = tokio::task::spawn_blocking(move || replay_bytes(&bytes, &store, &Schema::loan(), Execution::default()))
        .await
        .map_err(|e| e.to_string())?;
    if !report.all_matched() {
        return Err(format!("replay: {:?}", report.first_divergence()));
    }
    Ok(format!(
        "case 144 ({origin}): 6 steps logged, {rule_lines} rule lines, 3 neighbors, abstained; replay {}/{} matched",
        report.matched,
        report.entries.len()
    ))
}

fn director_trajectory_fixture(rt: &tokio::runtime::Runtime) -> Outcome {
    match rt.block_on(director_trajectory()) {
        Ok(detail) => Outcome::check(true, detail),
        Err(detail) => Outcome::check(false, detail),
    }
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let rt = tokio::runtime::Runtime::new().expect("runtime");
    let criteria: Vec<(&str, Criterion)> = vec![
        ("loan-model-accuracy", Box::new(loan_model_accuracy)),
        ("rule-faithfulness", Box::new(rule_faithfulness)),
        ("mask-importance-oracle", Box::new(mask_importance_oracle)),
        ("similarity-oracle", Box::new(similarity_oracle)),
        ("gating", Box::new(gating)),
        ("log-integrity", Box::new(log_integrity)),
        ("finetune-balance-and-guardrail", Box::new(finetune_balance_and_guardrail)),
        ("director-trajectory-fixture", Box::new(|| director_trajectory_fixture(&rt))),
    ];
    let mut failed = 0;
    let mut blocked = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} [{}] {name}: {} ({:.1}s)", i + 1, o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            if o.missing_input {
                blocked += 1;
            } else {
                failed += 1;
            }
        }
    }
    let passed = criteria.len() - failed - blocked;
    println!("acceptance: {passed}/{} PASS, {failed} FAIL, {blocked} FAIL for missing input", criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
