#![allow(dead_code)]

use std::path::Path;

use deliberate::artifacts::ArtifactStore;
use deliberate::audit::AuditLog;
use deliberate::config::ServiceConfig;
use deliberate::engine::Engine;
use deliberate::par::Execution;
use deliberate::synth;

pub fn small_config(dir: &Path) -> ServiceConfig {
    let mut c = ServiceConfig::default();
    c.data.artifacts = dir.join("artifacts");
    c.data.log = dir.join("audit.log");
    c.split.train = 1200;
    c.split.case_study = 60;
    c.split.temporary = 300;
    c.split.seed = 5;
    c.explainer.n_masks = 200;
    c.similarity.n_components = 8;
    c.finetune.threshold = 4;
    c.finetune.floor = 0.5;
    c.service.authority_token = "audit-token".into();
    c
}

pub fn engine_at(dir: &Path, config: ServiceConfig) -> Engine {
    let store = ArtifactStore::open(&config.data.artifacts).unwrap();
    let log = AuditLog::open_file(&config.data.log).unwrap();
    if log.is_empty() {
        Engine::fresh(config, synth::loan_like(6000, 1), log, store, Execution::default()).unwrap()
    } else {
        let _ = dir;
        Engine::resume(config, log, store, Execution::default()).unwrap()
    }
}
