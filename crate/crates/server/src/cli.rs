//! Admin command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context as _};
use clap::{Parser, Subcommand, ValueEnum};

use deliberate::artifacts::ArtifactStore;
use deliberate::audit::{read_entries, verify_file, AuditLog, Verification};
use deliberate::config::ServiceConfig;
use deliberate::dataset::load_dataset;
use deliberate::engine::Engine;
use deliberate::par::Execution;
use deliberate::predictor::{StubBehavior, StubConfig, StubServer};
use deliberate::replay::{replay_bytes, EntryStatus};
use deliberate::schema::Schema;
use deliberate::synth;

#[derive(Debug, Parser)]
#[command(name = "deliberate", version, about = "Step-gated decision support service")]
pub struct Cli {
    /// Run every data-parallel loop on the current thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest the dataset, split it, train the first model and start the log.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the JSON API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Check the hash chain of a log file.
    VerifyLog { path: PathBuf },
    /// Re-execute every logged computation against an artifact store.
    Replay {
        path: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        /// Print the full per-entry report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print the entry count and head hash of a log file.
    ExportHead { path: PathBuf },
    /// Force a guardrailed retrain on base plus the finetune set.
    Retrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print a configuration file with every default filled in.
    InitConfig,
    /// Write a synthetic dataset with the loan schema.
    SynthData {
        #[arg(long, default_value_t = 45_000)]
        rows: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the reference external predictor.
    StubPredictor {
        #[arg(long, default_value = "127.0.0.1:9090")]
        listen: String,
        #[arg(long, value_enum, default_value_t = Behavior::Brightness)]
        behavior: Behavior,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Behavior {
    Brightness,
    Constant,
    Faulty,
    Silent,
}

fn exec(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn load_config(path: &Path) -> anyhow::Result<ServiceConfig> {
    ServiceConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn open_engine(config: ServiceConfig, exec: Execution) -> anyhow::Result<Engine> {
    let store = ArtifactStore::open(&config.data.artifacts)?;
    let log = AuditLog::open_file(&config.data.log)?;
    let engine = if log.is_empty() {
        let source = load_dataset(&config.data.dataset, &Schema::loan())?;
        Engine::fresh(config, source, log, store, exec)?
    } else {
        Engine::resume(config, log, store, exec)?
    };
    Ok(engine)
}

/// Runs a non-serving command; returns the process exit status.
pub fn run(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<i32> {
    match &cli.command {
        Command::Train { config } => {
            let config = load_config(config)?;
            if !AuditLog::open_file(&config.data.log)?.is_empty() {
                bail!("{} already holds a log; use `retrain` or start a new log", config.data.log.display());
            }
            let engine = open_engine(config, exec(cli))?;
            let model = engine.serving_model();
            let acc = model.evaluate_with(engine.case_study(), exec(cli))?.accuracy;
            writeln!(out, "model {}", model.model_hash)?;
            writeln!(out, "train accuracy {:.4}", model.metrics.train_accuracy)?;
            writeln!(out, "case-study accuracy {acc:.4} on {} cases", engine.case_study().len())?;
            writeln!(out, "log head {}", engine.head().head_hash)?;
            Ok(0)
        }
        Command::Serve { .. } => bail!("`serve` runs from the binary entry point"),
        Command::VerifyLog { path } => match verify_file(path)? {
            Verification::Ok { entries, head } => {
                writeln!(out, "ok: {entries} entries, head {}", head.head_hash)?;
                Ok(0)
            }
            Verification::FirstBadIndex(i) => {
                writeln!(out, "tampered: first bad index {i}")?;
                Ok(1)
            }
        },
        Command::Replay { path, artifacts, json } => {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let store = ArtifactStore::open(artifacts)?;
            let report = replay_bytes(&bytes, &store, &Schema::loan(), exec(cli));
            if *json {
                writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            } else {
                if let Some(i) = report.first_bad_index {
                    writeln!(out, "chain broken at index {i}; replay stopped there")?;
                }
                for e in &report.entries {
                    match &e.status {
                        EntryStatus::Matched => {}
                        EntryStatus::Diverged { field, recorded, recomputed } => {
                            writeln!(out, "#{} {}: diverged at `{field}`: recorded {recorded} recomputed {recomputed}", e.index, e.kind.as_str())?
                        }
                        EntryStatus::Unreplayable { reason } => {
                            writeln!(out, "#{} {}: unreplayable: {reason}", e.index, e.kind.as_str())?
                        }
                    }
                }
                writeln!(
                    out,
                    "{} matched, {} diverged, {} unreplayable",
                    report.matched, report.diverged, report.unreplayable
                )?;
                if report.all_matched() {
                    writeln!(out, "all matched")?;
                }
            }
            Ok(if report.all_matched() { 0 } else { 1 })
        }
        Command::ExportHead { path } => {
            let entries = read_entries(path)?;
            let head = match verify_file(path)? {
                Verification::Ok { entries, head } => serde_json::json!({"entries": entries, "head_hash": head.head_hash, "verified": true}),
                Verification::FirstBadIndex(i) => serde_json::json!({
                    "entries": entries.len(),
                    "head_hash": entries.last().map(|e| e.entry_hash.clone()),
                    "verified": false,
                    "first_bad_index": i,
                }),
            };
            writeln!(out, "{}", serde_json::to_string_pretty(&head)?)?;
            Ok(0)
        }
        Command::Retrain { config } => {
            let engine = open_engine(load_config(config)?, exec(cli))?;
            let outcome = engine.retrain_now()?;
            writeln!(out, "{}", serde_json::to_string_pretty(&outcome)?)?;
            Ok(0)
        }
        Command::InitConfig => {
            write!(out, "{}", ServiceConfig::default().to_toml())?;
            Ok(0)
        }
        Command::SynthData { rows, seed, out: path } => {
            let ds = synth::loan_like(*rows, *seed);
            ds.save(path)?;
            writeln!(out, "wrote {} rows to {} ({})", ds.len(), path.display(), ds.content_hash)?;
            Ok(0)
        }
        Command::StubPredictor { listen, behavior } => {
            let behavior = match behavior {
                Behavior::Brightness => StubBehavior::Brightness,
                Behavior::Constant => StubBehavior::Constant { classes: 2 },
                Behavior::Faulty => StubBehavior::Faulty,
                Behavior::Silent => StubBehavior::Silent,
            };
            let server = StubServer::spawn_on(listen, StubConfig::new(behavior))?;
            writeln!(out, "stub predictor listening on {}", server.endpoint())?;
            out.flush()?;
            loop {
                std::thread::park();
            }
        }
    }
}

/// Builds the engine and serves the API until interrupted.
pub async fn serve(cli: &Cli, config: &Path, listen: Option<String>) -> anyhow::Result<()> {
    let config = load_config(config)?;
    let addr = listen.unwrap_or_else(|| config.service.listen.clone());
    let exec = exec(cli);
    let engine = tokio::task::spawn_blocking(move || open_engine(config, exec)).await??;
    let app = crate::api::router(Arc::new(engine));
    let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
