//! Append-only, hash-chained event log.
//!
//! Each entry is one line of canonical JSON (keys sorted, compact):
//!
//! ```text
//! {"body":{..},"entry_hash":"<hex>","index":N,"kind":"<Kind>","prev_hash":"<hex>","tick":T,"timestamp":"<rfc3339>"}
//! ```
//!
//! `entry_hash = SHA-256(prev_hash ‖ canonical({"body":B,"kind":K}) ‖ be64(index) ‖ timestamp ‖ be64(tick))`
//! with `prev_hash` as its 32 raw bytes and the genesis `prev_hash` all zero.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::digest::canonical_json;

pub const GENESIS: [u8; 32] = [0u8; 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LogKind {
    DatasetRegistered,
    ModelTrained,
    SessionEvent,
    SaliencyComputed,
    NeighborsComputed,
    ConfidenceRevealed,
    DecisionFinalized,
    FinetuneAccumulated,
    RetrainAttempted,
    ModelSwapped,
    PredictorRegistered,
    Warning,
}

impl LogKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LogKind::DatasetRegistered => "DatasetRegistered",
            LogKind::ModelTrained => "ModelTrained",
            LogKind::SessionEvent => "SessionEvent",
            LogKind::SaliencyComputed => "SaliencyComputed",
            LogKind::NeighborsComputed => "NeighborsComputed",
            LogKind::ConfidenceRevealed => "ConfidenceRevealed",
            LogKind::DecisionFinalized => "DecisionFinalized",
            LogKind::FinetuneAccumulated => "FinetuneAccumulated",
            LogKind::RetrainAttempted => "RetrainAttempted",
            LogKind::ModelSwapped => "ModelSwapped",
            LogKind::PredictorRegistered => "PredictorRegistered",
            LogKind::Warning => "Warning",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub index: u64,
    pub timestamp: String,
    /// Strictly increasing counter; microseconds since the epoch unless the
    /// wall clock stalled or stepped back.
    pub tick: u64,
    pub kind: LogKind,
    pub body: Value,
    pub prev_hash: String,
    pub entry_hash: String,
}

impl LogEntry {
    pub fn to_line(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("entry serializes"))
    }

    pub fn body_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_value(self.body.clone())
    }
}

/// Chain digest of one entry.
pub fn entry_hash(prev: &[u8; 32], kind: LogKind, body: &Value, index: u64, timestamp: &str, tick: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev);
    h.update(canonical_json(&json!({"body": body, "kind": kind.as_str()})).as_bytes());
    h.update(index.to_be_bytes());
    h.update(timestamp.as_bytes());
    h.update(tick.to_be_bytes());
    h.finalize().into()
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("log storage failure: {0}")]
    Storage(#[from] std::io::Error),
    #[error("cannot read log at {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("existing log fails verification at entry {0}")]
    Corrupt(u64),
    #[error("body is not a JSON object")]
    BadBody,
}

/// Durable destination for log lines.
pub trait LogSink: Send {
    /// Must not return before `line` is durable.
    fn append_line(&mut self, line: &str) -> std::io::Result<()>;
}

pub struct FileSink {
    file: File,
    path: PathBuf,
}

impl FileSink {
    pub fn open(path: &Path) -> std::io::Result<FileSink> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(FileSink { file, path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl LogSink for FileSink {
    fn append_line(&mut self, line: &str) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        self.file.write_all(&buf)?;
        self.file.sync_data()
    }
}

/// In-memory sink; clones share the same buffer.
#[derive(Clone, Default)]
pub struct MemorySink {
    lines: Arc<Mutex<Vec<String>>>,
    fail: Arc<Mutex<bool>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in self.lines.lock().expect("sink lock").iter() {
            out.extend_from_slice(l.as_bytes());
            out.push(b'\n');
        }
        out
    }

    /// Makes subsequent appends fail, as a full disk would.
    pub fn set_failing(&self, fail: bool) {
        *self.fail.lock().expect("sink lock") = fail;
    }
}

impl LogSink for MemorySink {
    fn append_line(&mut self, line: &str) -> std::io::Result<()> {
        if *self.fail.lock().expect("sink lock") {
            return Err(std::io::Error::other("memory sink set to fail"));
        }
        self.lines.lock().expect("sink lock").push(line.to_string());
        Ok(())
    }
}

/// Source of wall-clock microseconds; injectable for tests.
pub type Clock = Box<dyn Fn() -> i64 + Send>;

pub fn system_clock() -> Clock {
    Box::new(|| Utc::now().timestamp_micros())
}

/// Clock that starts at `start` and advances `step` microseconds per call.
pub fn stepping_clock(start: i64, step: i64) -> Clock {
    let now = Mutex::new(start);
    Box::new(move || {
        let mut t = now.lock().expect("clock lock");
        let v = *t;
        *t += step;
        v
    })
}

/// The single writer of a chain.
pub struct AuditLog {
    sink: Box<dyn LogSink>,
    entries: Vec<LogEntry>,
    head: [u8; 32],
    last_tick: Option<u64>,
    clock: Clock,
}

impl AuditLog {
    pub fn new(sink: Box<dyn LogSink>) -> AuditLog {
        Self::with_clock(sink, system_clock())
    }

    pub fn with_clock(sink: Box<dyn LogSink>, clock: Clock) -> AuditLog {
        AuditLog { sink, entries: Vec::new(), head: GENESIS, last_tick: None, clock }
    }

    pub fn in_memory() -> (AuditLog, MemorySink) {
        let sink = MemorySink::new();
        (AuditLog::new(Box::new(sink.clone())), sink)
    }

    /// Opens a log file, verifying and continuing any existing chain.
    pub fn open_file(path: &Path) -> Result<AuditLog, AuditError> {
        let existing = if path.exists() {
            let bytes = fs::read(path).map_err(|source| AuditError::Unreadable {
                path: path.display().to_string(),
                source,
            })?;
            match verify_bytes(&bytes) {
                Verification::Ok { .. } => parse_entries(&bytes),
                Verification::FirstBadIndex(i) => return Err(AuditError::Corrupt(i)),
            }
        } else {
            Vec::new()
        };
        let mut log = AuditLog::new(Box::new(FileSink::open(path)?));
        if let Some(last) = existing.last() {
            log.head = decode_hash(&last.entry_hash).expect("verified hash");
            log.last_tick = Some(last.tick);
        }
        log.entries = existing;
        Ok(log)
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head(&self) -> Head {
        Head {
            entries: self.entries.len() as u64,
            head_hash: hex::encode(self.head),
        }
    }

    /// Chains and persists one entry. On sink failure nothing changes.
    pub fn append(&mut self, kind: LogKind, body: Value) -> Result<LogEntry, AuditError> {
        if !body.is_object() {
            return Err(AuditError::BadBody);
        }
        let index = self.entries.len() as u64;
        let wall = (self.clock)().max(0) as u64;
        let tick = match self.last_tick {
            Some(t) => wall.max(t + 1),
            None => wall,
        };
        let timestamp = Utc
            .timestamp_micros(tick as i64)
            .single()
            .expect("valid microsecond timestamp")
            .to_rfc3339_opts(SecondsFormat::Micros, true);
        let hash = entry_hash(&self.head, kind, &body, index, &timestamp, tick);
        let entry = LogEntry {
            index,
            timestamp,
            tick,
            kind,
            body,
            prev_hash: hex::encode(self.head),
            entry_hash: hex::encode(hash),
        };
        self.sink.append_line(&entry.to_line())?;
        self.head = hash;
        self.last_tick = Some(tick);
        self.entries.push(entry.clone());
        Ok(entry)
    }

    pub fn append_typed<T: Serialize>(&mut self, kind: LogKind, body: &T) -> Result<LogEntry, AuditError> {
        self.append(kind, serde_json::to_value(body).map_err(|_| AuditError::BadBody)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend_from_slice(e.to_line().as_bytes());
            out.push(b'\n');
        }
        out
    }
}

/// Digest of the last entry, for anchoring outside the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub entries: u64,
    pub head_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verification {
    Ok { entries: u64, head: Head },
    FirstBadIndex(u64),
}

fn decode_hash(s: &str) -> Option<[u8; 32]> {
    let v = hex::decode(s).ok()?;
    v.try_into().ok()
}

fn lines(bytes: &[u8]) -> Vec<&[u8]> {
    let mut parts: Vec<&[u8]> = bytes.split(|b| *b == b'\n').collect();
    if parts.last().is_some_and(|l| l.is_empty()) {
        parts.pop();
    }
    parts
}

fn check_line(raw: &[u8], position: u64, prev: &[u8; 32], prev_tick: Option<u64>) -> Option<(LogEntry, [u8; 32])> {
    let text = std::str::from_utf8(raw).ok()?;
    let value: Value = serde_json::from_str(text).ok()?;
    if canonical_json(&value) != text {
        return None;
    }
    let entry: LogEntry = serde_json::from_value(value).ok()?;
    if entry.index != position || decode_hash(&entry.prev_hash)? != *prev {
        return None;
    }
    if hex::encode(prev) != entry.prev_hash || prev_tick.is_some_and(|t| entry.tick <= t) {
        return None;
    }
    let h = entry_hash(prev, entry.kind, &entry.body, entry.index, &entry.timestamp, entry.tick);
    if hex::encode(h) != entry.entry_hash {
        return None;
    }
    Some((entry, h))
}

/// Recomputes the whole chain over raw log bytes.
pub fn verify_bytes(bytes: &[u8]) -> Verification {
    let mut prev = GENESIS;
    let mut prev_tick = None;
    let all = lines(bytes);
    for (i, raw) in all.iter().enumerate() {
        match check_line(raw, i as u64, &prev, prev_tick) {
            Some((entry, h)) => {
                prev = h;
                prev_tick = Some(entry.tick);
            }
            None => return Verification::FirstBadIndex(i as u64),
        }
    }
    Verification::Ok {
        entries: all.len() as u64,
        head: Head { entries: all.len() as u64, head_hash: hex::encode(prev) },
    }
}

pub fn verify_file(path: &Path) -> Result<Verification, AuditError> {
    let bytes = fs::read(path).map_err(|source| AuditError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    Ok(verify_bytes(&bytes))
}

/// Parses every well-formed line; stops at the first malformed one.
pub fn parse_entries(bytes: &[u8]) -> Vec<LogEntry> {
    let mut out = Vec::new();
    for raw in lines(bytes) {
        match std::str::from_utf8(raw).ok().and_then(|t| serde_json::from_str(t).ok()) {
            Some(e) => out.push(e),
            None => break,
        }
    }
    out
}

pub fn read_entries(path: &Path) -> Result<Vec<LogEntry>, AuditError> {
    let bytes = fs::read(path).map_err(|source| AuditError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_entries(&bytes))
}
