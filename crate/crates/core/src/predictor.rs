//! Client, registry and reference stub for external black-box predictors.
//!
//! Transport: a TCP connection carrying one compact JSON object per line in
//! each direction. See `docs/predictor-protocol.md` for the full schema.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::digest::{canonical_json, sha256_hex};
use crate::explain::grid::{GridMask, MaskedImagePredictor, RegionBrightness};
use crate::explain::PredictorFailure;

pub const PROTOCOL_VERSION: u64 = 1;
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Score,
    ScoreMasked,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorDescriptor {
    pub endpoint: String,
    pub model_hash: String,
    pub classes: Vec<String>,
    pub embedding_dim: usize,
    pub capabilities: Vec<Capability>,
}

impl PredictorDescriptor {
    pub fn validate(&self) -> Result<(), String> {
        if self.classes.is_empty() {
            return Err("class vocabulary is empty".into());
        }
        if self.capabilities.contains(&Capability::Embed) && self.embedding_dim == 0 {
            return Err("embed capability declared with embedding_dim 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("timed out talking to {endpoint}")]
    Timeout { endpoint: String },
    #[error("cannot connect to {endpoint}: {message}")]
    Connect { endpoint: String, message: String },
    #[error("protocol error from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String, raw: String },
    #[error("{endpoint} reported an error: {message}")]
    Remote { endpoint: String, message: String },
    #[error("{endpoint} does not declare capability {capability:?}")]
    MissingCapability { endpoint: String, capability: Capability },
}

/// Blocking client with a small connection pool.
pub struct RemotePredictor {
    endpoint: String,
    addr: SocketAddr,
    timeout: Duration,
    pool: Mutex<Vec<BufReader<TcpStream>>>,
    descriptor: PredictorDescriptor,
    replies: Mutex<BTreeMap<String, String>>,
}

const POOL_SIZE: usize = 8;

fn io_error(endpoint: &str, e: std::io::Error) -> PredictorError {
    match e.kind() {
        ErrorKind::TimedOut | ErrorKind::WouldBlock => PredictorError::Timeout { endpoint: endpoint.to_string() },
        _ => PredictorError::Connect { endpoint: endpoint.to_string(), message: e.to_string() },
    }
}

fn resolve(endpoint: &str) -> Result<SocketAddr, PredictorError> {
    endpoint
        .to_socket_addrs()
        .map_err(|e| io_error(endpoint, e))?
        .next()
        .ok_or_else(|| PredictorError::Connect { endpoint: endpoint.into(), message: "address did not resolve".into() })
}

fn connect(endpoint: &str, addr: &SocketAddr, timeout: Duration) -> Result<BufReader<TcpStream>, PredictorError> {
    let stream = TcpStream::connect_timeout(addr, timeout).map_err(|e| io_error(endpoint, e))?;
    stream.set_read_timeout(Some(timeout)).map_err(|e| io_error(endpoint, e))?;
    stream.set_write_timeout(Some(timeout)).map_err(|e| io_error(endpoint, e))?;
    stream.set_nodelay(true).ok();
    Ok(BufReader::new(stream))
}

fn exchange(conn: &mut BufReader<TcpStream>, endpoint: &str, request: &Value) -> Result<(Value, String), PredictorError> {
    let mut line = canonical_json(request);
    line.push('\n');
    conn.get_mut().write_all(line.as_bytes()).map_err(|e| io_error(endpoint, e))?;
    let mut raw = String::new();
    let n = conn.read_line(&mut raw).map_err(|e| io_error(endpoint, e))?;
    if n == 0 {
        return Err(PredictorError::Connect { endpoint: endpoint.into(), message: "connection closed".into() });
    }
    let raw = raw.trim_end_matches(['\r', '\n']).to_string();
    let value: Value = serde_json::from_str(&raw).map_err(|e| PredictorError::Protocol {
        endpoint: endpoint.into(),
        message: format!("reply is not JSON: {e}"),
        raw: raw.clone(),
    })?;
    Ok((value, raw))
}

fn protocol(endpoint: &str, message: impl Into<String>, raw: &str) -> PredictorError {
    PredictorError::Protocol { endpoint: endpoint.into(), message: message.into(), raw: raw.into() }
}

fn check_reply(endpoint: &str, reply: &Value, raw: &str) -> Result<(), PredictorError> {
    if reply.get("v").and_then(Value::as_u64) != Some(PROTOCOL_VERSION) {
        return Err(protocol(endpoint, "missing or unsupported protocol version", raw));
    }
    match reply.get("ok").and_then(Value::as_bool) {
        Some(true) => Ok(()),
        Some(false) => Err(PredictorError::Remote {
            endpoint: endpoint.into(),
            message: reply.get("error").and_then(Value::as_str).unwrap_or("unspecified").into(),
        }),
        None => Err(protocol(endpoint, "reply lacks `ok`", raw)),
    }
}

fn float_array(endpoint: &str, reply: &Value, key: &str, raw: &str) -> Result<Vec<f64>, PredictorError> {
    reply
        .get(key)
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
        .ok_or_else(|| protocol(endpoint, format!("reply lacks numeric array `{key}`"), raw))
}

/// Checks a probability vector from a remote.
pub fn check_distribution(endpoint: &str, probs: &[f64], n_classes: usize, raw: &str) -> Result<(), PredictorError> {
    if probs.len() != n_classes {
        return Err(protocol(endpoint, format!("expected {n_classes} probabilities, got {}", probs.len()), raw));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(protocol(endpoint, "probability outside [0, 1]", raw));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(protocol(endpoint, format!("probabilities sum to {sum}"), raw));
    }
    Ok(())
}

impl RemotePredictor {
    /// Connects and performs the handshake.
    pub fn handshake(endpoint: &str, timeout: Duration) -> Result<RemotePredictor, PredictorError> {
        let addr = resolve(endpoint)?;
        let mut conn = connect(endpoint, &addr, timeout)?;
        let (reply, raw) = exchange(&mut conn, endpoint, &json!({"v": PROTOCOL_VERSION, "kind": "handshake"}))?;
        check_reply(endpoint, &reply, &raw)?;
        let mut descriptor: PredictorDescriptor = serde_json::from_value(json!({
            "endpoint": endpoint,
            "model_hash": reply.get("model_hash"),
            "classes": reply.get("classes"),
            "embedding_dim": reply.get("embedding_dim").cloned().unwrap_or(json!(0)),
            "capabilities": reply.get("capabilities"),
        }))
        .map_err(|e| protocol(endpoint, format!("malformed handshake: {e}"), &raw))?;
        descriptor.endpoint = endpoint.to_string();
        descriptor.validate().map_err(|m| protocol(endpoint, m, &raw))?;
        Ok(RemotePredictor {
            endpoint: endpoint.to_string(),
            addr,
            timeout,
            pool: Mutex::new(vec![conn]),
            descriptor,
            replies: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn descriptor(&self) -> &PredictorDescriptor {
        &self.descriptor
    }

    fn call(&self, request: Value, key: String) -> Result<(Value, String), PredictorError> {
        let pooled = self.pool.lock().expect("pool lock").pop();
        let mut conn = match pooled {
            Some(c) => c,
            None => connect(&self.endpoint, &self.addr, self.timeout)?,
        };
        let (reply, raw) = exchange(&mut conn, &self.endpoint, &request)?;
        {
            let mut pool = self.pool.lock().expect("pool lock");
            if pool.len() < POOL_SIZE {
                pool.push(conn);
            }
        }
        self.replies.lock().expect("replies lock").insert(key, sha256_hex(raw.as_bytes()));
        check_reply(&self.endpoint, &reply, &raw)?;
        Ok((reply, raw))
    }

    fn require(&self, capability: Capability) -> Result<(), PredictorError> {
        if self.descriptor.capabilities.contains(&capability) {
            Ok(())
        } else {
            Err(PredictorError::MissingCapability { endpoint: self.endpoint.clone(), capability })
        }
    }

    pub fn score(&self, payload: &Value) -> Result<Vec<f64>, PredictorError> {
        self.require(Capability::Score)?;
        let (reply, raw) = self.call(json!({"v": PROTOCOL_VERSION, "kind": "score", "payload": payload}), "score".into())?;
        let p = float_array(&self.endpoint, &reply, "probabilities", &raw)?;
        check_distribution(&self.endpoint, &p, self.descriptor.classes.len(), &raw)?;
        Ok(p)
    }

    pub fn score_masked(&self, payload: &Value, mask: &GridMask) -> Result<Vec<f64>, PredictorError> {
        self.require(Capability::ScoreMasked)?;
        let key = format!("score_masked/{:010}", mask.index);
        let (reply, raw) = self.call(json!({"v": PROTOCOL_VERSION, "kind": "score_masked", "payload": payload, "mask": mask}), key)?;
        let p = float_array(&self.endpoint, &reply, "probabilities", &raw)?;
        check_distribution(&self.endpoint, &p, self.descriptor.classes.len(), &raw)?;
        Ok(p)
    }

    pub fn embed(&self, payload: &Value) -> Result<Vec<f64>, PredictorError> {
        self.require(Capability::Embed)?;
        let (reply, raw) = self.call(json!({"v": PROTOCOL_VERSION, "kind": "embed", "payload": payload}), "embed".into())?;
        let e = float_array(&self.endpoint, &reply, "embedding", &raw)?;
        if e.len() != self.descriptor.embedding_dim {
            return Err(protocol(&self.endpoint, format!("expected {} embedding values, got {}", self.descriptor.embedding_dim, e.len()), &raw));
        }
        Ok(e)
    }

    /// Digest over every reply recorded since the last call, in request-key
    /// order, then clears the record.
    pub fn take_replies_digest(&self) -> String {
        let replies = std::mem::take(&mut *self.replies.lock().expect("replies lock"));
        let mut text = String::new();
        for (k, d) in replies {
            text.push_str(&k);
            text.push('=');
            text.push_str(&d);
            text.push('\n');
        }
        sha256_hex(text.as_bytes())
    }
}

impl MaskedImagePredictor for RemotePredictor {
    fn endpoint(&self) -> String {
        self.endpoint.clone()
    }

    fn predictor_hash(&self) -> String {
        self.descriptor.model_hash.clone()
    }

    fn score(&self, payload: &Value) -> Result<Vec<f64>, PredictorFailure> {
        RemotePredictor::score(self, payload).map_err(to_failure)
    }

    fn score_masked(&self, payload: &Value, mask: &GridMask) -> Result<Vec<f64>, PredictorFailure> {
        RemotePredictor::score_masked(self, payload, mask).map_err(to_failure)
    }
}

fn to_failure(e: PredictorError) -> PredictorFailure {
    match e {
        PredictorError::Timeout { .. } => PredictorFailure::Timeout,
        other => PredictorFailure::Other(other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryRecord {
    pub model_hash: String,
    pub blocked: bool,
    /// Hash seen before the change that caused the block.
    pub previous_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Registration {
    /// First time this endpoint was seen.
    New,
    Unchanged,
    /// The model hash changed; the endpoint is blocked until acknowledged.
    HashChanged { previous: String },
}

/// Known endpoints and whether they may serve sessions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorRegistry {
    pub endpoints: BTreeMap<String, RegistryRecord>,
}

impl PredictorRegistry {
    pub fn register(&mut self, d: &PredictorDescriptor) -> Registration {
        match self.endpoints.get_mut(&d.endpoint) {
            None => {
                self.endpoints.insert(
                    d.endpoint.clone(),
                    RegistryRecord { model_hash: d.model_hash.clone(), blocked: false, previous_hash: None },
                );
                Registration::New
            }
            Some(r) if r.model_hash == d.model_hash => Registration::Unchanged,
            Some(r) => {
                let previous = std::mem::replace(&mut r.model_hash, d.model_hash.clone());
                r.blocked = true;
                r.previous_hash = Some(previous.clone());
                Registration::HashChanged { previous }
            }
        }
    }

    pub fn is_blocked(&self, endpoint: &str) -> bool {
        self.endpoints.get(endpoint).is_some_and(|r| r.blocked)
    }

    /// Operator acknowledgment of a hash change. Returns false if nothing was blocked.
    pub fn acknowledge(&mut self, endpoint: &str) -> bool {
        match self.endpoints.get_mut(endpoint) {
            Some(r) if r.blocked => {
                r.blocked = false;
                true
            }
            _ => false,
        }
    }
}

/// Behaviour of the reference stub.
#[derive(Debug, Clone, PartialEq)]
pub enum StubBehavior {
    /// Uniform distribution over `classes` for any payload.
    Constant { classes: usize },
    /// Brightness of a `region` payload, as [`RegionBrightness`].
    Brightness,
    /// Replies whose probabilities sum to 0.8.
    Faulty,
    /// Never replies.
    Silent,
}

#[derive(Debug, Clone)]
pub struct StubConfig {
    pub behavior: StubBehavior,
    pub model_hash: String,
    pub embedding_dim: usize,
}

impl StubConfig {
    pub fn new(behavior: StubBehavior) -> Self {
        StubConfig { behavior, model_hash: sha256_hex(b"stub-model-v1"), embedding_dim: 14 }
    }

    fn classes(&self) -> Vec<String> {
        let n = match self.behavior {
            StubBehavior::Constant { classes } => classes,
            _ => 2,
        };
        (0..n).map(|i| format!("class_{i}")).collect()
    }

    /// Handles one request line.
    pub fn respond(&self, request: &Value) -> Value {
        let ok = |mut v: Value| {
            v["v"] = json!(PROTOCOL_VERSION);
            v["ok"] = json!(true);
            v
        };
        let err = |m: &str| json!({"v": PROTOCOL_VERSION, "ok": false, "error": m});
        let classes = self.classes();
        match request.get("kind").and_then(Value::as_str) {
            Some("handshake") => ok(json!({
                "model_hash": self.model_hash,
                "classes": classes,
                "embedding_dim": self.embedding_dim,
                "capabilities": ["score", "score_masked", "embed"],
            })),
            Some(kind @ ("score" | "score_masked")) => {
                let payload = &request["payload"];
                let mask = if kind == "score_masked" {
                    match serde_json::from_value::<GridMask>(request["mask"].clone()) {
                        Ok(m) => Some(m),
                        Err(_) => return err("malformed mask"),
                    }
                } else {
                    None
                };
                match &self.behavior {
                    StubBehavior::Constant { classes } => ok(json!({"probabilities": vec![1.0 / *classes as f64; *classes]})),
                    StubBehavior::Faulty => ok(json!({"probabilities": [0.5, 0.3]})),
                    StubBehavior::Brightness | StubBehavior::Silent => match RegionBrightness::evaluate(payload, mask.as_ref()) {
                        Ok(p) => ok(json!({"probabilities": p})),
                        Err(e) => err(&e.to_string()),
                    },
                }
            }
            Some("embed") => {
                let seed = sha256_hex(canonical_json(&request["payload"]).as_bytes());
                let bytes = hex::decode(seed).expect("hex digest");
                let e: Vec<f64> = (0..self.embedding_dim).map(|i| f64::from(bytes[i % 32]) / 255.0).collect();
                ok(json!({"embedding": e}))
            }
            _ => err("unknown request kind"),
        }
    }
}

/// A stub predictor listening on a local port until the process exits.
pub struct StubServer {
    pub addr: SocketAddr,
}

impl StubServer {
    pub fn spawn(config: StubConfig) -> std::io::Result<StubServer> {
        Self::spawn_on("127.0.0.1:0", config)
    }

    pub fn spawn_on(bind: &str, config: StubConfig) -> std::io::Result<StubServer> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let cfg = config.clone();
                thread::spawn(move || serve_connection(stream, &cfg));
            }
        });
        Ok(StubServer { addr })
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }
}

/// Serves requests on one connection until it closes.
pub fn serve_connection(stream: TcpStream, config: &StubConfig) {
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let Ok(line) = line else { return };
        let request: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => json!({}),
        };
        if config.behavior == StubBehavior::Silent && request.get("kind").and_then(Value::as_str) != Some("handshake") {
            continue;
        }
        let mut out = canonical_json(&config.respond(&request));
        out.push('\n');
        if writer.write_all(out.as_bytes()).is_err() {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::grid::{mask_importance_grid, GridConfig};
    use crate::par::Execution;

    const T: Duration = Duration::from_secs(5);

    #[test]
    fn handshake_reports_dimension() {
        let stub = StubServer::spawn(StubConfig::new(StubBehavior::Constant { classes: 2 })).unwrap();
        let p = RemotePredictor::handshake(&stub.endpoint(), T).unwrap();
        assert_eq!(p.descriptor().embedding_dim, 14);
        assert_eq!(p.score(&json!({"any": 1})).unwrap(), vec![0.5, 0.5]);
        assert_eq!(p.embed(&json!({"any": 1})).unwrap().len(), 14);
    }

    #[test]
    fn faulty_sum_is_a_protocol_error_with_raw() {
        let stub = StubServer::spawn(StubConfig::new(StubBehavior::Faulty)).unwrap();
        let p = RemotePredictor::handshake(&stub.endpoint(), T).unwrap();
        match p.score(&json!({})) {
            Err(PredictorError::Protocol { raw, .. }) => assert!(raw.contains("0.3")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreachable_endpoint_fails() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        assert!(RemotePredictor::handshake(&addr.to_string(), Duration::from_millis(200)).is_err());
    }

    #[test]
    fn silent_remote_times_out_naming_endpoint() {
        let stub = StubServer::spawn(StubConfig::new(StubBehavior::Silent)).unwrap();
        let p = RemotePredictor::handshake(&stub.endpoint(), Duration::from_millis(150)).unwrap();
        let payload = RegionBrightness::payload(14, 14, [0, 0, 7, 7]);
        let err = mask_importance_grid(&p, &payload, &GridConfig { n_masks: 4, ..GridConfig::default() }, 0, Execution::Sequential);
        assert!(err.unwrap_err().to_string().contains(&stub.endpoint()));
    }

    #[test]
    fn masking_the_region_lowers_the_score() {
        let stub = StubServer::spawn(StubConfig::new(StubBehavior::Brightness)).unwrap();
        let p = RemotePredictor::handshake(&stub.endpoint(), T).unwrap();
        let payload = RegionBrightness::payload(28, 28, [0, 0, 8, 8]);
        let full = p.score(&payload).unwrap()[0];
        let mut m = GridMask::generate(0, 0, 2, 2, 0.5);
        m.cells = vec![0, 1, 1, 1];
        m.shift_x = 0.0;
        m.shift_y = 0.0;
        assert!(p.score_masked(&payload, &m).unwrap()[0] < full);
    }

    #[test]
    fn remote_grid_saliency_matches_in_process() {
        let stub = StubServer::spawn(StubConfig::new(StubBehavior::Brightness)).unwrap();
        let p = RemotePredictor::handshake(&stub.endpoint(), T).unwrap();
        let payload = RegionBrightness::payload(28, 28, [0, 0, 8, 8]);
        let cfg = GridConfig { n_masks: 50, ..GridConfig::default() };
        let remote = mask_importance_grid(&p, &payload, &cfg, 3, Execution::Parallel).unwrap();
        let local = mask_importance_grid(&RegionBrightness, &payload, &cfg, 3, Execution::Sequential).unwrap();
        assert_eq!(remote.scores, local.scores);
        let d1 = p.take_replies_digest();
        mask_importance_grid(&p, &payload, &cfg, 3, Execution::Parallel).unwrap();
        assert_eq!(p.take_replies_digest(), d1);
    }

    #[test]
    fn hash_change_blocks_until_acknowledged() {
        let mut reg = PredictorRegistry::default();
        let mut d = PredictorDescriptor {
            endpoint: "e".into(),
            model_hash: "a".into(),
            classes: vec!["x".into()],
            embedding_dim: 0,
            capabilities: vec![Capability::Score],
        };
        assert_eq!(reg.register(&d), Registration::New);
        assert_eq!(reg.register(&d), Registration::Unchanged);
        d.model_hash = "b".into();
        assert_eq!(reg.register(&d), Registration::HashChanged { previous: "a".into() });
        assert!(reg.is_blocked("e"));
        assert!(reg.acknowledge("e"));
        assert!(!reg.is_blocked("e"));
    }
}
