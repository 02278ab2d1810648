//! Uniform access to model backends.
//!
//! Every role in the pipeline (verifier, editor, retriever, oracle, judges and
//! reward models) talks to its backend through a [`Gateway`] bound to one
//! [`ProviderProfile`]. The gateway speaks a single JSON wire format over a
//! [`Transport`]; [`HttpTransport`] reaches a remote service and
//! [`ScriptedTransport`] replays a transcript so tests never touch the network.
//!
//! Wire format:
//!
//! ```text
//! generate  {"messages":[{"role","content"}], "prefix"?, "max_tokens", "temperature", "stop"}
//!           -> {"text", "finish_reason", "usage":{"prompt","completion"}}
//! embed     {"texts":[..]}                                  -> {"vectors":[[..]]}
//! entail    {"premise","hypothesis"}                        -> {"entail": p}
//! reward    {"criteria":[{"name","description"}],"subject","context"}
//!           -> {"scores":{name:int}, "total":int, "rationale"?}
//! ```

mod http;
mod scripted;

use std::cell::RefCell;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::HttpTransport;
pub use scripted::{hashing_embedding, overlap_entailment, Mode, ScriptEntry, ScriptedTransport, Transcript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Verifier,
    Editor,
    Retriever,
    Oracle,
    Judge,
    Reward,
    Embed,
    Nli,
    Orm,
    Prm,
}

impl Role {
    pub const ALL: [Role; 10] = [
        Role::Verifier,
        Role::Editor,
        Role::Retriever,
        Role::Oracle,
        Role::Judge,
        Role::Reward,
        Role::Embed,
        Role::Nli,
        Role::Orm,
        Role::Prm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Verifier => "verifier",
            Role::Editor => "editor",
            Role::Retriever => "retriever",
            Role::Oracle => "oracle",
            Role::Judge => "judge",
            Role::Reward => "reward",
            Role::Embed => "embed",
            Role::Nli => "nli",
            Role::Orm => "orm",
            Role::Prm => "prm",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Generate,
    Embed,
    Entail,
    Reward,
}

impl Operation {
    pub fn as_str(self) -> &'static str {
        match self {
            Operation::Generate => "generate",
            Operation::Embed => "embed",
            Operation::Entail => "entail",
            Operation::Reward => "reward",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Chat,
    RawContinuation,
    Embeddings,
    Entailment,
    Reward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Capabilities {
    pub chat: bool,
    pub raw_continuation: bool,
    pub embeddings: bool,
    pub entailment: bool,
    pub reward: bool,
}

impl Capabilities {
    pub fn all() -> Self {
        Self {
            chat: true,
            raw_continuation: true,
            embeddings: true,
            entailment: true,
            reward: true,
        }
    }

    pub fn has(&self, cap: Capability) -> bool {
        match cap {
            Capability::Chat => self.chat,
            Capability::RawContinuation => self.raw_continuation,
            Capability::Embeddings => self.embeddings,
            Capability::Entailment => self.entailment,
            Capability::Reward => self.reward,
        }
    }

    pub fn any(&self) -> bool {
        self.chat || self.raw_continuation || self.embeddings || self.entailment || self.reward
    }
}

fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderProfile {
    pub name: String,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    pub capabilities: Capabilities,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl ProviderProfile {
    pub fn new(name: impl Into<String>, capabilities: Capabilities) -> Self {
        Self {
            name: name.into(),
            endpoint: String::new(),
            model: String::new(),
            capabilities,
            max_in_flight: default_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.capabilities.any() {
            return Err(GatewayError::Precondition(format!(
                "profile {} declares no capability",
                self.name
            )));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Precondition(format!(
                "profile {} allows zero in-flight requests",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub messages: Vec<Message>,
    /// Raw text the assistant turn starts with; the backend continues it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
}

impl GenerationRequest {
    pub fn chat(messages: Vec<Message>, max_tokens: u32, temperature: f64) -> Self {
        Self {
            messages,
            prefix: None,
            max_tokens,
            temperature,
            stop: Vec::new(),
        }
    }

    pub fn is_prefix_mode(&self) -> bool {
        self.prefix.is_some()
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() && self.prefix.is_none() {
            return Err(GatewayError::Precondition(
                "generation request needs messages or a prefix".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::Precondition(
                "temperature must be non-negative".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::Precondition("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt: u64,
    #[serde(default)]
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    #[serde(default)]
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(default)]
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub description: String,
}

impl Criterion {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
        }
    }
}

/// Per-criterion integer rewards in criterion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardScores {
    pub scores: Vec<(String, u8)>,
    pub total: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying: connection resets, timeouts, 5xx.
    #[error("transient transport failure: {0}")]
    Transient(String),
    #[error("transport failure: {0}")]
    Fatal(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("profile {profile} does not support {capability:?}")]
    Unsupported {
        profile: String,
        capability: Capability,
    },
    #[error("{0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("unparseable reward score: {0}")]
    UnparseableScore(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

/// Something that can carry one wire-format request to a backend.
pub trait Transport: Send + Sync {
    fn call(
        &self,
        profile: &ProviderProfile,
        op: Operation,
        payload: &Value,
    ) -> Result<Value, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Wait before each retry; its length is the number of retries.
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            backoff: vec![
                Duration::from_millis(500),
                Duration::from_secs(2),
                Duration::from_secs(8),
            ],
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { backoff: Vec::new() }
    }

    /// Same retry count as the default, without sleeping. For tests.
    pub fn immediate() -> Self {
        Self {
            backoff: vec![Duration::ZERO; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallOutcome {
    Ok,
    Error(String),
}

/// One logged backend call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: Role,
    pub profile: String,
    pub op: Operation,
    pub request_hash: String,
    pub latency_ms: u64,
    pub attempts: u32,
    pub outcome: CallOutcome,
    pub request: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Value>,
}

impl CallRecord {
    /// All text carried by the request, for leakage checks.
    pub fn request_text(&self) -> String {
        let mut out = String::new();
        collect_strings(&self.request, &mut out);
        out
    }
}

fn collect_strings(value: &Value, out: &mut String) {
    match value {
        Value::String(s) => {
            out.push_str(s);
            out.push('\n');
        }
        Value::Array(items) => items.iter().for_each(|v| collect_strings(v, out)),
        Value::Object(map) => map.values().for_each(|v| collect_strings(v, out)),
        _ => {}
    }
}

pub fn request_hash(payload: &Value) -> String {
    let digest = Sha256::digest(payload.to_string().as_bytes());
    hex::encode(&digest[..8])
}

/// Shared, append-only list of calls.
#[derive(Debug, Clone, Default)]
pub struct CallLog {
    inner: Arc<Mutex<Vec<CallRecord>>>,
}

impl CallLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, record: CallRecord) {
        self.inner.lock().expect("call log poisoned").push(record);
    }

    pub fn snapshot(&self) -> Vec<CallRecord> {
        self.inner.lock().expect("call log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("call log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, role: Role) -> usize {
        self.inner
            .lock()
            .expect("call log poisoned")
            .iter()
            .filter(|r| r.role == role)
            .count()
    }

    pub fn clear(&self) {
        self.inner.lock().expect("call log poisoned").clear();
    }
}

thread_local! {
    static CAPTURE: RefCell<Vec<Vec<CallRecord>>> = const { RefCell::new(Vec::new()) };
}

/// Run `f`, returning every gateway call made on this thread while it ran.
pub fn capture_calls<T>(f: impl FnOnce() -> T) -> (T, Vec<CallRecord>) {
    CAPTURE.with(|c| c.borrow_mut().push(Vec::new()));
    let out = f();
    let calls = CAPTURE.with(|c| c.borrow_mut().pop().unwrap_or_default());
    (out, calls)
}

fn capture(record: &CallRecord) {
    CAPTURE.with(|c| {
        for frame in c.borrow_mut().iter_mut() {
            frame.push(record.clone());
        }
    });
}

/// Bounds concurrent requests per profile.
#[derive(Debug)]
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

/// A role bound to a backend profile.
#[derive(Clone)]
pub struct Gateway {
    role: Role,
    profile: ProviderProfile,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    limiter: Arc<Limiter>,
    log: CallLog,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("role", &self.role)
            .field("profile", &self.profile.name)
            .finish()
    }
}

impl Gateway {
    pub fn new(role: Role, profile: ProviderProfile, transport: Arc<dyn Transport>) -> Self {
        let limiter = Arc::new(Limiter::new(profile.max_in_flight));
        Self {
            role,
            profile,
            transport,
            retry: RetryPolicy::default(),
            limiter,
            log: CallLog::new(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_log(mut self, log: CallLog) -> Self {
        self.log = log;
        self
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn profile(&self) -> &ProviderProfile {
        &self.profile
    }

    pub fn log(&self) -> &CallLog {
        &self.log
    }

    fn require(&self, cap: Capability) -> Result<(), GatewayError> {
        if self.profile.capabilities.has(cap) {
            Ok(())
        } else {
            Err(GatewayError::Unsupported {
                profile: self.profile.name.clone(),
                capability: cap,
            })
        }
    }

    fn call(&self, op: Operation, payload: Value) -> Result<Value, GatewayError> {
        let _slot = self.limiter.acquire();
        let started = Instant::now();
        let mut attempts = 0u32;
        let result = loop {
            attempts += 1;
            match self.transport.call(&self.profile, op, &payload) {
                Ok(v) => break Ok(v),
                Err(TransportError::Transient(msg)) => {
                    match self.retry.backoff.get(attempts as usize - 1) {
                        Some(wait) => {
                            tracing::warn!(role = %self.role, attempt = attempts, "retrying after transient failure: {msg}");
                            std::thread::sleep(*wait);
                        }
                        None => {
                            break Err(GatewayError::Transport(format!(
                                "{msg} (after {attempts} attempts)"
                            )))
                        }
                    }
                }
                Err(TransportError::Fatal(msg)) => break Err(GatewayError::Transport(msg)),
            }
        };
        let record = CallRecord {
            role: self.role,
            profile: self.profile.name.clone(),
            op,
            request_hash: request_hash(&payload),
            latency_ms: started.elapsed().as_millis() as u64,
            attempts,
            outcome: match &result {
                Ok(_) => CallOutcome::Ok,
                Err(e) => CallOutcome::Error(e.to_string()),
            },
            response: result.as_ref().ok().cloned(),
            request: payload,
        };
        capture(&record);
        self.log.push(record);
        result
    }

    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        request.validate()?;
        if request.is_prefix_mode() {
            self.require(Capability::RawContinuation)?;
        } else {
            self.require(Capability::Chat)?;
        }
        let payload = serde_json::to_value(request)
            .map_err(|e| GatewayError::Precondition(e.to_string()))?;
        let raw = self.call(Operation::Generate, payload)?;
        let mut result: GenerationResult = serde_json::from_value(raw)
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        if result.finish_reason == FinishReason::Error {
            return Err(GatewayError::Transport(format!(
                "backend reported an error: {}",
                result.text
            )));
        }
        if let Some(prefix) = &request.prefix {
            // Some backends echo the prompt; hand back only the continuation.
            if !prefix.is_empty() && result.text.starts_with(prefix.as_str()) {
                result.text = result.text[prefix.len()..].to_string();
            }
        }
        Ok(result)
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::Precondition("nothing to embed".into()));
        }
        self.require(Capability::Embeddings)?;
        let raw = self.call(Operation::Embed, json!({ "texts": texts }))?;
        let vectors: Vec<Vec<f64>> = raw
            .get("vectors")
            .cloned()
            .ok_or_else(|| GatewayError::MalformedResponse("missing \"vectors\"".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| GatewayError::MalformedResponse(e.to_string()))
            })?;
        if vectors.len() != texts.len() {
            return Err(GatewayError::MalformedResponse(format!(
                "{} vectors for {} texts",
                vectors.len(),
                texts.len()
            )));
        }
        vectors.into_iter().map(normalize).collect()
    }

    pub fn entail(&self, premise: &str, hypothesis: &str) -> Result<f64, GatewayError> {
        if premise.trim().is_empty() || hypothesis.trim().is_empty() {
            return Err(GatewayError::Precondition(
                "entailment needs a non-empty premise and hypothesis".into(),
            ));
        }
        self.require(Capability::Entailment)?;
        let raw = self.call(
            Operation::Entail,
            json!({ "premise": premise, "hypothesis": hypothesis }),
        )?;
        let p = raw
            .get("entail")
            .and_then(Value::as_f64)
            .ok_or_else(|| GatewayError::MalformedResponse("missing \"entail\"".into()))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(GatewayError::MalformedResponse(format!(
                "entailment probability {p} outside [0,1]"
            )));
        }
        Ok(p)
    }

    pub fn score_reward(
        &self,
        criteria: &[Criterion],
        subject: &str,
        context: &str,
    ) -> Result<RewardScores, GatewayError> {
        if criteria.is_empty() {
            return Err(GatewayError::Precondition(
                "reward scoring needs at least one criterion".into(),
            ));
        }
        self.require(Capability::Reward)?;
        let raw = self.call(
            Operation::Reward,
            json!({ "criteria": criteria, "subject": subject, "context": context }),
        )?;
        parse_reward(criteria, &raw)
    }
}

fn normalize(v: Vec<f64>) -> Result<Vec<f64>, GatewayError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(GatewayError::MalformedResponse(
            "embedding vector has zero or non-finite norm".into(),
        ));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

fn parse_reward(criteria: &[Criterion], raw: &Value) -> Result<RewardScores, GatewayError> {
    let scores = raw
        .get("scores")
        .and_then(Value::as_object)
        .ok_or_else(|| GatewayError::UnparseableScore("missing \"scores\" object".into()))?;
    let mut out = Vec::with_capacity(criteria.len());
    for c in criteria {
        let value = scores
            .get(&c.name)
            .ok_or_else(|| GatewayError::UnparseableScore(format!("no score for {:?}", c.name)))?;
        let n = value
            .as_i64()
            .or_else(|| value.as_str().and_then(|s| s.trim().parse().ok()))
            .ok_or_else(|| {
                GatewayError::UnparseableScore(format!("score for {:?} is {value}", c.name))
            })?;
        if !(1..=10).contains(&n) {
            return Err(GatewayError::UnparseableScore(format!(
                "score {n} for {:?} outside 1..=10",
                c.name
            )));
        }
        out.push((c.name.clone(), n as u8));
    }
    let total: u32 = out.iter().map(|(_, s)| u32::from(*s)).sum();
    if let Some(reported) = raw.get("total") {
        if reported.as_u64() != Some(u64::from(total)) {
            return Err(GatewayError::UnparseableScore(format!(
                "reported total {reported} differs from the criterion sum {total}"
            )));
        }
    }
    Ok(RewardScores {
        scores: out,
        total,
        rationale: raw
            .get("rationale")
            .and_then(Value::as_str)
            .map(str::to_string),
    })
}
