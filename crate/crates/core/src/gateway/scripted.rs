//! Deterministic transcript-driven backend.
//!
//! A transcript is a JSON document:
//!
//! ```json
//! {
//!   "entries": [
//!     {"op": "generate", "profile": "verifier", "contains": ["Claim: ..."], "excludes": [],
//!      "mode": "chat", "responses": ["<think>..</think>\nVERDICT: ..", {"text": "..", "finish_reason": "length"}]}
//!   ],
//!   "default_reward": 7,
//!   "vectors": {"cat": [1, 0, 0]},
//!   "entail": [{"premise": "..", "hypothesis": "..", "p": 0.4}],
//!   "embedding_dim": 256
//! }
//! ```
//!
//! The request key is the concatenated text of the request. The first entry
//! whose `contains` strings all occur in the key (and none of `excludes`) answers
//! it. An entry steps through its `responses` on every sampled call and repeats
//! the last one when exhausted; greedy calls (temperature 0) always get the
//! entry's current response without advancing. A response of
//! `{"error": "transient"}` or `{"error": "fatal"}` simulates a transport failure.
//!
//! Embedding and entailment requests without a scripted answer fall back to a
//! hashing bag-of-words embedder and a token-overlap entailment rule.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{Operation, ProviderProfile, Transport, TransportError};
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Chat,
    Prefix,
}

fn default_op() -> Operation {
    Operation::Generate
}

#[derive(Debug, Clone, Deserialize)]
pub struct ScriptEntry {
    #[serde(default = "default_op")]
    pub op: Operation,
    #[serde(default)]
    pub profile: Option<String>,
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default)]
    pub excludes: Vec<String>,
    #[serde(default)]
    pub mode: Option<Mode>,
    pub responses: Vec<Value>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct EntailRule {
    pub premise: String,
    pub hypothesis: String,
    pub p: f64,
}

fn default_dim() -> usize {
    256
}

#[derive(Debug, Clone, Deserialize)]
pub struct Transcript {
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
    #[serde(default)]
    pub default_reward: Option<u8>,
    #[serde(default)]
    pub vectors: HashMap<String, Vec<f64>>,
    #[serde(default)]
    pub entail: Vec<EntailRule>,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

impl Default for Transcript {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            default_reward: None,
            vectors: HashMap::new(),
            entail: Vec::new(),
            embedding_dim: default_dim(),
        }
    }
}

#[derive(Debug)]
pub struct ScriptedTransport {
    transcript: Transcript,
    cursors: Vec<AtomicUsize>,
    requests: Mutex<Vec<(String, Operation, Value)>>,
}

impl Default for ScriptedTransport {
    fn default() -> Self {
        Self::from_transcript(Transcript::default())
    }
}

impl ScriptedTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_transcript(transcript: Transcript) -> Self {
        let cursors = transcript.entries.iter().map(|_| AtomicUsize::new(0)).collect();
        Self {
            transcript,
            cursors,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn from_json(value: Value) -> Result<Self, serde_json::Error> {
        Ok(Self::from_transcript(serde_json::from_value(value)?))
    }

    pub fn from_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let transcript: Transcript = serde_json::from_str(&raw)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self::from_transcript(transcript))
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// Fresh transport with the same script and rewound cursors.
    pub fn rewound(&self) -> Self {
        Self::from_transcript(self.transcript.clone())
    }

    fn push_entry(mut self, entry: ScriptEntry) -> Self {
        self.transcript.entries.push(entry);
        self.cursors.push(AtomicUsize::new(0));
        self
    }

    pub fn on_generate<I, S>(self, contains: &[&str], responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.push_entry(ScriptEntry {
            op: Operation::Generate,
            profile: None,
            contains: contains.iter().map(|s| s.to_string()).collect(),
            excludes: Vec::new(),
            mode: None,
            responses: responses.into_iter().map(|s| Value::String(s.into())).collect(),
        })
    }

    /// Generic entry builder for any operation.
    pub fn on(self, op: Operation, contains: &[&str], responses: Vec<Value>) -> Self {
        self.push_entry(ScriptEntry {
            op,
            profile: None,
            contains: contains.iter().map(|s| s.to_string()).collect(),
            excludes: Vec::new(),
            mode: None,
            responses,
        })
    }

    pub fn with_entry(self, entry: ScriptEntry) -> Self {
        self.push_entry(entry)
    }

    pub fn with_default_reward(mut self, score: u8) -> Self {
        self.transcript.default_reward = Some(score);
        self
    }

    pub fn with_vector(mut self, text: &str, vector: Vec<f64>) -> Self {
        self.transcript.vectors.insert(text.to_string(), vector);
        self
    }

    pub fn with_entailment(mut self, premise: &str, hypothesis: &str, p: f64) -> Self {
        self.transcript.entail.push(EntailRule {
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
            p,
        });
        self
    }

    /// Every request seen so far as (profile, op, payload).
    pub fn requests(&self) -> Vec<(String, Operation, Value)> {
        self.requests.lock().expect("request log poisoned").clone()
    }

    pub fn request_count(&self, op: Operation) -> usize {
        self.requests
            .lock()
            .expect("request log poisoned")
            .iter()
            .filter(|(_, o, _)| *o == op)
            .count()
    }

    fn find(&self, profile: &str, op: Operation, key: &str, mode: Option<Mode>) -> Option<usize> {
        self.transcript.entries.iter().position(|e| {
            e.op == op
                && e.profile.as_deref().is_none_or(|p| p == profile)
                && (e.mode.is_none() || e.mode == mode)
                && e.contains.iter().all(|c| key.contains(c.as_str()))
                && !e.excludes.iter().any(|c| key.contains(c.as_str()))
        })
    }

    fn respond(&self, idx: usize, greedy: bool) -> Result<Value, TransportError> {
        let entry = &self.transcript.entries[idx];
        if entry.responses.is_empty() {
            return Err(TransportError::Fatal("scripted entry has no responses".into()));
        }
        let cursor = if greedy {
            self.cursors[idx].load(Ordering::SeqCst)
        } else {
            self.cursors[idx].fetch_add(1, Ordering::SeqCst)
        };
        let value = entry.responses[cursor.min(entry.responses.len() - 1)].clone();
        match value.get("error").and_then(Value::as_str) {
            Some("transient") => Err(TransportError::Transient("scripted transient failure".into())),
            Some(other) => Err(TransportError::Fatal(format!("scripted failure: {other}"))),
            None => Ok(value),
        }
    }
}

fn generate_key(payload: &Value) -> (String, Option<Mode>) {
    let mut key = String::new();
    if let Some(messages) = payload.get("messages").and_then(Value::as_array) {
        for m in messages {
            if let Some(c) = m.get("content").and_then(Value::as_str) {
                key.push_str(c);
                key.push('\n');
            }
        }
    }
    let mode = match payload.get("prefix").and_then(Value::as_str) {
        Some(prefix) => {
            key.push_str(prefix);
            Some(Mode::Prefix)
        }
        None => Some(Mode::Chat),
    };
    (key, mode)
}

fn generation_response(value: Value) -> Value {
    match value {
        Value::String(text) => {
            let completion = tokenize(&text).len() as u64;
            json!({"text": text, "finish_reason": "stop", "usage": {"prompt": 0, "completion": completion}})
        }
        other => other,
    }
}

/// Feature-hashed bag of words, L2-normalized. Empty text maps to the first basis vector.
pub fn hashing_embedding(text: &str, dim: usize) -> Vec<f64> {
    let dim = dim.max(1);
    let mut v = vec![0.0; dim];
    for token in tokenize(text) {
        let digest = Sha256::digest(token.as_bytes());
        let mut bucket = [0u8; 8];
        bucket.copy_from_slice(&digest[..8]);
        let slot = (u64::from_le_bytes(bucket) % dim as u64) as usize;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[slot] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
        return v;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Share of hypothesis tokens (as a set) that occur in the premise.
pub fn overlap_entailment(premise: &str, hypothesis: &str) -> f64 {
    let p: HashSet<String> = tokenize(premise).into_iter().collect();
    let h: HashSet<String> = tokenize(hypothesis).into_iter().collect();
    if h.is_empty() {
        return if p.is_empty() { 1.0 } else { 0.0 };
    }
    h.iter().filter(|t| p.contains(*t)).count() as f64 / h.len() as f64
}

impl Transport for ScriptedTransport {
    fn call(
        &self,
        profile: &ProviderProfile,
        op: Operation,
        payload: &Value,
    ) -> Result<Value, TransportError> {
        self.requests
            .lock()
            .expect("request log poisoned")
            .push((profile.name.clone(), op, payload.clone()));
        match op {
            Operation::Generate => {
                let (key, mode) = generate_key(payload);
                let greedy = payload.get("temperature").and_then(Value::as_f64) == Some(0.0);
                match self.find(&profile.name, op, &key, mode) {
                    Some(idx) => self.respond(idx, greedy).map(generation_response),
                    None => Err(TransportError::Fatal(format!(
                        "no scripted response for {} request: {}",
                        profile.name,
                        key.chars().take(160).collect::<String>()
                    ))),
                }
            }
            Operation::Reward => {
                let key = payload.to_string();
                if let Some(idx) = self.find(&profile.name, op, &key, None) {
                    return self.respond(idx, false);
                }
                let score = self.transcript.default_reward.ok_or_else(|| {
                    TransportError::Fatal("no scripted reward and no default".into())
                })?;
                let criteria = payload
                    .get("criteria")
                    .and_then(Value::as_array)
                    .cloned()
                    .unwrap_or_default();
                let mut scores = serde_json::Map::new();
                for c in &criteria {
                    if let Some(name) = c.get("name").and_then(Value::as_str) {
                        scores.insert(name.to_string(), json!(score));
                    }
                }
                let total = u64::from(score) * scores.len() as u64;
                Ok(json!({"scores": scores, "total": total}))
            }
            Operation::Entail => {
                let premise = payload.get("premise").and_then(Value::as_str).unwrap_or("");
                let hypothesis = payload.get("hypothesis").and_then(Value::as_str).unwrap_or("");
                let key = format!("{premise}\n{hypothesis}");
                if let Some(idx) = self.find(&profile.name, op, &key, None) {
                    return self.respond(idx, true);
                }
                if let Some(rule) = self
                    .transcript
                    .entail
                    .iter()
                    .find(|r| r.premise == premise && r.hypothesis == hypothesis)
                {
                    return Ok(json!({"entail": rule.p}));
                }
                Ok(json!({"entail": overlap_entailment(premise, hypothesis)}))
            }
            Operation::Embed => {
                let texts: Vec<String> = payload
                    .get("texts")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
                    .unwrap_or_default();
                let key = texts.join("\n");
                if let Some(idx) = self.find(&profile.name, op, &key, None) {
                    return self.respond(idx, true);
                }
                let vectors: Vec<Vec<f64>> = texts
                    .iter()
                    .map(|t| {
                        self.transcript
                            .vectors
                            .get(t)
                            .cloned()
                            .unwrap_or_else(|| hashing_embedding(t, self.transcript.embedding_dim))
                    })
                    .collect();
                Ok(json!({ "vectors": vectors }))
            }
        }
    }
}
