//! Query generation and Okapi BM25 retrieval over a local evidence corpus.
//!
//! ```text
//! score(D,Q) = Σ_{q ∈ Q} idf(q) · tf(q,D)·(k1+1) / (tf(q,D) + k1·(1 − b + b·|D|/avgdl))
//! idf(q)     = ln(1 + (N − df(q) + 0.5) / (df(q) + 0.5))
//! ```
//!
//! Query terms are deduplicated before scoring. Ties are broken by ascending
//! document id so rankings are fully deterministic.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, GenerationRequest, Message};
use crate::model::{Claim, EvidenceDocument};
use crate::text::tokenize;

const QUERY_PROMPT: &str = include_str!("../assets/prompts/queries.txt");
const INDEX_FORMAT: &str = "tracecheck-bm25";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("document {0:?} has empty text")]
    EmptyDocument(String),
    #[error("corpus line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("index file: {0}")]
    Index(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default, alias = "url")]
    pub locator: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Anything that can answer a top-k search. The local corpus is the reference
/// implementation; remote search adapters implement the same signature.
pub trait SearchBackend: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Vec<EvidenceDocument>;
    fn is_empty(&self) -> bool;
}

#[derive(Debug, Clone, Default)]
pub struct EvidenceCorpus {
    documents: Vec<CorpusDocument>,
    postings: HashMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_len: f64,
    params: Bm25Params,
}

impl EvidenceCorpus {
    pub fn ingest(documents: Vec<CorpusDocument>) -> Result<Self, RetrievalError> {
        Self::ingest_with(documents, Bm25Params::default())
    }

    pub fn ingest_with(
        documents: Vec<CorpusDocument>,
        params: Bm25Params,
    ) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::new();
        for d in &documents {
            if !seen.insert(d.id.as_str()) {
                return Err(RetrievalError::DuplicateId(d.id.clone()));
            }
            if d.text.trim().is_empty() {
                return Err(RetrievalError::EmptyDocument(d.id.clone()));
            }
        }
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(documents.len());
        for (i, d) in documents.iter().enumerate() {
            let tokens = tokenize(&format!("{}\n{}", d.title, d.text));
            doc_lengths.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: i as u32,
                    tf: count,
                });
            }
        }
        let avg_len = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_lengths.len() as f64
        };
        Ok(Self {
            documents,
            postings,
            doc_lengths,
            avg_len,
            params,
        })
    }

    /// One JSON document per line: `{"id","title","url","text"}`.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut docs = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: CorpusDocument =
                serde_json::from_str(&line).map_err(|e| RetrievalError::MalformedLine {
                    line: n + 1,
                    message: e.to_string(),
                })?;
            docs.push(doc);
        }
        Self::ingest(docs)
    }

    pub fn documents(&self) -> &[CorpusDocument] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn doc_length(&self, doc: usize) -> u32 {
        self.doc_lengths[doc]
    }

    pub fn average_length(&self) -> f64 {
        self.avg_len
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.documents.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 scores of every document matching at least one query term.
    pub fn scores(&self, query: &str) -> HashMap<usize, f64> {
        let Bm25Params { k1, b } = self.params;
        let terms: HashSet<String> = tokenize(query).into_iter().collect();
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in &terms {
            let list = self.postings(term);
            if list.is_empty() {
                continue;
            }
            let idf = self.idf(list.len());
            for p in list {
                let tf = f64::from(p.tf);
                let len = f64::from(self.doc_lengths[p.doc as usize]);
                let norm = k1 * (1.0 - b + b * len / self.avg_len);
                *scores.entry(p.doc as usize).or_default() += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        scores
    }

    fn to_evidence(&self, doc: usize, score: f64) -> EvidenceDocument {
        let d = &self.documents[doc];
        EvidenceDocument {
            id: d.id.clone(),
            title: d.title.clone(),
            locator: d.locator.clone(),
            text: d.text.clone(),
            retrieval_score: score,
        }
    }

    pub fn save_index(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let file = IndexFile {
            format: INDEX_FORMAT.to_string(),
            version: INDEX_VERSION,
            params: self.params,
            documents: self.documents.clone(),
            doc_lengths: self.doc_lengths.clone(),
            postings: self
                .postings
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        };
        let json = serde_json::to_string(&file).map_err(|e| RetrievalError::Index(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Load a sidecar index, rejecting it if it disagrees with its own documents.
    pub fn load_index(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let raw = std::fs::read_to_string(path)?;
        let file: IndexFile =
            serde_json::from_str(&raw).map_err(|e| RetrievalError::Index(e.to_string()))?;
        if file.format != INDEX_FORMAT || file.version != INDEX_VERSION {
            return Err(RetrievalError::Index(format!(
                "unsupported index {} v{}",
                file.format, file.version
            )));
        }
        let rebuilt = Self::ingest_with(file.documents, file.params)?;
        let stored: HashMap<String, Vec<Posting>> = file.postings.into_iter().collect();
        if stored != rebuilt.postings || file.doc_lengths != rebuilt.doc_lengths {
            return Err(RetrievalError::Index(
                "postings do not match the stored documents".into(),
            ));
        }
        Ok(rebuilt)
    }
}

impl SearchBackend for EvidenceCorpus {
    fn search(&self, query: &str, k: usize) -> Vec<EvidenceDocument> {
        if k == 0 {
            return Vec::new();
        }
        let mut ranked: Vec<(usize, f64)> = self.scores(query).into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.documents[a.0].id.cmp(&self.documents[b.0].id))
        });
        ranked
            .into_iter()
            .take(k)
            .map(|(doc, score)| self.to_evidence(doc, score))
            .collect()
    }

    fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

/// Versioned JSON sidecar.
///
/// ```text
/// {"format":"tracecheck-bm25","version":1,"params":{"k1","b"},
///  "documents":[{"id","title","locator","text"}],"doc_lengths":[..],
///  "postings":{"term":[{"doc","tf"}]}}
/// ```
#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    params: Bm25Params,
    documents: Vec<CorpusDocument>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub claim_id: String,
    pub queries: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub max_queries: usize,
    pub per_query_k: usize,
    pub overall_cap: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            max_queries: 5,
            per_query_k: 5,
            overall_cap: 10,
        }
    }
}

/// Numbered-list items (`1. q`, `2) q`), deduplicated, at most `cap`.
pub fn parse_numbered_list(text: &str, cap: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for line in text.lines() {
        let line = line.trim();
        let digits = line.chars().take_while(char::is_ascii_digit).count();
        if digits == 0 {
            continue;
        }
        let rest = &line[digits..];
        let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) else {
            continue;
        };
        let item = rest.trim().trim_matches(|c| c == '"' || c == '“' || c == '”').trim();
        if item.is_empty() || !seen.insert(item.to_lowercase()) {
            continue;
        }
        out.push(item.to_string());
        if out.len() == cap {
            break;
        }
    }
    out
}

pub fn generate_queries(
    claim: &Claim,
    gateway: &Gateway,
    max_queries: usize,
) -> Result<QuerySet, RetrievalError> {
    let max_queries = max_queries.max(1);
    let prompt = QUERY_PROMPT
        .replace("{max_queries}", &max_queries.to_string())
        .replace("{claim}", claim.text.trim());
    let out = gateway.generate(&GenerationRequest::chat(vec![Message::user(prompt)], 512, 0.0))?;
    let mut queries = parse_numbered_list(&out.text, max_queries);
    if queries.is_empty() {
        tracing::debug!(claim = %claim.id, "no parseable queries, searching with the claim text");
        queries.push(claim.text.trim().to_string());
    }
    Ok(QuerySet {
        claim_id: claim.id.clone(),
        queries,
    })
}

/// Union of per-query top-k hits, deduplicated by id (or by locator when ids
/// differ), re-ranked by each document's best per-query score.
pub fn merge_hits(per_query: Vec<Vec<EvidenceDocument>>, cap: usize) -> Vec<EvidenceDocument> {
    let mut merged: Vec<EvidenceDocument> = Vec::new();
    for hits in per_query {
        for doc in hits {
            let existing = merged.iter_mut().find(|m| {
                m.id == doc.id || (!doc.locator.is_empty() && m.locator == doc.locator)
            });
            match existing {
                Some(m) => {
                    if doc.retrieval_score > m.retrieval_score {
                        m.retrieval_score = doc.retrieval_score;
                    }
                }
                None => merged.push(doc),
            }
        }
    }
    merged.sort_by(|a, b| {
        b.retrieval_score
            .total_cmp(&a.retrieval_score)
            .then_with(|| a.id.cmp(&b.id))
    });
    merged.truncate(cap);
    merged
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub queries: QuerySet,
    pub documents: Vec<EvidenceDocument>,
}

pub fn retrieve_for_claim(
    claim: &Claim,
    corpus: &dyn SearchBackend,
    gateway: &Gateway,
    config: RetrievalConfig,
) -> Result<Retrieval, RetrievalError> {
    if corpus.is_empty() {
        return Ok(Retrieval {
            queries: QuerySet {
                claim_id: claim.id.clone(),
                queries: Vec::new(),
            },
            documents: Vec::new(),
        });
    }
    let queries = generate_queries(claim, gateway, config.max_queries)?;
    let hits = queries
        .queries
        .iter()
        .map(|q| corpus.search(q, config.per_query_k))
        .collect();
    Ok(Retrieval {
        documents: merge_hits(hits, config.overall_cap),
        queries,
    })
}
