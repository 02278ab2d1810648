//! Evaluation: veracity P/R/F1, LCS overlap, embedding similarity, trace
//! entailment against the gold article, rubric judging, and dataset loading.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, GenerationRequest, Message};
use crate::model::{Claim, EvidenceDocument, LabelSet, ModelError, ThinkingTrace};
use crate::oracle::SyntheticExpertKnowledge;
use crate::session::{BatchItem, BatchManifest, Protocol, Strategy};
use crate::text::{split_sentences, tokenize};

const JUDGE_FILE: &str = include_str!("../assets/criteria/judge.json");
const JUDGE_PROMPT: &str = include_str!("../assets/prompts/judge.txt");
const JUDGE_REASK: &str = include_str!("../assets/prompts/judge_reask.txt");
const JUDGE_REASKS: usize = 2;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset has no valid records ({skipped} skipped)")]
    EmptyDataset { skipped: usize },
    #[error("{0}")]
    Precondition(String),
    #[error("judge reply had no SCORE line after {0} attempts")]
    Unparseable(usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ---------------------------------------------------------------- labels

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging: String,
    pub per_class: Vec<ClassMetrics>,
    /// Predictions that named no label of the set.
    pub violations: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Macro-averaged over every class of `labels`; out-of-set predictions match no class.
pub fn label_metrics(pairs: &[(String, String)], labels: &LabelSet) -> LabelMetrics {
    let classes = labels.labels();
    let mut tp = vec![0usize; classes.len()];
    let mut predicted = vec![0usize; classes.len()];
    let mut support = vec![0usize; classes.len()];
    let mut violations = 0;
    let position = |raw: &str| {
        labels
            .resolve(raw)
            .and_then(|c| classes.iter().position(|l| l == c))
    };
    for (gold, pred) in pairs {
        let g = position(gold);
        if let Some(g) = g {
            support[g] += 1;
        }
        match position(pred) {
            Some(p) => {
                predicted[p] += 1;
                if Some(p) == g {
                    tp[p] += 1;
                }
            }
            None => violations += 1,
        }
    }
    let per_class: Vec<ClassMetrics> = classes
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let precision = ratio(tp[i], predicted[i]);
            let recall = ratio(tp[i], support[i]);
            ClassMetrics {
                label: label.clone(),
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: support[i],
            }
        })
        .collect();
    let n = per_class.len().max(1) as f64;
    LabelMetrics {
        precision: per_class.iter().map(|c| c.precision).sum::<f64>() / n,
        recall: per_class.iter().map(|c| c.recall).sum::<f64>() / n,
        f1: per_class.iter().map(|c| c.f1).sum::<f64>() / n,
        averaging: "macro".into(),
        per_class,
        violations,
    }
}

// ---------------------------------------------------------------- LCS

/// LCS length by the bit-vector recurrence V' = (V + (V & M)) | (V & !M),
/// one bit per position of `a`, multi-word for long inputs.
pub fn lcs_length<T: Eq + std::hash::Hash>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let words = a.len().div_ceil(64);
    let mut masks: HashMap<&T, Vec<u64>> = HashMap::new();
    for (i, t) in a.iter().enumerate() {
        masks.entry(t).or_insert_with(|| vec![0; words])[i / 64] |= 1 << (i % 64);
    }
    let mut v = vec![u64::MAX; words];
    for t in b {
        let Some(m) = masks.get(t) else { continue };
        let mut carry = 0u64;
        for w in 0..words {
            let u = v[w] & m[w];
            let (s1, c1) = v[w].overflowing_add(u);
            let (s2, c2) = s1.overflowing_add(carry);
            carry = u64::from(c1 || c2);
            v[w] = s2 | (v[w] & !m[w]);
        }
    }
    let mut zeros = 0;
    for (w, word) in v.iter().enumerate() {
        let bits = if w + 1 == words && a.len() % 64 != 0 { a.len() % 64 } else { 64 };
        let mask = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
        zeros += (!word & mask).count_ones() as usize;
    }
    zeros
}

/// F-measure of the token LCS.
pub fn lexical_overlap(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    let l = lcs_length(&c, &r);
    harmonic(ratio(l, c.len()), ratio(l, r.len()))
}

// ---------------------------------------------------------------- embeddings

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

/// Greedy token matching over embeddings, cosines clamped to [0, 1].
pub fn similarity_f(candidate: &str, reference: &str, embedder: &Gateway) -> Result<f64, EvalError> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() && r.is_empty() {
        return Ok(1.0);
    }
    if c.is_empty() || r.is_empty() {
        return Ok(0.0);
    }
    let mut vocab: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for t in c.iter().chain(&r) {
        if seen.insert(t.clone()) {
            vocab.push(t.clone());
        }
    }
    let vectors = embedder.embed(&vocab)?;
    let table: HashMap<&str, &Vec<f64>> = vocab.iter().map(String::as_str).zip(vectors.iter()).collect();
    let sim = |x: &str, y: &str| if x == y { 1.0 } else { cosine(table[x], table[y]) };
    let best = |from: &[String], to: &[String]| {
        from.iter()
            .map(|x| to.iter().map(|y| sim(x, y)).fold(0.0, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(harmonic(best(&c, &r), best(&r, &c)))
}

// ---------------------------------------------------------------- entailment

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntailmentScore {
    pub consistency: f64,
    pub coverage: f64,
    pub score: f64,
}

/// Mean-of-max entailment in both directions, averaged.
///
/// Pairwise probabilities come from `entail(premise, hypothesis)`; any closure
/// works, which keeps the composition testable apart from a backend.
pub fn entailment_with<F>(trace_text: &str, article: &str, mut entail: F) -> Result<EntailmentScore, EvalError>
where
    F: FnMut(&str, &str) -> Result<f64, EvalError>,
{
    let article_sents = split_sentences(article);
    if article_sents.is_empty() {
        return Err(EvalError::Precondition("article is empty".into()));
    }
    let trace_sents = split_sentences(trace_text);
    if trace_sents.is_empty() {
        return Ok(EntailmentScore { consistency: 0.0, coverage: 0.0, score: 0.0 });
    }
    let mut grid = vec![vec![0.0; trace_sents.len()]; article_sents.len()];
    let mut back = vec![vec![0.0; article_sents.len()]; trace_sents.len()];
    for (j, a) in article_sents.iter().enumerate() {
        for (i, t) in trace_sents.iter().enumerate() {
            grid[j][i] = entail(a, t)?;
            back[i][j] = entail(t, a)?;
        }
    }
    let consistency = (0..trace_sents.len())
        .map(|i| (0..article_sents.len()).map(|j| grid[j][i]).fold(0.0, f64::max))
        .sum::<f64>()
        / trace_sents.len() as f64;
    let coverage = (0..article_sents.len())
        .map(|j| (0..trace_sents.len()).map(|i| back[i][j]).fold(0.0, f64::max))
        .sum::<f64>()
        / article_sents.len() as f64;
    Ok(EntailmentScore {
        consistency,
        coverage,
        score: (consistency + coverage) / 2.0,
    })
}

pub fn trace_text(trace: &ThinkingTrace) -> String {
    trace
        .texts()
        .map(|t| {
            let t = t.trim();
            if t.ends_with(['.', '?', '!']) {
                t.to_string()
            } else {
                format!("{t}.")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn entailment_score(trace: &ThinkingTrace, article: &str, nli: &Gateway) -> Result<EntailmentScore, EvalError> {
    let mut cache: HashMap<(String, String), f64> = HashMap::new();
    entailment_with(&trace_text(trace), article, |p, h| {
        if let Some(v) = cache.get(&(p.to_string(), h.to_string())) {
            return Ok(*v);
        }
        let v = nli.entail(p, h)?;
        cache.insert((p.to_string(), h.to_string()), v);
        Ok(v)
    })
}

// ---------------------------------------------------------------- judge

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    Explanation,
    Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeCriterion {
    Correctness,
    Comprehensibility,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRubric {
    pub artifact: Artifact,
    pub criterion: JudgeCriterion,
    pub question: String,
    pub levels: Vec<String>,
}

#[derive(Deserialize)]
struct RubricFile {
    rubrics: Vec<JudgeRubric>,
}

pub fn judge_rubrics() -> Vec<JudgeRubric> {
    let rubrics = serde_json::from_str::<RubricFile>(JUDGE_FILE)
        .expect("shipped judge rubrics are valid")
        .rubrics;
    debug_assert!(rubrics.iter().all(|r| r.levels.len() == 5));
    rubrics
}

pub fn rubric(artifact: Artifact, criterion: JudgeCriterion) -> JudgeRubric {
    judge_rubrics()
        .into_iter()
        .find(|r| r.artifact == artifact && r.criterion == criterion)
        .expect("all four rubrics ship")
}

/// Last `SCORE: n` line with n in 1..=5.
pub fn parse_score(text: &str) -> Option<u8> {
    text.lines().rev().find_map(|line| {
        let cleaned = line.trim().trim_matches('*').trim();
        let upper = cleaned.to_uppercase();
        let rest = upper.strip_prefix("SCORE")?.trim_start_matches(['*', ' ']).strip_prefix(':')?;
        let rest = rest.trim().trim_matches('*').trim();
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        match digits.parse::<u8>() {
            Ok(n @ 1..=5) => Some(n),
            _ => None,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub score: u8,
    pub rationale: String,
    pub attempts: usize,
}

pub fn judge(
    claim: &str,
    text: &str,
    reference: &str,
    rubric: &JudgeRubric,
    judge: &Gateway,
) -> Result<JudgeScore, EvalError> {
    let levels = rubric
        .levels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}: {}", i + 1, l))
        .collect::<Vec<_>>()
        .join("\n");
    let (artifact, title) = match rubric.artifact {
        Artifact::Explanation => ("fact-checking explanation", "Explanation"),
        Artifact::Trace => ("thinking trace", "Thinking trace"),
    };
    let prompt = JUDGE_PROMPT
        .replace("{artifact}", artifact)
        .replace("{artifact_title}", title)
        .replace("{claim}", claim.trim())
        .replace("{reference}", reference.trim())
        .replace("{text}", text.trim())
        .replace("{question}", &rubric.question)
        .replace("{levels}", &levels);
    let mut messages = vec![Message::user(prompt)];
    for attempt in 1..=JUDGE_REASKS + 1 {
        let out = judge.generate(&GenerationRequest::chat(messages.clone(), 512, 0.0))?;
        if let Some(score) = parse_score(&out.text) {
            let rationale = out
                .text
                .lines()
                .filter(|l| parse_score(l).is_none())
                .collect::<Vec<_>>()
                .join("\n")
                .trim()
                .to_string();
            return Ok(JudgeScore { score, rationale, attempts: attempt });
        }
        tracing::debug!(attempt, "judge reply without a score line");
        messages.push(Message::assistant(out.text));
        messages.push(Message::user(JUDGE_REASK.trim()));
    }
    Err(EvalError::Unparseable(JUDGE_REASKS + 1))
}

/// Mean over present scores; `None` when nothing was scored.
pub fn mean_present<I: IntoIterator<Item = Option<f64>>>(values: I) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

// ---------------------------------------------------------------- dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub claim: String,
    pub label_set: LabelSet,
    pub gold_label: String,
    pub gold_explanation: String,
    pub article: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Vec<EvidenceDocument>>,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        Claim::new(&self.id, &self.claim).map_err(|e| e.to_string())?;
        if !self.label_set.contains(&self.gold_label) {
            return Err(format!("gold label {:?} is not in the label set", self.gold_label));
        }
        if self.article.trim().is_empty() {
            return Err("article is empty".into());
        }
        if let Some(docs) = &self.evidence {
            for d in docs {
                d.validate().map_err(|e| format!("evidence {}: {e}", d.id))?;
            }
        }
        Ok(())
    }

    pub fn knowledge(&self) -> SyntheticExpertKnowledge {
        SyntheticExpertKnowledge {
            gold_label: self.gold_label.clone(),
            gold_explanation: self.gold_explanation.clone(),
            article: self.article.clone(),
        }
    }

    pub fn to_batch_item(&self) -> BatchItem {
        BatchItem {
            claim: Claim {
                id: self.id.clone(),
                text: self.claim.clone(),
                source: None,
            },
            labels: self.label_set.clone(),
            knowledge: self.knowledge(),
            evidence: self.evidence.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub skipped: Vec<SkippedLine>,
}

pub fn parse_dataset(text: &str) -> Result<Dataset, EvalError> {
    let mut records: Vec<DatasetRecord> = Vec::new();
    let mut skipped = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(line = line_no, "malformed dataset line: {e}");
                skipped.push(SkippedLine { line: line_no, reason: format!("malformed: {e}") });
                continue;
            }
        };
        if let Err(reason) = record.validate() {
            tracing::warn!(line = line_no, id = %record.id, "invalid record: {reason}");
            skipped.push(SkippedLine { line: line_no, reason });
            continue;
        }
        if !ids.insert(record.id.clone()) {
            tracing::warn!(line = line_no, id = %record.id, "duplicate record id");
            skipped.push(SkippedLine { line: line_no, reason: format!("duplicate id {}", record.id) });
            continue;
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(EvalError::EmptyDataset { skipped: skipped.len() });
    }
    Ok(Dataset { records, skipped })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub explanation_correctness: Option<u8>,
    pub explanation_comprehensibility: Option<u8>,
    pub trace_correctness: Option<u8>,
    pub trace_comprehensibility: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimReport {
    pub claim_id: String,
    pub gold_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_label: Option<String>,
    pub correct: bool,
    pub out_of_set: bool,
    pub lexical_overlap: Option<f64>,
    pub similarity: Option<f64>,
    pub entailment: Option<f64>,
    pub judge: JudgeScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub claims: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging: String,
    pub violations: usize,
    pub lexical_overlap: Option<f64>,
    pub similarity: Option<f64>,
    pub entailment: Option<f64>,
    pub judge: HashMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub system: String,
    pub claims: Vec<ClaimReport>,
    pub aggregate: Aggregate,
}

/// Optional model-backed scorers; a missing one leaves its column empty.
#[derive(Clone, Default)]
pub struct Scorers {
    pub embed: Option<Gateway>,
    pub nli: Option<Gateway>,
    pub judge: Option<Gateway>,
}

pub fn system_name(manifest: &BatchManifest) -> String {
    match (manifest.protocol, manifest.strategy) {
        (Protocol::Autonomous, Some(s)) => format!("autonomous/{}", match s {
            Strategy::Plain => "plain",
            Strategy::BestOfN => "best_of_n",
            Strategy::SelfRefine => "self_refine",
            Strategy::Mcts => "mcts",
        }),
        (p, _) => serde_json::to_value(p)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
    }
}

fn soft<T>(what: &str, claim: &str, r: Result<T, EvalError>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            tracing::warn!(claim, "{what} missing: {e}");
            None
        }
    }
}

/// Score a batch manifest against its dataset. Claims are ordered by id.
pub fn evaluate_manifest(manifest: &BatchManifest, dataset: &[DatasetRecord], scorers: &Scorers) -> MetricReport {
    let by_id: HashMap<&str, &DatasetRecord> = dataset.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut entries: Vec<_> = manifest.sessions.iter().collect();
    entries.sort_by(|a, b| a.claim_id.cmp(&b.claim_id));

    let mut claims = Vec::new();
    let mut pairs = Vec::new();
    let mut label_union: Vec<String> = Vec::new();
    for entry in entries {
        let Some(record) = by_id.get(entry.claim_id.as_str()) else {
            tracing::warn!(claim = %entry.claim_id, "manifest entry has no dataset record");
            continue;
        };
        for l in record.label_set.labels() {
            if !label_union.iter().any(|u| u.eq_ignore_ascii_case(l)) {
                label_union.push(l.clone());
            }
        }
        let id = record.id.as_str();
        let solution = entry.final_solution.as_ref();
        let predicted = solution.map(|s| s.label.clone());
        let out_of_set = predicted.as_deref().is_some_and(|p| !record.label_set.contains(p));
        let correct = predicted
            .as_deref()
            .and_then(|p| record.label_set.resolve(p))
            .zip(record.label_set.resolve(&record.gold_label))
            .is_some_and(|(a, b)| a == b);
        pairs.push((record.gold_label.clone(), predicted.clone().unwrap_or_default()));

        let explanation = solution.map(|s| s.explanation.as_str());
        let trace = entry
            .evaluated_trace
            .clone()
            .or_else(|| solution.map(|s| s.trace.clone()));
        let lexical = explanation.map(|e| lexical_overlap(e, &record.gold_explanation));
        let similarity = match (explanation, &scorers.embed) {
            (Some(e), Some(g)) => soft("similarity", id, similarity_f(e, &record.gold_explanation, g)),
            _ => None,
        };
        let entailment = match (&trace, &scorers.nli) {
            (Some(t), Some(g)) => soft("entailment", id, entailment_score(t, &record.article, g)).map(|s| s.score),
            _ => None,
        };
        let mut judged = JudgeScores::default();
        if let (Some(s), Some(g)) = (solution, &scorers.judge) {
            let trace_body = trace.as_ref().map(|t| t.body()).unwrap_or_default();
            let reference = format!("{}\n\n{}", record.gold_explanation.trim(), record.article.trim());
            let run = |artifact, criterion, text: &str| {
                soft("judge score", id, judge(&record.claim, text, &reference, &rubric(artifact, criterion), g))
                    .map(|j| j.score)
            };
            judged.explanation_correctness = run(Artifact::Explanation, JudgeCriterion::Correctness, &s.explanation);
            judged.explanation_comprehensibility =
                run(Artifact::Explanation, JudgeCriterion::Comprehensibility, &s.explanation);
            judged.trace_correctness = run(Artifact::Trace, JudgeCriterion::Correctness, &trace_body);
            judged.trace_comprehensibility = run(Artifact::Trace, JudgeCriterion::Comprehensibility, &trace_body);
        }
        claims.push(ClaimReport {
            claim_id: record.id.clone(),
            gold_label: record.gold_label.clone(),
            predicted_label: predicted,
            correct,
            out_of_set,
            lexical_overlap: lexical,
            similarity,
            entailment,
            judge: judged,
        });
    }

    let metrics = match LabelSet::new(label_union) {
        Ok(set) => label_metrics(&pairs, &set),
        Err(_) => label_metrics(&[], &LabelSet::new(["_", "__"]).expect("two labels")),
    };
    let mut judge_means = HashMap::new();
    let columns: [(&str, fn(&JudgeScores) -> Option<u8>); 4] = [
        ("explanation_correctness", |j| j.explanation_correctness),
        ("explanation_comprehensibility", |j| j.explanation_comprehensibility),
        ("trace_correctness", |j| j.trace_correctness),
        ("trace_comprehensibility", |j| j.trace_comprehensibility),
    ];
    for (name, get) in columns {
        if let Some(m) = mean_present(claims.iter().map(|c| get(&c.judge).map(f64::from))) {
            judge_means.insert(name.to_string(), m);
        }
    }
    let aggregate = Aggregate {
        claims: claims.len(),
        precision: metrics.precision,
        recall: metrics.recall,
        f1: metrics.f1,
        averaging: metrics.averaging,
        violations: metrics.violations,
        lexical_overlap: mean_present(claims.iter().map(|c| c.lexical_overlap)),
        similarity: mean_present(claims.iter().map(|c| c.similarity)),
        entailment: mean_present(claims.iter().map(|c| c.entailment)),
        judge: judge_means,
    };
    MetricReport {
        system: system_name(manifest),
        claims,
        aggregate,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", x * 100.0))
}

/// Aligned text table, one row per system: P, R, F1 (macro), R_L, similarity, ES.
pub fn render_table(reports: &[MetricReport]) -> String {
    let header = ["system", "P", "R", "F1", "R_L", "Sim", "ES", "oos"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let a = &r.aggregate;
            vec![
                r.system.clone(),
                cell(Some(a.precision)),
                cell(Some(a.recall)),
                cell(Some(a.f1)),
                cell(a.lexical_overlap),
                cell(a.similarity),
                cell(a.entailment),
                a.violations.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header.map(String::from), &mut out);
    let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    for r in &rows {
        line(r, &mut out);
    }
    let _ = writeln!(out, "F1 is macro-averaged over the label set; scores are x100.");
    out
}
