//! Collaborative sessions: event-sourced state, the trace-edit loop, the
//! dialogue and choose-one baselines, autonomous strategies, and batch runs
//! with the oracle standing in for the expert.

use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::editor::{EditPlan, Editor, EditorError};
use crate::gateway::{capture_calls, CallOutcome, CallRecord, Gateway, Message, Operation, Role};
use crate::model::{
    apply_edits, diff_traces, Claim, EvidenceDocument, FeedbackInstruction, LabelSet, ModelError,
    Solution, ThinkingTrace, TraceDiff,
};
use crate::oracle::{report_to_feedback, Oracle, OracleError, OracleInput, OracleReport, SyntheticExpertKnowledge};
use crate::retrieval::{retrieve_for_claim, QuerySet, RetrievalConfig, RetrievalError, SearchBackend};
use crate::scaling::{self, MctsConfig, ScalingError};
use crate::verifier::{render_solution, Verifier, VerifierError};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session {0}")]
    NotFound(String),
    #[error("session {0} already has an operation in flight")]
    Busy(String),
    #[error("all {max} feedback rounds are used up")]
    RoundLimitExceeded { max: usize },
    #[error("session is {0:?}, not active")]
    NotActive(SessionStatus),
    #[error("{0}")]
    Precondition(String),
    #[error("session store: {0}")]
    Store(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Editor(#[from] EditorError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
}

impl From<std::io::Error> for SessionError {
    fn from(e: std::io::Error) -> Self {
        SessionError::Store(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    TraceEdit,
    Dialogue,
    ChooseOne,
    Autonomous,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "trace_edit" => Ok(Protocol::TraceEdit),
            "dialogue" => Ok(Protocol::Dialogue),
            "choose_one" => Ok(Protocol::ChooseOne),
            "autonomous" => Ok(Protocol::Autonomous),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Plain,
    BestOfN,
    SelfRefine,
    Mcts,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "plain" => Ok(Strategy::Plain),
            "best_of_n" => Ok(Strategy::BestOfN),
            "self_refine" => Ok(Strategy::SelfRefine),
            "mcts" => Ok(Strategy::Mcts),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Accepted,
    Exhausted,
    Failed,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        self != SessionStatus::Active
    }
}

/// Progress of the operation behind the last mutation, for polling clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpStatus {
    Pending,
    Ready,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRef {
    pub role: Role,
    pub op: Operation,
    pub request_hash: String,
    pub ok: bool,
}

impl From<&CallRecord> for CallRef {
    fn from(r: &CallRecord) -> Self {
        Self {
            role: r.role,
            op: r.op,
            request_hash: r.request_hash.clone(),
            ok: r.outcome == CallOutcome::Ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub index: usize,
    pub feedback: Vec<FeedbackInstruction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<EditPlan>,
    pub solution: Solution,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    #[serde(default)]
    pub calls: Vec<CallRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<Solution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<OracleReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    Created {
        id: String,
        claim: Claim,
        labels: LabelSet,
        protocol: Protocol,
        max_rounds: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        strategy: Option<Strategy>,
        /// Evidence supplied with the claim; retrieval is skipped when set.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        evidence: Option<Vec<EvidenceDocument>>,
    },
    EvidenceRetrieved {
        queries: QuerySet,
        documents: Vec<EvidenceDocument>,
    },
    FeedbackSubmitted {
        round: usize,
        instructions: Vec<FeedbackInstruction>,
    },
    RoundCompleted {
        round: RoundRecord,
    },
    RoundFailed {
        round: usize,
        attempt: u32,
        error: String,
    },
    CandidatesGenerated {
        candidates: Vec<Candidate>,
        chosen: usize,
    },
    StrategyRun {
        strategy: Strategy,
        detail: Value,
    },
    OracleReviewed {
        round: usize,
        report: OracleReport,
    },
    StatusChanged {
        status: SessionStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    Questionnaire {
        answers: Value,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub ts: DateTime<Utc>,
    #[serde(flatten)]
    pub body: EventBody,
}

/// Folded view of one session's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    pub claim: Claim,
    pub labels: LabelSet,
    pub protocol: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    pub max_rounds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provided_evidence: Option<Vec<EvidenceDocument>>,
    pub queries: Vec<String>,
    pub evidence: Vec<EvidenceDocument>,
    pub rounds: Vec<RoundRecord>,
    pub status: SessionStatus,
    pub op_status: OpStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub oracle_reports: Vec<(usize, OracleReport)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub questionnaires: Vec<Value>,
    pub last_seq: u64,
}

impl SessionRecord {
    pub fn from_events(events: &[SessionEvent]) -> Result<Self, SessionError> {
        let mut iter = events.iter();
        let first = iter.next().ok_or_else(|| SessionError::Store("empty event log".into()))?;
        let EventBody::Created { id, claim, labels, protocol, max_rounds, strategy, evidence } = &first.body else {
            return Err(SessionError::Store("event log does not start with a creation event".into()));
        };
        let mut record = SessionRecord {
            id: id.clone(),
            claim: claim.clone(),
            labels: labels.clone(),
            protocol: *protocol,
            strategy: *strategy,
            max_rounds: *max_rounds,
            provided_evidence: evidence.clone(),
            queries: Vec::new(),
            evidence: Vec::new(),
            rounds: Vec::new(),
            status: SessionStatus::Active,
            op_status: OpStatus::Pending,
            failure: None,
            candidates: Vec::new(),
            chosen: None,
            oracle_reports: Vec::new(),
            questionnaires: Vec::new(),
            last_seq: first.seq,
        };
        for event in iter {
            record.apply(event)?;
        }
        Ok(record)
    }

    fn apply(&mut self, event: &SessionEvent) -> Result<(), SessionError> {
        if event.seq <= self.last_seq {
            return Err(SessionError::Store(format!("event sequence not increasing at {}", event.seq)));
        }
        self.last_seq = event.seq;
        match &event.body {
            EventBody::Created { .. } => {
                return Err(SessionError::Store("duplicate creation event".into()));
            }
            EventBody::EvidenceRetrieved { queries, documents } => {
                self.queries = queries.queries.clone();
                self.evidence = documents.clone();
            }
            EventBody::FeedbackSubmitted { .. } => self.op_status = OpStatus::Pending,
            EventBody::RoundCompleted { round } => {
                self.rounds.push(round.clone());
                self.op_status = OpStatus::Ready;
            }
            EventBody::RoundFailed { error, .. } => self.failure = Some(error.clone()),
            EventBody::CandidatesGenerated { candidates, chosen } => {
                self.candidates = candidates.clone();
                self.chosen = Some(*chosen);
            }
            EventBody::StrategyRun { .. } => {}
            EventBody::OracleReviewed { round, report } => self.oracle_reports.push((*round, report.clone())),
            EventBody::StatusChanged { status, reason } => {
                if self.status.is_terminal() {
                    return Err(SessionError::Store(format!(
                        "status change after terminal status {:?}",
                        self.status
                    )));
                }
                self.status = *status;
                if *status == SessionStatus::Failed {
                    self.failure = reason.clone().or(self.failure.take());
                    self.op_status = OpStatus::Failed;
                } else {
                    self.op_status = OpStatus::Ready;
                }
            }
            EventBody::Questionnaire { answers } => self.questionnaires.push(answers.clone()),
        }
        Ok(())
    }

    pub fn latest_solution(&self) -> Option<&Solution> {
        self.rounds.last().map(|r| &r.solution)
    }

    /// Rounds driven by feedback, i.e. everything after the initial proposal.
    pub fn feedback_rounds(&self) -> usize {
        self.rounds.len().saturating_sub(1)
    }

    /// Every turn's trace concatenated, in order.
    pub fn stitched_trace(&self) -> ThinkingTrace {
        ThinkingTrace::from_texts(
            self.rounds
                .iter()
                .flat_map(|r| r.solution.trace.steps.iter().map(|s| s.text.clone())),
        )
    }

    /// The trace that evaluation should score for this protocol.
    pub fn evaluated_trace(&self) -> Option<ThinkingTrace> {
        match self.protocol {
            Protocol::Dialogue => Some(self.stitched_trace()),
            _ => self.latest_solution().map(|s| s.trace.clone()),
        }
    }

    /// Step diff from each round's predecessor; round 0 has none.
    pub fn round_diffs(&self) -> Vec<Option<TraceDiff>> {
        self.rounds
            .iter()
            .enumerate()
            .map(|(i, r)| {
                (i > 0).then(|| diff_traces(&self.rounds[i - 1].solution.trace, &r.solution.trace))
            })
            .collect()
    }
}

/// Directory of `<id>.jsonl` event files, or an in-memory map.
#[derive(Debug)]
pub struct SessionStore {
    dir: Option<PathBuf>,
    inner: Mutex<StoreState>,
}

#[derive(Debug, Default)]
struct StoreState {
    next_seq: HashMap<String, u64>,
    memory: HashMap<String, Vec<SessionEvent>>,
}

impl SessionStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, SessionError> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: Some(dir.as_ref().to_path_buf()),
            inner: Mutex::new(StoreState::default()),
        })
    }

    pub fn in_memory() -> Self {
        Self {
            dir: None,
            inner: Mutex::new(StoreState::default()),
        }
    }

    fn path(&self, id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }

    fn valid_id(id: &str) -> bool {
        !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    }

    pub fn exists(&self, id: &str) -> bool {
        if !Self::valid_id(id) {
            return false;
        }
        match self.path(id) {
            Some(p) => p.exists(),
            None => self.inner.lock().expect("store poisoned").memory.contains_key(id),
        }
    }

    pub fn append(&self, id: &str, body: EventBody) -> Result<SessionEvent, SessionError> {
        if !Self::valid_id(id) {
            return Err(SessionError::NotFound(id.to_string()));
        }
        let mut state = self.inner.lock().expect("store poisoned");
        let seq = match state.next_seq.get(id) {
            Some(s) => *s,
            None => match self.path(id) {
                Some(p) if p.exists() => self.read_file(&p)?.last().map_or(0, |e| e.seq + 1),
                _ => state.memory.get(id).and_then(|e| e.last()).map_or(0, |e| e.seq + 1),
            },
        };
        let event = SessionEvent { seq, ts: Utc::now(), body };
        match self.path(id) {
            Some(p) => {
                let mut line = serde_json::to_string(&event).map_err(|e| SessionError::Store(e.to_string()))?;
                line.push('\n');
                let mut f = OpenOptions::new().create(true).append(true).open(p)?;
                f.write_all(line.as_bytes())?;
                f.flush()?;
            }
            None => state.memory.entry(id.to_string()).or_default().push(event.clone()),
        }
        state.next_seq.insert(id.to_string(), seq + 1);
        Ok(event)
    }

    fn read_file(&self, path: &Path) -> Result<Vec<SessionEvent>, SessionError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut out = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| SessionError::Store(format!("{}:{}: {e}", path.display(), n + 1)))?,
            );
        }
        Ok(out)
    }

    pub fn events(&self, id: &str) -> Result<Vec<SessionEvent>, SessionError> {
        if !self.exists(id) {
            return Err(SessionError::NotFound(id.to_string()));
        }
        match self.path(id) {
            Some(p) => {
                let _state = self.inner.lock().expect("store poisoned");
                self.read_file(&p)
            }
            None => Ok(self.inner.lock().expect("store poisoned").memory[id].clone()),
        }
    }

    pub fn load(&self, id: &str) -> Result<SessionRecord, SessionError> {
        SessionRecord::from_events(&self.events(id)?)
    }

    pub fn ids(&self) -> Result<Vec<String>, SessionError> {
        let mut ids: Vec<String> = match &self.dir {
            Some(d) => fs::read_dir(d)?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let name = e.file_name().to_string_lossy().to_string();
                    name.strip_suffix(".jsonl").map(str::to_string)
                })
                .collect(),
            None => self.inner.lock().expect("store poisoned").memory.keys().cloned().collect(),
        };
        ids.sort();
        Ok(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub max_rounds: usize,
    /// Candidates for choose-one.
    pub choose_n: usize,
    pub strategy: Strategy,
    pub best_of_n: usize,
    pub refine_rounds: usize,
    pub mcts: MctsConfig,
    pub retrieval: RetrievalConfig,
    /// Most oracle findings turned into instructions per round.
    pub feedback_cap: usize,
    pub parallelism: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            choose_n: 4,
            strategy: Strategy::Plain,
            best_of_n: 4,
            refine_rounds: 3,
            mcts: MctsConfig::default(),
            retrieval: RetrievalConfig::default(),
            feedback_cap: 5,
            parallelism: 4,
        }
    }
}

/// Model-facing parts a session needs.
#[derive(Clone)]
pub struct Components {
    pub verifier: Verifier,
    pub editor: Editor,
    pub retriever: Gateway,
    pub corpus: Arc<dyn SearchBackend>,
    pub orm: Option<Gateway>,
    pub prm: Option<Gateway>,
}

/// Grades a choose-one candidate.
pub type Selector<'a> = dyn Fn(&Solution) -> Result<OracleReport, OracleError> + Sync + 'a;

/// Pass count first, then fewer failures, then the earlier candidate.
pub fn select_candidate(reports: &[Option<OracleReport>]) -> Option<usize> {
    use crate::oracle::Judgment;
    let mut best: Option<(usize, usize, usize)> = None;
    for (i, r) in reports.iter().enumerate() {
        let Some(r) = r else { continue };
        let (pass, fail) = (r.count(Judgment::Pass), r.count(Judgment::Fail));
        let better = match best {
            None => true,
            Some((_, bp, bf)) => pass > bp || (pass == bp && fail < bf),
        };
        if better {
            best = Some((i, pass, fail));
        }
    }
    best.map(|(i, _, _)| i)
}

/// Held while an operation runs on a session.
#[derive(Debug)]
pub struct OpGuard {
    id: String,
    busy: Arc<Mutex<HashSet<String>>>,
}

impl OpGuard {
    pub fn id(&self) -> &str {
        &self.id
    }
}

impl Drop for OpGuard {
    fn drop(&mut self) {
        self.busy.lock().expect("busy set poisoned").remove(&self.id);
    }
}

/// Outcome of the synchronous half of a feedback submission.
#[derive(Debug, Clone, PartialEq)]
pub enum FeedbackTicket {
    /// Empty feedback closed the session; no model work remains.
    Accepted(SessionRecord),
    Queued { round: usize, instructions: Vec<FeedbackInstruction> },
}

pub struct SessionEngine {
    components: Components,
    config: SessionConfig,
    store: Arc<SessionStore>,
    busy: Arc<Mutex<HashSet<String>>>,
}

impl SessionEngine {
    pub fn new(components: Components, config: SessionConfig, store: Arc<SessionStore>) -> Self {
        Self {
            components,
            config,
            store,
            busy: Arc::default(),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn components(&self) -> &Components {
        &self.components
    }

    pub fn load(&self, id: &str) -> Result<SessionRecord, SessionError> {
        self.store.load(id)
    }

    pub fn reserve(&self, id: &str) -> Result<OpGuard, SessionError> {
        if !self.store.exists(id) {
            return Err(SessionError::NotFound(id.to_string()));
        }
        self.reserve_unchecked(id)
    }

    fn reserve_unchecked(&self, id: &str) -> Result<OpGuard, SessionError> {
        let mut busy = self.busy.lock().expect("busy set poisoned");
        if !busy.insert(id.to_string()) {
            return Err(SessionError::Busy(id.to_string()));
        }
        Ok(OpGuard {
            id: id.to_string(),
            busy: self.busy.clone(),
        })
    }

    /// Validate and persist a new session; no model calls.
    pub fn create(
        &self,
        claim: Claim,
        labels: LabelSet,
        protocol: Protocol,
        evidence: Option<Vec<EvidenceDocument>>,
    ) -> Result<OpGuard, SessionError> {
        claim.validate()?;
        if labels.len() < 2 {
            return Err(ModelError::TooFewLabels(labels.len()).into());
        }
        if let Some(docs) = &evidence {
            docs.iter().try_for_each(EvidenceDocument::validate)?;
        }
        match protocol {
            Protocol::ChooseOne if self.config.choose_n < 2 => {
                return Err(SessionError::Precondition("choose-one needs N >= 2".into()))
            }
            Protocol::Autonomous => self.check_strategy()?,
            _ => {}
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let guard = self.reserve_unchecked(&id)?;
        self.store.append(
            &id,
            EventBody::Created {
                id: id.clone(),
                claim,
                labels,
                protocol,
                max_rounds: self.config.max_rounds,
                strategy: (protocol == Protocol::Autonomous).then_some(self.config.strategy),
                evidence,
            },
        )?;
        Ok(guard)
    }

    fn check_strategy(&self) -> Result<(), SessionError> {
        let missing = match self.config.strategy {
            Strategy::BestOfN if self.components.orm.is_none() => Some("an outcome reward model"),
            Strategy::Mcts if self.components.prm.is_none() => Some("a process reward model"),
            _ => None,
        };
        match missing {
            Some(what) => Err(SessionError::Precondition(format!(
                "strategy {:?} needs {what}",
                self.config.strategy
            ))),
            None => Ok(()),
        }
    }

    fn fail(&self, id: &str, reason: String) -> Result<(), SessionError> {
        self.store.append(
            id,
            EventBody::StatusChanged {
                status: SessionStatus::Failed,
                reason: Some(reason),
            },
        )?;
        Ok(())
    }

    /// Retrieve evidence and produce round 0. Errors mark the session failed.
    pub fn run_initial(&self, guard: &OpGuard, selector: Option<&Selector<'_>>) -> Result<SessionRecord, SessionError> {
        let id = guard.id();
        let record = self.store.load(id)?;
        if !record.rounds.is_empty() || record.status.is_terminal() {
            return Err(SessionError::Precondition("session already started".into()));
        }
        match self.initial(&record, selector) {
            Ok(()) => self.store.load(id),
            Err(e) => {
                self.fail(id, e.to_string())?;
                Err(e)
            }
        }
    }

    fn initial(&self, record: &SessionRecord, selector: Option<&Selector<'_>>) -> Result<(), SessionError> {
        let id = record.id.as_str();
        if record.protocol == Protocol::ChooseOne && selector.is_none() {
            return Err(SessionError::Precondition("choose-one needs a candidate selector".into()));
        }
        let (queries, evidence) = match &record.provided_evidence {
            Some(docs) => (
                QuerySet {
                    claim_id: record.claim.id.clone(),
                    queries: Vec::new(),
                },
                docs.clone(),
            ),
            None => {
                let r = retrieve_for_claim(
                    &record.claim,
                    self.components.corpus.as_ref(),
                    &self.components.retriever,
                    self.config.retrieval,
                )?;
                (r.queries, r.documents)
            }
        };
        self.store.append(
            id,
            EventBody::EvidenceRetrieved {
                queries,
                documents: evidence.clone(),
            },
        )?;

        let started_at = Utc::now();
        let verifier = &self.components.verifier;
        let (claim, labels) = (&record.claim, &record.labels);
        let (result, calls) = capture_calls(|| -> Result<_, SessionError> {
            match record.protocol {
                Protocol::TraceEdit | Protocol::Dialogue => {
                    Ok((verifier.propose(claim, &evidence, labels)?, None))
                }
                Protocol::ChooseOne => {
                    let selector = selector.expect("checked above");
                    let (solution, candidates, chosen) = self.choose(claim, &evidence, labels, selector)?;
                    Ok((solution, Some(EventBody::CandidatesGenerated { candidates, chosen })))
                }
                Protocol::Autonomous => {
                    let strategy = record.strategy.unwrap_or(Strategy::Plain);
                    let (solution, detail) = self.autonomous(strategy, claim, &evidence, labels)?;
                    Ok((solution, Some(EventBody::StrategyRun { strategy, detail })))
                }
            }
        });
        let (solution, extra) = result?;
        if let Some(extra) = extra {
            self.store.append(id, extra)?;
        }
        self.store.append(
            id,
            EventBody::RoundCompleted {
                round: RoundRecord {
                    index: 0,
                    feedback: Vec::new(),
                    plan: None,
                    solution,
                    started_at,
                    finished_at: Utc::now(),
                    calls: calls.iter().map(CallRef::from).collect(),
                },
            },
        )?;
        if matches!(record.protocol, Protocol::ChooseOne | Protocol::Autonomous) {
            self.store.append(
                id,
                EventBody::StatusChanged {
                    status: SessionStatus::Accepted,
                    reason: Some(format!("{:?} sessions close after their single round", record.protocol)),
                },
            )?;
        }
        Ok(())
    }

    fn choose(
        &self,
        claim: &Claim,
        evidence: &[EvidenceDocument],
        labels: &LabelSet,
        selector: &Selector<'_>,
    ) -> Result<(Solution, Vec<Candidate>, usize), SessionError> {
        let n = self.config.choose_n;
        if n < 2 {
            return Err(SessionError::Precondition("choose-one needs N >= 2".into()));
        }
        let mut candidates = Vec::with_capacity(n);
        for _ in 0..n {
            let c = match self.components.verifier.propose(claim, evidence, labels) {
                Ok(s) => match selector(&s) {
                    Ok(report) => Candidate { solution: Some(s), report: Some(report), error: None },
                    Err(e) => Candidate { solution: Some(s), report: None, error: Some(e.to_string()) },
                },
                Err(e) => Candidate { solution: None, report: None, error: Some(e.to_string()) },
            };
            candidates.push(c);
        }
        let reports: Vec<Option<OracleReport>> = candidates.iter().map(|c| c.report.clone()).collect();
        let Some(chosen) = select_candidate(&reports) else {
            let errors: Vec<String> = candidates.iter().filter_map(|c| c.error.clone()).collect();
            return Err(SessionError::Precondition(format!(
                "every choose-one candidate failed: {}",
                errors.join("; ")
            )));
        };
        let solution = candidates[chosen].solution.clone().expect("reported candidates have solutions");
        Ok((solution, candidates, chosen))
    }

    fn autonomous(
        &self,
        strategy: Strategy,
        claim: &Claim,
        evidence: &[EvidenceDocument],
        labels: &LabelSet,
    ) -> Result<(Solution, Value), SessionError> {
        let verifier = &self.components.verifier;
        Ok(match strategy {
            Strategy::Plain => (verifier.propose(claim, evidence, labels)?, Value::Null),
            Strategy::BestOfN => {
                let orm = self.components.orm.as_ref().ok_or_else(|| {
                    SessionError::Precondition("best-of-N needs an outcome reward model".into())
                })?;
                let out = scaling::best_of_n(verifier, orm, claim, evidence, labels, self.config.best_of_n)?;
                (out.solution().clone(), serde_json::to_value(&out).unwrap_or_default())
            }
            Strategy::SelfRefine => {
                let out = scaling::self_refine(verifier, claim, evidence, labels, self.config.refine_rounds)?;
                (out.solution.clone(), serde_json::to_value(&out).unwrap_or_default())
            }
            Strategy::Mcts => {
                let prm = self.components.prm.as_ref().ok_or_else(|| {
                    SessionError::Precondition("tree search needs a process reward model".into())
                })?;
                let out = scaling::mcts(verifier, prm, claim, evidence, labels, &self.config.mcts)?;
                (out.solution.clone(), serde_json::to_value(&out).unwrap_or_default())
            }
        })
    }

    /// Create and run round 0 in one call.
    pub fn start_session(
        &self,
        claim: Claim,
        labels: LabelSet,
        protocol: Protocol,
        evidence: Option<Vec<EvidenceDocument>>,
        selector: Option<&Selector<'_>>,
    ) -> Result<SessionRecord, SessionError> {
        let guard = self.create(claim, labels, protocol, evidence)?;
        self.run_initial(&guard, selector)
    }

    /// Synchronous half of a submission: validate and persist the feedback.
    pub fn begin_feedback(
        &self,
        guard: &OpGuard,
        instructions: Vec<FeedbackInstruction>,
    ) -> Result<FeedbackTicket, SessionError> {
        let id = guard.id();
        let record = self.store.load(id)?;
        if record.status.is_terminal() {
            return Err(SessionError::NotActive(record.status));
        }
        if record.rounds.is_empty() {
            return Err(SessionError::Precondition("the initial proposal has not finished".into()));
        }
        if !matches!(record.protocol, Protocol::TraceEdit | Protocol::Dialogue) {
            return Err(SessionError::Precondition(format!(
                "{:?} sessions take no feedback",
                record.protocol
            )));
        }
        if instructions.is_empty() {
            self.store.append(
                id,
                EventBody::StatusChanged {
                    status: SessionStatus::Accepted,
                    reason: Some("empty feedback".into()),
                },
            )?;
            return Ok(FeedbackTicket::Accepted(self.store.load(id)?));
        }
        if record.feedback_rounds() >= record.max_rounds {
            return Err(SessionError::RoundLimitExceeded { max: record.max_rounds });
        }
        let round = record.rounds.len();
        self.store.append(
            id,
            EventBody::FeedbackSubmitted {
                round,
                instructions: instructions.clone(),
            },
        )?;
        Ok(FeedbackTicket::Queued { round, instructions })
    }

    /// Model half of a submission. A failed round is retried once, then the session fails.
    pub fn complete_feedback(&self, guard: &OpGuard, ticket: FeedbackTicket) -> Result<SessionRecord, SessionError> {
        let id = guard.id();
        let (round, instructions) = match ticket {
            FeedbackTicket::Accepted(record) => return Ok(record),
            FeedbackTicket::Queued { round, instructions } => (round, instructions),
        };
        let record = self.store.load(id)?;
        let mut last_error = None;
        for attempt in 1..=2u32 {
            let started_at = Utc::now();
            let (result, calls) = capture_calls(|| self.feedback_round(&record, &instructions));
            match result {
                Ok((solution, plan)) => {
                    self.store.append(
                        id,
                        EventBody::RoundCompleted {
                            round: RoundRecord {
                                index: round,
                                feedback: instructions,
                                plan,
                                solution,
                                started_at,
                                finished_at: Utc::now(),
                                calls: calls.iter().map(CallRef::from).collect(),
                            },
                        },
                    )?;
                    return self.store.load(id);
                }
                Err(e) => {
                    tracing::warn!(session = id, round, attempt, "round failed: {e}");
                    self.store.append(
                        id,
                        EventBody::RoundFailed {
                            round,
                            attempt,
                            error: e.to_string(),
                        },
                    )?;
                    last_error = Some(e);
                }
            }
        }
        let e = last_error.expect("two attempts ran");
        self.fail(id, format!("round {round} failed twice: {e}"))?;
        Err(e)
    }

    pub fn submit_feedback(
        &self,
        id: &str,
        instructions: Vec<FeedbackInstruction>,
    ) -> Result<SessionRecord, SessionError> {
        let guard = self.reserve(id)?;
        let ticket = self.begin_feedback(&guard, instructions)?;
        self.complete_feedback(&guard, ticket)
    }

    fn feedback_round(
        &self,
        record: &SessionRecord,
        instructions: &[FeedbackInstruction],
    ) -> Result<(Solution, Option<EditPlan>), SessionError> {
        let verifier = &self.components.verifier;
        let previous = record.latest_solution().expect("round 0 exists");
        let empty = record.evidence.is_empty();
        let bundle = verifier.bundle(&record.claim, &record.evidence, &record.labels);
        match record.protocol {
            Protocol::TraceEdit => {
                let plan = self.components.editor.compile_plan(
                    &record.claim,
                    instructions,
                    &previous.trace,
                    &record.evidence,
                )?;
                let edited = apply_edits(&previous.trace, &plan.edits())?;
                let solution = verifier.continue_from(&edited, &bundle, &record.labels, empty)?;
                Ok((solution, Some(plan)))
            }
            Protocol::Dialogue => {
                let messages = dialogue_history(record, instructions, verifier);
                Ok((verifier.generate_chat(messages, &record.labels, empty)?, None))
            }
            other => Err(SessionError::Precondition(format!("{other:?} sessions take no feedback"))),
        }
    }

    /// Close an active session by the reviewer's decision.
    pub fn accept(&self, id: &str) -> Result<SessionRecord, SessionError> {
        let guard = self.reserve(id)?;
        let record = self.store.load(&guard.id)?;
        match record.status {
            SessionStatus::Accepted => Ok(record),
            SessionStatus::Active if record.rounds.is_empty() => {
                Err(SessionError::Precondition("the initial proposal has not finished".into()))
            }
            SessionStatus::Active => {
                self.store.append(
                    id,
                    EventBody::StatusChanged {
                        status: SessionStatus::Accepted,
                        reason: Some("accepted by reviewer".into()),
                    },
                )?;
                self.store.load(id)
            }
            other => Err(SessionError::NotActive(other)),
        }
    }

    pub fn exhaust(&self, id: &str) -> Result<SessionRecord, SessionError> {
        let guard = self.reserve(id)?;
        let record = self.store.load(&guard.id)?;
        if record.status.is_terminal() {
            return Err(SessionError::NotActive(record.status));
        }
        self.store.append(
            id,
            EventBody::StatusChanged {
                status: SessionStatus::Exhausted,
                reason: Some(format!("{} feedback rounds used without acceptance", record.feedback_rounds())),
            },
        )?;
        self.store.load(id)
    }

    pub fn record_questionnaire(&self, id: &str, answers: Value) -> Result<SessionEvent, SessionError> {
        if !self.store.exists(id) {
            return Err(SessionError::NotFound(id.to_string()));
        }
        self.store.append(id, EventBody::Questionnaire { answers })
    }

    /// Run one claim through the oracle-driven loop.
    pub fn run_oracle_loop(
        &self,
        item: &BatchItem,
        protocol: Protocol,
        oracle: &Oracle,
    ) -> ManifestEntry {
        let knowledge = &item.knowledge;
        let selector = |s: &Solution| {
            oracle.evaluate(
                OracleInput {
                    claim: &item.claim,
                    labels: &item.labels,
                    evidence: item.evidence.as_deref().unwrap_or(&[]),
                    solution: s,
                },
                knowledge,
            )
        };
        let guard = match self.create(item.claim.clone(), item.labels.clone(), protocol, item.evidence.clone()) {
            Ok(g) => g,
            Err(e) => return ManifestEntry::rejected(&item.claim.id, e),
        };
        let id = guard.id().to_string();
        let run = || -> Result<(), SessionError> {
            let mut record = self.run_initial(&guard, Some(&selector))?;
            while record.status == SessionStatus::Active {
                let solution = record.latest_solution().expect("round 0 exists").clone();
                let input = OracleInput {
                    claim: &record.claim,
                    labels: &record.labels,
                    evidence: &record.evidence,
                    solution: &solution,
                };
                let report = match oracle.evaluate(input, knowledge) {
                    Ok(r) => r,
                    Err(e) => {
                        self.fail(&id, format!("oracle: {e}"))?;
                        return Err(e.into());
                    }
                };
                let round = record.rounds.len() - 1;
                self.store.append(&id, EventBody::OracleReviewed { round, report: report.clone() })?;
                let feedback = if report.accepted() {
                    Vec::new()
                } else {
                    report_to_feedback(&report, self.config.feedback_cap)
                };
                if !feedback.is_empty() && record.feedback_rounds() >= record.max_rounds {
                    self.exhaust_locked(&id, &record)?;
                    break;
                }
                let ticket = self.begin_feedback(&guard, feedback)?;
                record = self.complete_feedback(&guard, ticket)?;
            }
            Ok(())
        };
        let outcome = run();
        match self.store.load(&id) {
            Ok(record) => ManifestEntry::from_record(&record, outcome.err()),
            Err(e) => ManifestEntry::rejected(&item.claim.id, e),
        }
    }

    fn exhaust_locked(&self, id: &str, record: &SessionRecord) -> Result<(), SessionError> {
        self.store.append(
            id,
            EventBody::StatusChanged {
                status: SessionStatus::Exhausted,
                reason: Some(format!("{} feedback rounds used without acceptance", record.feedback_rounds())),
            },
        )?;
        Ok(())
    }

    /// Every claim through the oracle loop, `parallelism` sessions at a time.
    pub fn run_batch(&self, items: &[BatchItem], protocol: Protocol, oracle: &Oracle) -> BatchManifest {
        let workers = self.config.parallelism.clamp(1, items.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<ManifestEntry>>> = Mutex::new(vec![None; items.len()]);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(item) = items.get(i) else { break };
                    let entry = self.run_oracle_loop(item, protocol, oracle);
                    slots.lock().expect("manifest poisoned")[i] = Some(entry);
                });
            }
        });
        let sessions = slots
            .into_inner()
            .expect("manifest poisoned")
            .into_iter()
            .map(|e| e.expect("every item ran"))
            .collect();
        BatchManifest {
            protocol,
            strategy: (protocol == Protocol::Autonomous).then_some(self.config.strategy),
            created_at: Utc::now(),
            sessions,
        }
    }

    /// Re-run a recorded session's inputs; with a rewound scripted backend the
    /// solutions come out identical.
    pub fn replay(&self, original: &SessionRecord, selector: Option<&Selector<'_>>) -> Result<SessionRecord, SessionError> {
        let guard = self.create(
            original.claim.clone(),
            original.labels.clone(),
            original.protocol,
            original.provided_evidence.clone(),
        )?;
        let mut record = self.run_initial(&guard, selector)?;
        for round in original.rounds.iter().skip(1) {
            let ticket = self.begin_feedback(&guard, round.feedback.clone())?;
            record = self.complete_feedback(&guard, ticket)?;
        }
        Ok(record)
    }
}

/// Running dialogue: the initial prompt, then each answer followed by the feedback it got.
pub fn dialogue_history(
    record: &SessionRecord,
    next_feedback: &[FeedbackInstruction],
    verifier: &Verifier,
) -> Vec<Message> {
    let markers = &verifier.config().markers;
    let template = &verifier.config().templates.dialogue_feedback;
    let mut messages = verifier.bundle(&record.claim, &record.evidence, &record.labels).messages();
    let feedback_turns = record
        .rounds
        .iter()
        .skip(1)
        .map(|r| r.feedback.as_slice())
        .chain(std::iter::once(next_feedback));
    for (round, feedback) in record.rounds.iter().zip(feedback_turns) {
        messages.push(Message::assistant(render_solution(&round.solution, markers)));
        messages.push(Message::user(render_feedback_turn(template, feedback)));
    }
    messages
}

pub fn render_feedback_turn(template: &str, feedback: &[FeedbackInstruction]) -> String {
    let listed: Vec<String> = feedback.iter().map(|f| format!("- {}", f.text.trim())).collect();
    template.trim().replace("{feedback}", &listed.join("\n"))
}

/// One dataset claim for a batch run. Gold knowledge goes only to the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub claim: Claim,
    pub labels: LabelSet,
    pub knowledge: SyntheticExpertKnowledge,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Vec<EvidenceDocument>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub claim_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub status: SessionStatus,
    pub feedback_rounds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_solution: Option<Solution>,
    /// Trace that evaluation scores (stitched for dialogue sessions).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluated_trace: Option<ThinkingTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ManifestEntry {
    fn rejected(claim_id: &str, e: SessionError) -> Self {
        Self {
            claim_id: claim_id.to_string(),
            session_id: None,
            status: SessionStatus::Failed,
            feedback_rounds: 0,
            final_solution: None,
            evaluated_trace: None,
            error: Some(e.to_string()),
        }
    }

    fn from_record(record: &SessionRecord, error: Option<SessionError>) -> Self {
        Self {
            claim_id: record.claim.id.clone(),
            session_id: Some(record.id.clone()),
            status: record.status,
            feedback_rounds: record.feedback_rounds(),
            final_solution: record.latest_solution().cloned(),
            evaluated_trace: record.evaluated_trace(),
            error: error.map(|e| e.to_string()).or_else(|| record.failure.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub protocol: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    pub created_at: DateTime<Utc>,
    pub sessions: Vec<ManifestEntry>,
}

impl BatchManifest {
    pub fn failures(&self) -> usize {
        self.sessions.iter().filter(|s| s.status == SessionStatus::Failed).count()
    }
}
