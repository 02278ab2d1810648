//! Turns an [`AppConfig`] into live gateways, a corpus, a session engine and
//! an oracle.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tracecheck_core::editor::Editor;
use tracecheck_core::eval::Scorers;
use tracecheck_core::gateway::{
    CallLog, Gateway, HttpTransport, ProviderProfile, RetryPolicy, Role, ScriptedTransport, Transport,
};
use tracecheck_core::oracle::{parse_rubric, Oracle, OracleJudge};
use tracecheck_core::retrieval::EvidenceCorpus;
use tracecheck_core::session::{Components, SessionEngine, SessionStore};
use tracecheck_core::verifier::Verifier;

use crate::config::{AppConfig, JudgeKind, ProfileKind};

#[derive(Debug, Error)]
pub enum SetupError {
    #[error("profile {profile}: {message}")]
    Profile { profile: String, message: String },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("session store: {0}")]
    Store(String),
    #[error("prompt templates: {0}")]
    Prompts(String),
    #[error("oracle rubric: {0}")]
    Rubric(String),
}

struct Backend {
    transport: Arc<dyn Transport>,
    profile: ProviderProfile,
    retry: RetryPolicy,
}

pub struct App {
    pub config: AppConfig,
    pub engine: Arc<SessionEngine>,
    pub oracle: Oracle,
    pub scorers: Scorers,
    pub log: CallLog,
    /// Scripted transports by profile name, for inspection.
    pub scripted: BTreeMap<String, Arc<ScriptedTransport>>,
}

impl App {
    pub fn build(config: AppConfig) -> Result<Self, SetupError> {
        let log = CallLog::new();
        let mut backends = BTreeMap::new();
        let mut scripted = BTreeMap::new();
        for (name, p) in &config.profiles {
            let (transport, retry): (Arc<dyn Transport>, _) = match p.kind {
                ProfileKind::Http => (
                    Arc::new(HttpTransport::new(Duration::from_secs(p.timeout_secs))),
                    RetryPolicy::default(),
                ),
                ProfileKind::Scripted => {
                    let path = p.transcript.as_ref().expect("validated");
                    let t = ScriptedTransport::from_file(path).map_err(|e| SetupError::Profile {
                        profile: name.clone(),
                        message: e.to_string(),
                    })?;
                    let t = Arc::new(t);
                    scripted.insert(name.clone(), t.clone());
                    // replayed failures are deterministic; retry without sleeping
                    (t as Arc<dyn Transport>, RetryPolicy::immediate())
                }
            };
            let profile = ProviderProfile {
                name: name.clone(),
                endpoint: p.endpoint.clone(),
                model: p.model.clone(),
                capabilities: p.capabilities,
                max_in_flight: p.max_in_flight,
            };
            profile.validate().map_err(|e| SetupError::Profile {
                profile: name.clone(),
                message: e.to_string(),
            })?;
            backends.insert(name.clone(), Backend { transport, profile, retry });
        }

        let gateway = |role: Role| -> Option<Gateway> {
            let name = config.roles.get(role.as_str())?;
            let b = backends.get(name)?;
            Some(
                Gateway::new(role, b.profile.clone(), b.transport.clone())
                    .with_retry(b.retry.clone())
                    .with_log(log.clone()),
            )
        };
        let required = |role: Role| gateway(role).expect("required roles are validated");

        let corpus = match (&config.store.index, &config.store.corpus) {
            (Some(index), _) => EvidenceCorpus::load_index(index),
            (None, Some(jsonl)) => EvidenceCorpus::load_jsonl(jsonl),
            (None, None) => {
                tracing::warn!("no corpus configured; sessions will run without retrieved evidence");
                EvidenceCorpus::ingest(Vec::new())
            }
        }
        .map_err(|e| SetupError::Corpus(e.to_string()))?;

        let mut verifier_config = config.verifier.clone();
        if let Some(dir) = &config.store.prompts_dir {
            verifier_config.templates = verifier_config
                .templates
                .with_overrides(dir)
                .map_err(|e| SetupError::Prompts(e.to_string()))?;
        }

        let components = Components {
            verifier: Verifier::new(required(Role::Verifier), verifier_config),
            editor: Editor::new(required(Role::Editor), gateway(Role::Reward), config.editor.clone()),
            retriever: required(Role::Retriever),
            corpus: Arc::new(corpus),
            orm: gateway(Role::Orm),
            prm: gateway(Role::Prm),
        };
        let store = match &config.store.sessions_dir {
            Some(dir) => SessionStore::open(dir).map_err(|e| SetupError::Store(e.to_string()))?,
            None => SessionStore::in_memory(),
        };
        let engine = SessionEngine::new(components, config.session.clone(), Arc::new(store));

        let judge = match config.oracle.judge {
            JudgeKind::Overlap => OracleJudge::Overlap {
                threshold: config.oracle.threshold,
            },
            JudgeKind::Model => OracleJudge::Model(required(Role::Oracle)),
        };
        let mut oracle = Oracle::new(judge);
        if let Some(path) = &config.oracle.rubric {
            let text = std::fs::read_to_string(path).map_err(|e| SetupError::Rubric(format!("{}: {e}", path.display())))?;
            oracle = oracle.with_rows(parse_rubric(&text).map_err(|e| SetupError::Rubric(e.to_string()))?);
        }

        let scorers = Scorers {
            embed: gateway(Role::Embed),
            nli: gateway(Role::Nli),
            judge: gateway(Role::Judge),
        };
        Ok(Self {
            engine: Arc::new(engine),
            oracle,
            scorers,
            log,
            scripted,
            config,
        })
    }
}
