//! Layered TOML configuration. Precedence, lowest first: the file, then
//! `TRACECHECK__section__key` environment variables, then `--set section.key=value`
//! flags. Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};
use tracecheck_core::editor::EditorConfig;
use tracecheck_core::gateway::{Capabilities, Role};
use tracecheck_core::session::SessionConfig;
use tracecheck_core::verifier::VerifierConfig;

pub const ENV_PREFIX: &str = "TRACECHECK__";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected key.path=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Http,
    Scripted,
}

fn default_timeout() -> u64 {
    120
}

fn default_in_flight() -> usize {
    4
}

fn all_capabilities() -> Capabilities {
    Capabilities::all()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub kind: ProfileKind,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    /// Scripted transcript; required for `kind = "scripted"`.
    #[serde(default)]
    pub transcript: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "all_capabilities")]
    pub capabilities: Capabilities,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    Overlap,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub judge: JudgeKind,
    /// Token-overlap threshold for the offline judge.
    pub threshold: f64,
    /// Replacement rubric rows (JSON).
    pub rubric: Option<PathBuf>,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            judge: JudgeKind::Overlap,
            threshold: 0.6,
            rubric: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreSection {
    /// Session event logs; in-memory when unset.
    pub sessions_dir: Option<PathBuf>,
    /// Corpus JSONL, used when no index is given.
    pub corpus: Option<PathBuf>,
    /// Prebuilt index sidecar.
    pub index: Option<PathBuf>,
    /// Prompt template overrides.
    pub prompts_dir: Option<PathBuf>,
    /// Default output directory for batch and simulate.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub profiles: BTreeMap<String, ProfileConfig>,
    /// Role name to profile name.
    pub roles: BTreeMap<String, String>,
    pub session: SessionConfig,
    pub editor: EditorConfig,
    pub verifier: VerifierConfig,
    pub oracle: OracleSection,
    pub store: StoreSection,
    pub server: ServerSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            profiles: BTreeMap::new(),
            roles: BTreeMap::new(),
            session: SessionConfig::default(),
            editor: EditorConfig::default(),
            verifier: VerifierConfig::default(),
            oracle: OracleSection::default(),
            store: StoreSection::default(),
            server: ServerSection::default(),
        }
    }
}

/// Roles every session needs.
pub const REQUIRED_ROLES: [Role; 3] = [Role::Verifier, Role::Editor, Role::Retriever];

fn parse_role(name: &str) -> Option<Role> {
    Role::ALL.into_iter().find(|r| r.as_str() == name)
}

/// Parse a raw override as a TOML value, falling back to a bare string.
fn override_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, path: &[&str], value: Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut table = root;
    for key in parents {
        let slot = table.entry(key.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = slot.as_table_mut().ok_or_else(|| format!("{key} is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn apply_override(root: &mut Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let path: Vec<&str> = key.split('.').map(str::trim).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(format!("{key}={raw}")));
    }
    set_path(root, &path, override_value(raw)).map_err(|e| ConfigError::Invalid(format!("override {key}: {e}")))
}

impl AppConfig {
    /// Read `path` (if any), layer `env` and `sets` on top, resolve and validate.
    pub fn load<I>(path: Option<&Path>, env: I, sets: &[String]) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                let table: Table = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (table, base)
            }
            None => (Table::new(), PathBuf::from(".")),
        };

        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_lowercase().replace("__", "."), v)))
            .collect();
        env.sort();
        for (key, value) in &env {
            apply_override(&mut table, key, value)?;
        }
        for set in sets {
            let (key, value) = set.split_once('=').ok_or_else(|| ConfigError::Override(set.clone()))?;
            apply_override(&mut table, key, value)?;
        }

        let mut config: AppConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.resolve_paths(&base);
        config.validate()?;
        Ok(config)
    }

    /// Load using the process environment.
    pub fn load_from_env(path: Option<&Path>, sets: &[String]) -> Result<Self, ConfigError> {
        Self::load(path, std::env::vars(), sets)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for profile in self.profiles.values_mut() {
            profile.transcript.as_mut().map(fix);
        }
        let s = &mut self.store;
        for p in [&mut s.sessions_dir, &mut s.corpus, &mut s.index, &mut s.prompts_dir, &mut s.out_dir] {
            p.as_mut().map(fix);
        }
        self.oracle.rubric.as_mut().map(fix);
    }

    /// Profile name assigned to `role`, if any.
    pub fn profile_for(&self, role: Role) -> Option<(&str, &ProfileConfig)> {
        let name = self.roles.get(role.as_str())?;
        self.profiles.get(name).map(|p| (name.as_str(), p))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        for (name, p) in &self.profiles {
            match p.kind {
                ProfileKind::Http if p.endpoint.trim().is_empty() => {
                    return invalid(format!("profile {name}: http profiles need an endpoint"))
                }
                ProfileKind::Scripted if p.transcript.is_none() => {
                    return invalid(format!("profile {name}: scripted profiles need a transcript"))
                }
                _ => {}
            }
            if p.timeout_secs == 0 || p.max_in_flight == 0 {
                return invalid(format!("profile {name}: timeout_secs and max_in_flight must be positive"));
            }
            if !p.capabilities.any() {
                return invalid(format!("profile {name} declares no capability"));
            }
        }
        for (role, profile) in &self.roles {
            if parse_role(role).is_none() {
                return invalid(format!("unknown role {role:?}"));
            }
            if !self.profiles.contains_key(profile) {
                return invalid(format!("role {role} refers to unknown profile {profile:?}"));
            }
        }
        for role in REQUIRED_ROLES {
            if !self.roles.contains_key(role.as_str()) {
                return invalid(format!("role {role} has no profile"));
            }
        }
        if self.oracle.judge == JudgeKind::Model && !self.roles.contains_key(Role::Oracle.as_str()) {
            return invalid("oracle.judge = \"model\" needs an oracle role".into());
        }
        let s = &self.session;
        for (what, v) in [
            ("session.max_rounds", s.max_rounds),
            ("session.choose_n", s.choose_n),
            ("session.best_of_n", s.best_of_n),
            ("session.refine_rounds", s.refine_rounds),
            ("session.feedback_cap", s.feedback_cap),
            ("session.parallelism", s.parallelism),
            ("session.retrieval.max_queries", s.retrieval.max_queries),
            ("session.retrieval.per_query_k", s.retrieval.per_query_k),
            ("session.retrieval.overall_cap", s.retrieval.overall_cap),
            ("session.mcts.budget", s.mcts.budget),
            ("session.mcts.branching", s.mcts.branching),
            ("editor.samples", self.editor.samples),
            ("verifier.evidence_char_budget", self.verifier.evidence_char_budget),
        ] {
            if v == 0 {
                return invalid(format!("{what} must be positive"));
            }
        }
        if self.verifier.max_tokens == 0 || self.editor.max_tokens == 0 {
            return invalid("max_tokens must be positive".into());
        }
        if !(self.oracle.threshold > 0.0 && self.oracle.threshold <= 1.0) {
            return invalid(format!("oracle.threshold {} is outside (0, 1]", self.oracle.threshold));
        }
        if self.server.bind.parse::<SocketAddr>().is_err() {
            return invalid(format!("server.bind {:?} is not a socket address", self.server.bind));
        }
        Ok(())
    }
}
