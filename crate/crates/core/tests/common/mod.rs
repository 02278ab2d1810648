#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use tracecheck_core::editor::{Editor, EditorConfig};
use tracecheck_core::eval::{load_dataset, DatasetRecord};
use tracecheck_core::gateway::{CallLog, Capabilities, Gateway, ProviderProfile, Role, ScriptedTransport};
use tracecheck_core::retrieval::EvidenceCorpus;
use tracecheck_core::session::{Components, SessionConfig, SessionEngine, SessionStore};
use tracecheck_core::verifier::{Verifier, VerifierConfig};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scripted")
}

pub fn fixture_transport() -> ScriptedTransport {
    ScriptedTransport::from_file(fixture_dir().join("transcript.json")).expect("fixture transcript")
}

pub fn fixture_dataset() -> Vec<DatasetRecord> {
    load_dataset(fixture_dir().join("dataset.jsonl")).expect("fixture dataset").records
}

pub fn fixture_corpus() -> EvidenceCorpus {
    EvidenceCorpus::load_jsonl(fixture_dir().join("corpus.jsonl")).expect("fixture corpus")
}

pub struct Rig {
    pub engine: SessionEngine,
    pub transport: Arc<ScriptedTransport>,
    pub log: CallLog,
}

pub fn gateway(role: Role, name: &str, transport: &Arc<ScriptedTransport>, log: &CallLog) -> Gateway {
    Gateway::new(role, ProviderProfile::new(name, Capabilities::all()), transport.clone()).with_log(log.clone())
}

pub fn rig_with(
    transport: ScriptedTransport,
    corpus: EvidenceCorpus,
    config: SessionConfig,
    editor: EditorConfig,
) -> Rig {
    let transport = Arc::new(transport);
    let log = CallLog::new();
    let components = Components {
        verifier: Verifier::new(gateway(Role::Verifier, "verifier", &transport, &log), VerifierConfig::default()),
        editor: Editor::new(
            gateway(Role::Editor, "editor", &transport, &log),
            Some(gateway(Role::Reward, "reward", &transport, &log)),
            editor,
        ),
        retriever: gateway(Role::Retriever, "retriever", &transport, &log),
        corpus: Arc::new(corpus),
        orm: Some(gateway(Role::Orm, "orm", &transport, &log)),
        prm: Some(gateway(Role::Prm, "prm", &transport, &log)),
    };
    Rig {
        engine: SessionEngine::new(components, config, Arc::new(SessionStore::in_memory())),
        transport,
        log,
    }
}

pub fn rig(transport: ScriptedTransport) -> Rig {
    rig_with(transport, fixture_corpus(), SessionConfig::default(), EditorConfig::default())
}

/// Same script, cursors back at the start.
pub fn rewound(rig: &Rig, config: SessionConfig, editor: EditorConfig) -> Rig {
    rig_with(rig.transport.rewound(), fixture_corpus(), config, editor)
}
