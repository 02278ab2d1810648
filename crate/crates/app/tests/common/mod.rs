#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tracecheck::config::AppConfig;
use tracecheck::wiring::App;
use tracecheck_core::eval::{load_dataset, DatasetRecord};

pub fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn scripted_config() -> PathBuf {
    workspace().join("config/scripted.toml")
}

pub fn fixture(name: &str) -> PathBuf {
    workspace().join("fixtures/scripted").join(name)
}

pub fn fixture_dataset() -> Vec<DatasetRecord> {
    load_dataset(fixture("dataset.jsonl")).expect("fixture dataset").records
}

/// A fresh app over the scripted fixture; every call starts with rewound cursors.
pub fn scripted_app(sets: &[&str]) -> App {
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    let config = AppConfig::load(Some(&scripted_config()), std::iter::empty(), &sets).expect("scripted config");
    App::build(config).expect("scripted app")
}
