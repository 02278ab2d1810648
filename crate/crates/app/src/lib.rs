//! CLI and HTTP service around the collaborative verification engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod questionnaire;
pub mod wiring;
