//! Collaborative claim verification over an editable thinking trace.

pub mod editor;
pub mod eval;
pub mod gateway;
pub mod model;
pub mod oracle;
pub mod retrieval;
pub mod scaling;
pub mod session;
pub mod text;
pub mod verifier;
