//! Runtime for the agora marketplace: scenario files, the run engine,
//! JSON-lines run records and the HTTP API.

pub mod api;
pub mod engine;
pub mod record;
pub mod scenario;

use serde::{Deserialize, Serialize};

/// Lifecycle phase of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Identification,
    Planning,
    Provisioning,
    Execution,
}
