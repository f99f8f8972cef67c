//! Run records: an append-only JSON-lines event log whose first line is a
//! header naming the run, the scenario digest and the seed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use agora_core::messaging::Envelope;
use agora_core::{Rational, TaskId, Tick};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::engine::{Command, RunMode};

/// One log line: `{"tick","event","envelope"?,"detail"?}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogLine {
    pub tick: Tick,
    pub event: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<Envelope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

impl LogLine {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }

    pub fn detail_str(&self, key: &str) -> Option<&str> {
        self.detail.as_ref()?.get(key)?.as_str()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub run_id: String,
    pub scenario_digest: String,
    pub seed: u64,
    pub mode: RunMode,
    /// Where the scenario was loaded from, if anywhere.
    #[serde(default)]
    pub scenario: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Provisioned,
    Unresolvable,
    Abandoned,
    WorkflowFailed,
}

impl Outcome {
    /// CLI exit status for a finished run.
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Provisioned | Outcome::Abandoned => 0,
            Outcome::Unresolvable | Outcome::WorkflowFailed => 2,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Outcome::Provisioned => "provisioned",
            Outcome::Unresolvable => "unresolvable",
            Outcome::Abandoned => "abandoned",
            Outcome::WorkflowFailed => "workflow_failed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeDetail {
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<TaskId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub identification_rounds: u64,
    pub critique_rounds_used: u64,
    pub tasks: u64,
    pub contracts: u64,
    pub total_price: Rational,
    pub social_welfare: Rational,
    pub reassignments: u64,
    pub wall_ticks: Tick,
}

fn rational_at(value: Option<&Value>) -> Option<Rational> {
    serde_json::from_value(value?.clone()).ok()
}

impl Metrics {
    /// Recomputes every metric from the event lines alone.
    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a LogLine>) -> Metrics {
        let mut m = Metrics::default();
        let mut prices: BTreeMap<String, Rational> = BTreeMap::new();
        let mut formed = 0u64;
        for line in events {
            m.wall_ticks = m.wall_ticks.max(line.tick);
            let detail = line.detail.as_ref();
            match line.event.as_str() {
                "identification_round" => m.identification_rounds += 1,
                "critique_round" => m.critique_rounds_used += 1,
                "workflow" => {
                    m.tasks = detail
                        .and_then(|d| d.get("workflow"))
                        .and_then(|w| w.get("tasks"))
                        .and_then(Value::as_array)
                        .map_or(0, |t| t.len() as u64);
                }
                "contract" => {
                    formed += 1;
                    let contract = detail.and_then(|d| d.get("contract"));
                    let task = contract
                        .and_then(|c| c.get("task_id"))
                        .and_then(Value::as_str);
                    let price = rational_at(contract.and_then(|c| c.get("price")));
                    if let (Some(task), Some(price)) = (task, price) {
                        prices.insert(task.to_string(), price);
                    }
                }
                "reassign" => m.reassignments += 1,
                "utilities" => {
                    if let Some(w) = rational_at(detail.and_then(|d| d.get("social_welfare"))) {
                        m.social_welfare = w;
                    }
                }
                _ => {}
            }
        }
        m.contracts = formed - m.reassignments.min(formed);
        m.total_price = prices.values().copied().sum();
        m
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("cannot read record: {0}")]
    Io(#[from] std::io::Error),
    #[error("record is empty")]
    Empty,
    #[error("malformed record line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("record has no terminal outcome")]
    NonTerminalRecord,
    #[error("no stored scenario has digest {0}")]
    UnknownDigest(String),
    #[error("replay diverged at line {line}")]
    ReplayDivergence {
        line: usize,
        expected: Option<String>,
        actual: Option<String>,
    },
    #[error("replay failed: {0}")]
    Replay(String),
}

/// A parsed record. `lines` are the raw JSON texts, byte for byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRecord {
    pub header: Header,
    pub lines: Vec<String>,
    pub events: Vec<LogLine>,
}

impl RunRecord {
    pub fn from_lines(lines: Vec<String>) -> Result<RunRecord, RecordError> {
        let mut events = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            let parsed: LogLine =
                serde_json::from_str(line).map_err(|e| RecordError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            events.push(parsed);
        }
        let first = events.first().ok_or(RecordError::Empty)?;
        if first.event != "run" {
            return Err(RecordError::Malformed {
                line: 1,
                message: "first line is not a run header".into(),
            });
        }
        let header: Header = serde_json::from_value(first.detail.clone().unwrap_or(Value::Null))
            .map_err(|e| RecordError::Malformed {
                line: 1,
                message: e.to_string(),
            })?;
        Ok(RunRecord {
            header,
            lines,
            events,
        })
    }

    /// Parses JSONL text. An unterminated final line is treated as a torn
    /// append and ignored; any other malformed line is an error.
    pub fn parse(text: &str) -> Result<RunRecord, RecordError> {
        let mut lines: Vec<String> = Vec::new();
        let mut rest = text;
        while let Some(end) = rest.find('\n') {
            let line = &rest[..end];
            if !line.trim().is_empty() {
                lines.push(line.to_string());
            }
            rest = &rest[end + 1..];
        }
        if !rest.trim().is_empty() && serde_json::from_str::<LogLine>(rest).is_ok() {
            lines.push(rest.to_string());
        }
        RunRecord::from_lines(lines)
    }

    pub fn read(path: &Path) -> Result<RunRecord, RecordError> {
        RunRecord::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), RecordError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// SHA-256 over the JSONL text.
    pub fn log_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn outcome(&self) -> Option<OutcomeDetail> {
        let last = self.events.last()?;
        if last.event != "outcome" {
            return None;
        }
        serde_json::from_value(last.detail.clone()?).ok()
    }

    /// Commands accepted during an interactive run, in order.
    pub fn commands(&self) -> Result<Vec<Command>, RecordError> {
        self.events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.event == "command")
            .map(|(i, e)| {
                let value = e
                    .detail
                    .as_ref()
                    .and_then(|d| d.get("command"))
                    .cloned()
                    .unwrap_or(Value::Null);
                serde_json::from_value(value).map_err(|err| RecordError::Malformed {
                    line: i + 1,
                    message: err.to_string(),
                })
            })
            .collect()
    }
}

/// Metrics of a terminal record, recomputed from its events.
pub fn report(record: &RunRecord) -> Result<Metrics, RecordError> {
    if record.outcome().is_none() {
        return Err(RecordError::NonTerminalRecord);
    }
    Ok(Metrics::from_events(&record.events))
}

/// First 1-based line where two logs differ.
pub fn first_divergence(expected: &[String], actual: &[String]) -> Option<usize> {
    let n = expected.len().max(actual.len());
    (0..n)
        .find(|&i| expected.get(i) != actual.get(i))
        .map(|i| i + 1)
}
