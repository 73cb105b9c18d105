//! Client-visible output: rendered lines with the tick and observer that
//! saw them.

use serde::{Deserialize, Serialize};

use crate::topology::Ticks;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: Ticks,
    /// A client nick, or `&channel@SERVER` for a server's notice log.
    pub observer: String,
    pub line: String,
}

pub fn notice_observer(server: &str) -> String {
    format!("&channel@{server}")
}

/// One JSON object per line.
pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> serde_json::Result<Vec<TraceRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Lines seen by `observer`, in order.
pub fn lines_for<'a>(records: &'a [TraceRecord], observer: &str) -> Vec<&'a str> {
    records
        .iter()
        .filter(|r| r.observer == observer)
        .map(|r| r.line.as_str())
        .collect()
}
