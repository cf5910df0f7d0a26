//! The simulation event log.

use crate::geo::{GeoPoint, LocalPoint};
use crate::nodes::BaseReport;
use crate::wire::{AlertKind, MsgType, NodeId, Severity, VruClass};
use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, Write};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvisoryAction {
    /// The operator command was accepted by the base station.
    Issued,
    /// The target RSU picked it up and started broadcasting.
    Delivered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventDetail {
    Tx {
        seq: u16,
        msg_type: MsgType,
        bytes: usize,
    },
    Rx {
        from: NodeId,
        seq: u16,
        msg_type: MsgType,
        distance_m: f64,
        los: bool,
    },
    Drop {
        from: NodeId,
        seq: u16,
        msg_type: MsgType,
        distance_m: f64,
        los: bool,
    },
    AlertRaised {
        seq: u16,
        alert: AlertKind,
        subject: Option<NodeId>,
        location: Option<LocalPoint>,
        severity: Severity,
    },
    AlertReceived {
        seq: u16,
        from: NodeId,
        alert: AlertKind,
        subject: Option<NodeId>,
        /// Time from the alert condition holding to it reaching the feed.
        latency_ms: u64,
    },
    Advisory {
        id: u32,
        action: AdvisoryAction,
        alert: AlertKind,
        remaining_ms: u64,
    },
    BaseReport(BaseReport),
    VruEvent {
        class: VruClass,
        location: GeoPoint,
        duration_ms: u64,
    },
}

impl EventDetail {
    pub fn kind_name(&self) -> &'static str {
        match self {
            EventDetail::Tx { .. } => "TX",
            EventDetail::Rx { .. } => "RX",
            EventDetail::Drop { .. } => "DROP",
            EventDetail::AlertRaised { .. } => "ALERT_RAISED",
            EventDetail::AlertReceived { .. } => "ALERT_RECEIVED",
            EventDetail::Advisory { .. } => "ADVISORY",
            EventDetail::BaseReport(_) => "BASE_REPORT",
            EventDetail::VruEvent { .. } => "VRU_EVENT",
        }
    }

    /// Frame sequence number the record refers to; 0 when there is none.
    pub fn seq(&self) -> u16 {
        match self {
            EventDetail::Tx { seq, .. }
            | EventDetail::Rx { seq, .. }
            | EventDetail::Drop { seq, .. }
            | EventDetail::AlertRaised { seq, .. }
            | EventDetail::AlertReceived { seq, .. } => *seq,
            _ => 0,
        }
    }
}

/// One line of `events.ndjson`: `{"t", "node", "kind", "detail"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogRecord {
    pub t: u64,
    pub node: NodeId,
    #[serde(flatten)]
    pub detail: EventDetail,
}

impl EventLogRecord {
    pub fn sort_key(&self) -> (u64, NodeId, u16) {
        (self.t, self.node, self.detail.seq())
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_ndjson<W: Write>(mut w: W, records: &[EventLogRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads an event log; blank lines are skipped, errors carry the 1-based line number.
pub fn read_ndjson<R: BufRead>(r: R) -> Result<Vec<EventLogRecord>, LogError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| LogError::Parse { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}
