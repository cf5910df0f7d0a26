//! Packet-loss and alert-latency statistics computed from an event log.

use super::log::{EventDetail, EventLogRecord};
use crate::wire::{AlertKind, NodeId};
use std::collections::BTreeMap;
use std::fmt::Write;

pub const BIN_WIDTH_M: f64 = 50.0;

pub const LINK_CSV_HEADER: &str = "sender,receiver,bin_lo_m,bin_hi_m,sent,received,loss_pct";
pub const ALERT_CSV_HEADER: &str = "kind,count,median_latency_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct LinkBin {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub bin_lo_m: f64,
    pub bin_hi_m: f64,
    pub sent: u64,
    pub received: u64,
}

impl LinkBin {
    pub fn loss_pct(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            100.0 * (self.sent - self.received) as f64 / self.sent as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlertStat {
    pub kind: AlertKind,
    pub count: u64,
    pub median_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    /// Sorted by sender, receiver, then distance.
    pub links: Vec<LinkBin>,
    pub alerts: Vec<AlertStat>,
}

fn median(sorted: &[u64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Every (sender, receiver) pair a frame was offered to, binned by distance.
/// A frame counts as sent to a receiver whether it arrived or was dropped.
pub fn metrics(log: &[EventLogRecord]) -> MetricsReport {
    let mut bins: BTreeMap<(NodeId, NodeId, u64), (u64, u64)> = BTreeMap::new();
    let mut latencies: BTreeMap<AlertKind, Vec<u64>> = BTreeMap::new();
    for rec in log {
        match &rec.detail {
            EventDetail::Rx { from, distance_m, .. } | EventDetail::Drop { from, distance_m, .. } => {
                let bin = (distance_m / BIN_WIDTH_M).floor() as u64;
                let e = bins.entry((*from, rec.node, bin)).or_default();
                e.0 += 1;
                if matches!(rec.detail, EventDetail::Rx { .. }) {
                    e.1 += 1;
                }
            }
            EventDetail::AlertReceived { alert, latency_ms, .. } => {
                latencies.entry(*alert).or_default().push(*latency_ms);
            }
            _ => {}
        }
    }
    let links = bins
        .into_iter()
        .map(|((sender, receiver, bin), (sent, received))| LinkBin {
            sender,
            receiver,
            bin_lo_m: bin as f64 * BIN_WIDTH_M,
            bin_hi_m: (bin + 1) as f64 * BIN_WIDTH_M,
            sent,
            received,
        })
        .collect();
    let alerts = latencies
        .into_iter()
        .map(|(kind, mut l)| {
            l.sort_unstable();
            AlertStat { kind, count: l.len() as u64, median_latency_ms: median(&l) }
        })
        .collect();
    MetricsReport { links, alerts }
}

impl MetricsReport {
    pub fn links_csv(&self) -> String {
        let mut s = String::from(LINK_CSV_HEADER);
        s.push('\n');
        for b in &self.links {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.3}",
                b.sender,
                b.receiver,
                b.bin_lo_m,
                b.bin_hi_m,
                b.sent,
                b.received,
                b.loss_pct()
            );
        }
        s
    }

    pub fn alerts_csv(&self) -> String {
        let mut s = String::from(ALERT_CSV_HEADER);
        s.push('\n');
        for a in &self.alerts {
            let _ = writeln!(s, "{},{},{}", a.kind, a.count, a.median_latency_ms);
        }
        s
    }
}
