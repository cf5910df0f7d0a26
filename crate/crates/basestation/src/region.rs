//! The base station's view of its region, as a plain state machine.
//!
//! Every mutation takes the current time explicitly and returns the deltas
//! it caused, so the HTTP service, the in-process link and the tests all
//! drive the same code.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;
use v2x_core::geo::GeoPoint;
use v2x_core::nodes::BaseReport;
use v2x_core::uplink::{AdvisoryCommand, AdvisoryOrder, BaseLink, CommandError, LinkError, RsuDirectives};
use v2x_core::wire::{AlertKind, NodeId};

pub const DEFAULT_HISTORY: usize = 120;
pub const ALERT_TTL_MS: u64 = 5_000;
/// Lifetime of advisories issued automatically from brake detections.
pub const AUTO_ADVISORY_TTL_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    pub history: usize,
    pub alert_ttl_ms: u64,
    /// Issue ROUTE_BLOCKED as soon as an RSU reports a hard brake instead
    /// of waiting for an operator.
    pub auto_confirm_route_blocked: bool,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig { history: DEFAULT_HISTORY, alert_ttl_ms: ALERT_TTL_MS, auto_confirm_route_blocked: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSummary {
    pub id: NodeId,
    pub latest: BaseReport,
    pub history_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleDetail {
    pub id: NodeId,
    pub latest: BaseReport,
    /// Oldest first.
    pub history: Vec<BaseReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsuEntry {
    pub id: NodeId,
    pub position: Option<GeoPoint>,
    pub last_seen_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveAlert {
    pub kind: AlertKind,
    pub subject: NodeId,
    pub reported_by: NodeId,
    pub location: GeoPoint,
    pub first_seen_ms: u64,
    pub last_seen_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvisoryStatus {
    Pending,
    Delivered,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advisory {
    pub id: u32,
    pub kind: AlertKind,
    pub target_rsu: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
    pub issued_by: String,
    pub issued_at_ms: u64,
    pub expires_at_ms: u64,
    pub status: AdvisoryStatus,
}

impl Advisory {
    /// Moves the status forward; never backward.
    fn advance(&mut self, to: AdvisoryStatus) -> bool {
        if to > self.status {
            self.status = to;
            true
        } else {
            false
        }
    }
}

/// A hard-braking vehicle that may be blocking the road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteBlockCandidate {
    pub vehicle: NodeId,
    pub rsu: NodeId,
    pub location: GeoPoint,
    pub detected_at_ms: u64,
    /// Advisory issued for it, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advisory: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub accepted: u64,
    pub duplicates: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub now_ms: u64,
    pub vehicles: Vec<VehicleSummary>,
    pub rsus: Vec<RsuEntry>,
    pub alerts: Vec<ActiveAlert>,
    pub advisories: Vec<Advisory>,
    pub candidates: Vec<RouteBlockCandidate>,
    pub stats: IngestStats,
}

/// A change to the region view, in the order it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "snake_case")]
pub enum Delta {
    Vehicle(BaseReport),
    Rsu(RsuEntry),
    Alert(ActiveAlert),
    AlertCleared { kind: AlertKind, subject: NodeId },
    Advisory(Advisory),
    Candidate(RouteBlockCandidate),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IngestError {
    #[error("malformed report: {0}")]
    Malformed(String),
    #[error("invalid report: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdvisoryError {
    #[error("unknown RSU {0}")]
    UnknownRsu(NodeId),
    #[error(transparent)]
    Command(#[from] CommandError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Accepted,
    Duplicate,
}

#[derive(Debug, Clone)]
struct VehicleEntry {
    /// Sorted by timestamp, oldest first; the newest is `latest`.
    history: VecDeque<BaseReport>,
}

impl VehicleEntry {
    fn latest(&self) -> &BaseReport {
        self.history.back().expect("vehicle entries are never empty")
    }
}

#[derive(Debug, Clone, Default)]
pub struct RegionView {
    config: RegionConfig,
    vehicles: BTreeMap<NodeId, VehicleEntry>,
    rsus: BTreeMap<NodeId, RsuEntry>,
    alerts: BTreeMap<(AlertKind, NodeId), ActiveAlert>,
    advisories: BTreeMap<u32, Advisory>,
    candidates: Vec<RouteBlockCandidate>,
    stats: IngestStats,
    next_advisory: u32,
    now_ms: u64,
}

fn check_report(r: &BaseReport) -> Result<(), IngestError> {
    if !r.rsu.is_rsu() {
        return Err(IngestError::Invalid("rsu is not an RSU id"));
    }
    if r.vehicle.is_rsu() {
        return Err(IngestError::Invalid("vehicle is an RSU id"));
    }
    if GeoPoint::new(r.lat, r.lon).is_err() {
        return Err(IngestError::Invalid("lat/lon out of range"));
    }
    if !(r.speed.is_finite() && r.speed >= 0.0) {
        return Err(IngestError::Invalid("speed must be finite and non-negative"));
    }
    if !(r.heading.is_finite() && (0.0..360.0).contains(&r.heading)) {
        return Err(IngestError::Invalid("heading must be within [0, 360)"));
    }
    Ok(())
}

impl RegionView {
    pub fn new(config: RegionConfig) -> RegionView {
        RegionView { config, ..RegionView::default() }
    }

    pub fn config(&self) -> &RegionConfig {
        &self.config
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    /// Parses and ingests one NDJSON line.
    pub fn ingest_line(&mut self, line: &str, now: u64) -> (Result<IngestOutcome, IngestError>, Vec<Delta>) {
        match serde_json::from_str::<BaseReport>(line) {
            Ok(r) => self.ingest(r, now),
            Err(e) => {
                self.stats.rejected += 1;
                (Err(IngestError::Malformed(e.to_string())), Vec::new())
            }
        }
    }

    pub fn ingest(&mut self, mut report: BaseReport, now: u64) -> (Result<IngestOutcome, IngestError>, Vec<Delta>) {
        let mut deltas = self.advance_clock(now);
        if let Err(e) = check_report(&report) {
            self.stats.rejected += 1;
            return (Err(e), deltas);
        }
        report.kind = report.vehicle.kind();
        report.emergency = report.vehicle.is_emergency();
        report.alerts.sort();
        report.alerts.dedup();

        let cap = self.config.history.max(1);
        let entry = self.vehicles.entry(report.vehicle).or_insert_with(|| VehicleEntry { history: VecDeque::new() });
        let same_key = |r: &BaseReport| r.rsu == report.rsu && r.timestamp_ms == report.timestamp_ms;
        if entry.history.iter().any(same_key) {
            self.stats.duplicates += 1;
            return (Ok(IngestOutcome::Duplicate), deltas);
        }
        if entry.history.len() >= cap && entry.history.front().is_some_and(|old| old.timestamp_ms > report.timestamp_ms) {
            // Older than anything we still keep.
            self.stats.duplicates += 1;
            return (Ok(IngestOutcome::Duplicate), deltas);
        }
        let at = entry.history.partition_point(|r| r.timestamp_ms <= report.timestamp_ms);
        entry.history.insert(at, report.clone());
        while entry.history.len() > cap {
            entry.history.pop_front();
        }
        self.stats.accepted += 1;
        let is_latest = entry.latest() == &report;
        if is_latest {
            deltas.push(Delta::Vehicle(report.clone()));
        }

        match self.rsus.get_mut(&report.rsu) {
            Some(rsu) => rsu.last_seen_ms = rsu.last_seen_ms.max(report.timestamp_ms),
            None => {
                let rsu = RsuEntry { id: report.rsu, position: None, last_seen_ms: report.timestamp_ms };
                deltas.push(Delta::Rsu(rsu.clone()));
                self.rsus.insert(report.rsu, rsu);
            }
        }

        let location = GeoPoint { lat: report.lat, lon: report.lon };
        for &kind in &report.alerts {
            let fresh = !self.alerts.contains_key(&(kind, report.vehicle));
            let alert = self.alerts.entry((kind, report.vehicle)).or_insert(ActiveAlert {
                kind,
                subject: report.vehicle,
                reported_by: report.rsu,
                location,
                first_seen_ms: report.timestamp_ms,
                last_seen_ms: report.timestamp_ms,
            });
            if report.timestamp_ms >= alert.last_seen_ms {
                alert.last_seen_ms = report.timestamp_ms;
                alert.reported_by = report.rsu;
                alert.location = location;
            }
            deltas.push(Delta::Alert(alert.clone()));

            // One candidate per braking episode.
            if kind == AlertKind::EmergencyBrake && fresh {
                let mut cand = RouteBlockCandidate {
                    vehicle: report.vehicle,
                    rsu: report.rsu,
                    location,
                    detected_at_ms: report.timestamp_ms,
                    advisory: None,
                };
                if self.config.auto_confirm_route_blocked {
                    let cmd = AdvisoryCommand {
                        kind: AlertKind::RouteBlocked,
                        target_rsu: report.rsu,
                        location: Some(location),
                        ttl_ms: AUTO_ADVISORY_TTL_MS,
                        operator: "auto".into(),
                    };
                    if let Ok((id, more)) = self.issue_advisory(&cmd, now) {
                        cand.advisory = Some(id);
                        deltas.extend(more);
                    }
                }
                deltas.push(Delta::Candidate(cand.clone()));
                self.candidates.push(cand);
            }
        }
        (Ok(IngestOutcome::Accepted), deltas)
    }

    /// Moves the clock forward and retires whatever has timed out.
    pub fn advance_clock(&mut self, now: u64) -> Vec<Delta> {
        self.now_ms = self.now_ms.max(now);
        let now = self.now_ms;
        let mut deltas = Vec::new();
        let ttl = self.config.alert_ttl_ms;
        let stale: Vec<(AlertKind, NodeId)> = self
            .alerts
            .iter()
            .filter(|(_, a)| now.saturating_sub(a.last_seen_ms) > ttl)
            .map(|(k, _)| *k)
            .collect();
        for key in stale {
            self.alerts.remove(&key);
            deltas.push(Delta::AlertCleared { kind: key.0, subject: key.1 });
        }
        for adv in self.advisories.values_mut() {
            if now >= adv.expires_at_ms && adv.advance(AdvisoryStatus::Expired) {
                deltas.push(Delta::Advisory(adv.clone()));
            }
        }
        deltas
    }

    pub fn issue_advisory(&mut self, cmd: &AdvisoryCommand, now: u64) -> Result<(u32, Vec<Delta>), AdvisoryError> {
        cmd.validate()?;
        if !self.rsus.contains_key(&cmd.target_rsu) {
            return Err(AdvisoryError::UnknownRsu(cmd.target_rsu));
        }
        let mut deltas = self.advance_clock(now);
        let now = self.now_ms;
        if cmd.kind == AlertKind::RouteClear {
            for adv in self.advisories.values_mut() {
                if adv.kind == AlertKind::RouteBlocked && adv.target_rsu == cmd.target_rsu && adv.advance(AdvisoryStatus::Expired) {
                    deltas.push(Delta::Advisory(adv.clone()));
                }
            }
        }
        self.next_advisory += 1;
        let adv = Advisory {
            id: self.next_advisory,
            kind: cmd.kind,
            target_rsu: cmd.target_rsu,
            location: cmd.location,
            issued_by: cmd.operator.clone(),
            issued_at_ms: now,
            expires_at_ms: now + cmd.ttl_ms,
            status: AdvisoryStatus::Pending,
        };
        deltas.push(Delta::Advisory(adv.clone()));
        self.advisories.insert(adv.id, adv);
        Ok((self.next_advisory, deltas))
    }

    /// An RSU checking in: records it and hands over its pending advisories.
    pub fn poll_rsu(&mut self, rsu: NodeId, position: Option<GeoPoint>, now: u64) -> (RsuDirectives, Vec<Delta>) {
        let mut deltas = self.advance_clock(now);
        let now = self.now_ms;
        match self.rsus.get_mut(&rsu) {
            Some(entry) => {
                entry.last_seen_ms = now;
                if position.is_some() && entry.position != position {
                    entry.position = position;
                    deltas.push(Delta::Rsu(entry.clone()));
                }
            }
            None => {
                let entry = RsuEntry { id: rsu, position, last_seen_ms: now };
                deltas.push(Delta::Rsu(entry.clone()));
                self.rsus.insert(rsu, entry);
            }
        }
        let mut directives = RsuDirectives::default();
        for adv in self.advisories.values_mut() {
            if adv.target_rsu == rsu && adv.status == AdvisoryStatus::Pending {
                adv.advance(AdvisoryStatus::Delivered);
                directives.advisories.push(AdvisoryOrder {
                    id: adv.id,
                    kind: adv.kind,
                    location: adv.location,
                    remaining_ms: adv.expires_at_ms - now,
                });
                deltas.push(Delta::Advisory(adv.clone()));
            }
        }
        (directives, deltas)
    }

    /// Restores an advisory or RSU from the persistence log.
    pub fn restore_advisory(&mut self, adv: Advisory) {
        self.next_advisory = self.next_advisory.max(adv.id);
        match self.advisories.get_mut(&adv.id) {
            Some(existing) => {
                existing.advance(adv.status);
            }
            None => {
                self.advisories.insert(adv.id, adv);
            }
        }
    }

    pub fn restore_rsu(&mut self, rsu: RsuEntry) {
        let entry = self.rsus.entry(rsu.id).or_insert(rsu.clone());
        if rsu.position.is_some() {
            entry.position = rsu.position;
        }
        entry.last_seen_ms = entry.last_seen_ms.max(rsu.last_seen_ms);
    }

    pub fn vehicles(&self) -> Vec<VehicleSummary> {
        self.vehicles
            .iter()
            .map(|(id, v)| VehicleSummary { id: *id, latest: v.latest().clone(), history_len: v.history.len() })
            .collect()
    }

    pub fn vehicle(&self, id: NodeId) -> Option<VehicleDetail> {
        self.vehicles.get(&id).map(|v| VehicleDetail {
            id,
            latest: v.latest().clone(),
            history: v.history.iter().cloned().collect(),
        })
    }

    pub fn rsus(&self) -> Vec<RsuEntry> {
        self.rsus.values().cloned().collect()
    }

    pub fn alerts(&self, kind: Option<AlertKind>) -> Vec<ActiveAlert> {
        self.alerts.values().filter(|a| kind.is_none_or(|k| a.kind == k)).cloned().collect()
    }

    pub fn advisories(&self) -> Vec<Advisory> {
        self.advisories.values().cloned().collect()
    }

    pub fn candidates(&self) -> &[RouteBlockCandidate] {
        &self.candidates
    }

    pub fn stats(&self) -> &IngestStats {
        &self.stats
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            now_ms: self.now_ms,
            vehicles: self.vehicles(),
            rsus: self.rsus(),
            alerts: self.alerts(None),
            advisories: self.advisories(),
            candidates: self.candidates.clone(),
            stats: self.stats.clone(),
        }
    }
}

/// Lets the simulator use a region view directly, without HTTP.
impl BaseLink for RegionView {
    fn push_reports(&mut self, reports: &[BaseReport]) -> Result<(), LinkError> {
        for r in reports {
            let now = r.timestamp_ms;
            if let (Err(e), _) = self.ingest(r.clone(), now) {
                return Err(LinkError::Rejected(e.to_string()));
            }
        }
        Ok(())
    }

    fn poll(&mut self, rsu: NodeId, position: GeoPoint, now_ms: u64) -> Result<RsuDirectives, LinkError> {
        Ok(self.poll_rsu(rsu, Some(position), now_ms).0)
    }

    fn issue_advisory(&mut self, cmd: &AdvisoryCommand, now_ms: u64) -> Result<u32, LinkError> {
        RegionView::issue_advisory(self, cmd, now_ms).map(|(id, _)| id).map_err(|e| LinkError::Rejected(e.to_string()))
    }
}
