//! OBU and RSU protocol state machines.
//!
//! Both are driven by the simulator: frames are dropped into an inbox as
//! they arrive, and each tick drains the inbox, runs the detectors and
//! returns the frames to broadcast. Given the same state, inbox and tick
//! time, a tick always produces the same output.

use crate::alerts::{self, AlertEvent, ImuSample, Thresholds, TrackSample, TrackState};
use crate::geo::{self, GeoPoint, LocalPoint, Pose2D};
use crate::uplink::{AdvisoryOrder, RsuDirectives, VruOrder};
use crate::wire::{
    self, AdvisoryPayload, AlertKind, AlertPayload, BaseReportPayload, BeaconPayload, BsmPayload, DecodeError,
    FixedGeo, Frame, NodeId, NodeKind, Payload, Severity, VruClass, VruPayload,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub bsm_interval_ms: u64,
    pub alert_cooldown_ms: u64,
    pub beacon_interval_ms: u64,
    pub report_interval_ms: u64,
    pub stale_ttl_ms: u64,
    /// How long an OBU trusts the merge angle from an RSU beacon.
    pub beacon_memory_ms: u64,
    /// An OBU applies a beacon's merge angle only within this distance of the RSU.
    pub merge_radius_m: f64,
    /// Alerts stay listed on a vehicle's base reports this long after last seen.
    pub alert_active_ms: u64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            bsm_interval_ms: 100,
            alert_cooldown_ms: 2000,
            beacon_interval_ms: 1000,
            report_interval_ms: 500,
            stale_ttl_ms: 1000,
            beacon_memory_ms: 3000,
            merge_radius_m: 150.0,
            alert_active_ms: 5000,
        }
    }
}

impl NodeConfig {
    pub fn violations(&self) -> Vec<&'static str> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("bsm_interval_ms", self.bsm_interval_ms),
            ("beacon_interval_ms", self.beacon_interval_ms),
            ("report_interval_ms", self.report_interval_ms),
            ("stale_ttl_ms", self.stale_ttl_ms),
        ] {
            if v == 0 {
                bad.push(name);
            }
        }
        if !(self.merge_radius_m.is_finite() && self.merge_radius_m > 0.0) {
            bad.push("merge_radius_m");
        }
        bad
    }
}

/// One vehicle as seen by one RSU at one instant, bound for the base station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseReport {
    pub rsu: NodeId,
    pub vehicle: NodeId,
    #[serde(default = "default_kind")]
    pub kind: NodeKind,
    #[serde(default)]
    pub emergency: bool,
    pub lat: f64,
    pub lon: f64,
    /// m/s
    pub speed: f64,
    /// compass degrees
    pub heading: f64,
    pub timestamp_ms: u64,
    #[serde(default)]
    pub alerts: Vec<AlertKind>,
}

fn default_kind() -> NodeKind {
    NodeKind::Obu
}

impl BaseReport {
    pub fn to_frame(&self, seq: u16) -> Frame {
        let fixed = FixedGeo::from_geo(GeoPoint { lat: self.lat, lon: self.lon });
        let mut heading = (self.heading * 100.0).round() as u32;
        if heading >= 36000 {
            heading = 0;
        }
        let mut alerts = self.alerts.clone();
        alerts.truncate(wire::MAX_REPORT_ALERTS);
        Frame::new(
            self.rsu,
            seq,
            self.timestamp_ms,
            Payload::BaseReport(BaseReportPayload {
                vehicle: self.vehicle,
                lat: fixed.lat,
                lon: fixed.lon,
                speed: (self.speed * 100.0).round().clamp(0.0, u16::MAX as f64) as u16,
                heading: heading as u16,
                alerts,
            }),
        )
    }

    pub fn from_frame(frame: &Frame) -> Option<BaseReport> {
        let Payload::BaseReport(p) = &frame.payload else { return None };
        let g = FixedGeo { lat: p.lat, lon: p.lon }.to_geo();
        Some(BaseReport {
            rsu: frame.header.sender,
            vehicle: p.vehicle,
            kind: p.vehicle.kind(),
            emergency: p.vehicle.is_emergency(),
            lat: g.lat,
            lon: g.lon,
            speed: p.speed as f64 / 100.0,
            heading: p.heading as f64 / 100.0,
            timestamp_ms: frame.header.timestamp_ms,
            alerts: p.alerts.clone(),
        })
    }
}

/// An alert as it reached a vehicle's driver display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedEntry {
    pub received_at_ms: u64,
    #[serde(flatten)]
    pub event: AlertEvent,
    /// Sequence number of the carrying frame; 0 for locally raised alerts.
    #[serde(skip)]
    pub frame_seq: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InboundFrame {
    pub arrival_ms: u64,
    /// Shared by every receiver of the same transmission.
    pub bytes: Arc<[u8]>,
}

/// Why an inbound frame was discarded.
#[derive(Debug, Clone, PartialEq)]
pub enum Discard {
    Malformed(DecodeError),
    Stale { sender: NodeId, seq: u16 },
    Own,
}

/// Per-(kind, subject) suppression windows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cooldowns {
    expires: BTreeMap<(AlertKind, Option<NodeId>, Option<NodeId>), u64>,
}

impl Cooldowns {
    /// Claims the key if it is not suppressed at `now`.
    fn claim(&mut self, key: (AlertKind, Option<NodeId>, Option<NodeId>), now: u64, window: u64) -> bool {
        match self.expires.get(&key) {
            Some(&until) if until > now => false,
            _ => {
                self.expires.insert(key, now + window);
                true
            }
        }
    }

    fn prune(&mut self, now: u64) {
        self.expires.retain(|_, until| *until > now);
    }

    pub fn len(&self) -> usize {
        self.expires.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expires.is_empty()
    }
}

/// Drops tracks whose newest sample is more than `ttl_ms` old.
pub fn prune_tracks(tracks: &mut BTreeMap<NodeId, TrackState>, now: u64, ttl_ms: u64) {
    tracks.retain(|_, t| t.latest().is_some_and(|s| now.saturating_sub(s.t_ms) <= ttl_ms));
}

/// Per-sender duplicate and reorder filter.
#[derive(Debug, Clone, Default)]
struct SeqFilter {
    last: BTreeMap<NodeId, u16>,
}

impl SeqFilter {
    fn accept(&mut self, sender: NodeId, seq: u16) -> bool {
        match self.last.get(&sender) {
            Some(&last) if !wire::seq_is_newer(seq, last) => false,
            _ => {
                self.last.insert(sender, seq);
                true
            }
        }
    }
}

fn to_fixed(origin: GeoPoint, p: Option<LocalPoint>) -> Option<FixedGeo> {
    p.and_then(|p| geo::unproject(origin, p).ok()).map(FixedGeo::from_geo)
}

fn to_local(origin: GeoPoint, g: Option<FixedGeo>) -> Option<LocalPoint> {
    g.and_then(|g| geo::project(origin, g.to_geo()).ok())
}

fn alert_frame(origin: GeoPoint, seq: u16, ev: &AlertEvent) -> Frame {
    Frame::new(
        ev.emitter,
        seq,
        ev.timestamp_ms,
        Payload::Alert(AlertPayload {
            alert_kind: ev.kind,
            subject: ev.subject,
            location: to_fixed(origin, ev.location),
            severity: ev.severity,
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BeaconInfo {
    position: LocalPoint,
    merge_angle_deg: Option<f64>,
    heard_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObuTick {
    pub frames: Vec<Frame>,
    /// Alerts raised this tick with the seq of the frame that carries them.
    pub raised: Vec<(AlertEvent, u16)>,
    pub feed: Vec<FeedEntry>,
    pub discarded: Vec<Discard>,
}

/// An on-board unit.
#[derive(Debug, Clone)]
pub struct ObuState {
    pub id: NodeId,
    origin: GeoPoint,
    config: NodeConfig,
    /// Current pose and IMU reading; `None` while the vehicle is off-road.
    pub pose: Option<(Pose2D, ImuSample)>,
    own_track: TrackState,
    pub neighbor_table: BTreeMap<NodeId, TrackState>,
    beacons: BTreeMap<NodeId, BeaconInfo>,
    pub next_bsm_at: Option<u64>,
    seq: u16,
    pub alert_cooldowns: Cooldowns,
    feed_cooldowns: Cooldowns,
    seq_filter: SeqFilter,
    pub inbox: Vec<InboundFrame>,
    pub alert_feed: Vec<FeedEntry>,
}

impl ObuState {
    pub fn new(id: NodeId, origin: GeoPoint, config: NodeConfig) -> ObuState {
        ObuState {
            id,
            origin,
            config,
            pose: None,
            own_track: TrackState::new(id),
            neighbor_table: BTreeMap::new(),
            beacons: BTreeMap::new(),
            next_bsm_at: None,
            seq: 0,
            alert_cooldowns: Cooldowns::default(),
            feed_cooldowns: Cooldowns::default(),
            seq_filter: SeqFilter::default(),
            inbox: Vec::new(),
            alert_feed: Vec::new(),
        }
    }

    pub fn own_track(&self) -> &TrackState {
        &self.own_track
    }

    fn next_seq(&mut self) -> u16 {
        let s = self.seq;
        self.seq = self.seq.wrapping_add(1);
        s
    }

    pub fn prune_stale(&mut self, now: u64, ttl_ms: u64) {
        prune_tracks(&mut self.neighbor_table, now, ttl_ms);
        let memory = self.config.beacon_memory_ms;
        self.beacons.retain(|_, b| now.saturating_sub(b.heard_at) <= memory);
        self.alert_cooldowns.prune(now);
        self.feed_cooldowns.prune(now);
    }

    /// Whether a received alert belongs on this driver's display.
    fn is_relevant(&self, kind: AlertKind, subject: Option<NodeId>) -> bool {
        let about_me = subject == Some(self.id);
        match kind {
            AlertKind::EvGiveWay | AlertKind::VruOnPath | AlertKind::BlindSpotCollision => about_me,
            AlertKind::EvApproaching => !self.id.is_emergency() && !about_me,
            AlertKind::AbnormalVehicle | AlertKind::EmergencyBrake => !about_me,
            AlertKind::RouteBlocked | AlertKind::RouteClear => true,
        }
    }

    fn push_feed(&mut self, entry: FeedEntry, out: &mut ObuTick) {
        let key = (entry.event.kind, entry.event.subject, Some(entry.event.emitter));
        if self.feed_cooldowns.claim(key, entry.received_at_ms, self.config.alert_cooldown_ms) {
            self.alert_feed.push(entry.clone());
            out.feed.push(entry);
        }
    }

    fn ingest(&mut self, inbound: InboundFrame, out: &mut ObuTick) {
        let frame = match wire::decode(&inbound.bytes) {
            Ok(f) => f,
            Err(e) => {
                out.discarded.push(Discard::Malformed(e));
                return;
            }
        };
        let sender = frame.header.sender;
        if sender == self.id {
            out.discarded.push(Discard::Own);
            return;
        }
        if !self.seq_filter.accept(sender, frame.header.seq) {
            out.discarded.push(Discard::Stale { sender, seq: frame.header.seq });
            return;
        }
        let at = inbound.arrival_ms;
        let seq = frame.header.seq;
        match frame.payload {
            Payload::Bsm(bsm) if !sender.is_rsu() => {
                let Ok((pose, imu)) = wire::bsm_to_pose(&bsm, self.origin) else { return };
                let track = self.neighbor_table.entry(sender).or_insert_with(|| TrackState::new(sender));
                if track.push(TrackSample { t_ms: frame.header.timestamp_ms, pose, imu }).is_ok() {
                    track.last_seq = seq;
                }
            }
            Payload::RsuBeacon(b) if sender.is_rsu() => {
                if let Ok(position) = geo::project(self.origin, b.position()) {
                    self.beacons.insert(sender, BeaconInfo { position, merge_angle_deg: b.merge_angle_deg(), heard_at: at });
                }
            }
            Payload::Alert(a) => {
                if self.is_relevant(a.alert_kind, a.subject) {
                    let event = AlertEvent {
                        kind: a.alert_kind,
                        emitter: sender,
                        subject: a.subject,
                        location: to_local(self.origin, a.location),
                        timestamp_ms: frame.header.timestamp_ms,
                        severity: a.severity,
                    };
                    self.push_feed(FeedEntry { received_at_ms: at, event, frame_seq: seq }, out);
                }
            }
            Payload::Advisory(a) => {
                let event = AlertEvent {
                    kind: a.alert_kind,
                    emitter: sender,
                    subject: None,
                    location: to_local(self.origin, a.location),
                    timestamp_ms: frame.header.timestamp_ms,
                    severity: a.severity,
                };
                self.push_feed(FeedEntry { received_at_ms: at, event, frame_seq: seq }, out);
            }
            Payload::VruEvent(v) if v.target.is_none() || v.target == Some(self.id) => {
                let event = AlertEvent {
                    kind: AlertKind::VruOnPath,
                    emitter: sender,
                    subject: Some(self.id),
                    location: geo::project(self.origin, v.position()).ok(),
                    timestamp_ms: frame.header.timestamp_ms,
                    severity: Severity::Warn,
                };
                self.push_feed(FeedEntry { received_at_ms: at, event, frame_seq: seq }, out);
            }
            _ => {}
        }
    }

    /// The merge angle of the nearest recently heard RSU, if close enough.
    fn local_merge_angle(&self, me: LocalPoint) -> Option<f64> {
        self.beacons
            .iter()
            .filter_map(|(id, b)| {
                let angle = b.merge_angle_deg?;
                let d = geo::distance(me, b.position);
                (d <= self.config.merge_radius_m).then_some((d, *id, angle))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, _, angle)| angle)
    }

    /// Runs one tick at `now`.
    pub fn tick(&mut self, now: u64, th: &Thresholds) -> ObuTick {
        let mut out = ObuTick::default();
        self.prune_stale(now, self.config.stale_ttl_ms);
        for inbound in std::mem::take(&mut self.inbox) {
            self.ingest(inbound, &mut out);
        }

        let Some((pose, imu)) = self.pose else {
            return out;
        };
        let newer = self.own_track.latest().is_none_or(|s| s.t_ms < now);
        if newer {
            self.own_track.push(TrackSample { t_ms: now, pose, imu }).expect("own samples are increasing");
        }

        let next = *self.next_bsm_at.get_or_insert(now);
        if now >= next {
            let position = geo::unproject(self.origin, pose.pos).unwrap_or(self.origin);
            let bsm = BsmPayload::from_physical(position, 0.0, &pose, &imu);
            let seq = self.next_seq();
            out.frames.push(Frame::new(self.id, seq, now, Payload::Bsm(bsm)));
            self.next_bsm_at = Some(next + self.config.bsm_interval_ms);
        }

        let mut events = Vec::new();
        for track in self.neighbor_table.values() {
            events.extend(alerts::detect_abnormal(self.id, track, th));
            events.extend(alerts::detect_emergency_brake(self.id, track, th));
        }
        if let Some(angle) = self.local_merge_angle(pose.pos) {
            for track in self.neighbor_table.values() {
                events.extend(alerts::detect_blind_spot(self.id, &self.own_track, track, angle, th));
            }
        }
        if self.id.is_emergency() {
            let neighbors: Vec<TrackState> = self.neighbor_table.values().cloned().collect();
            events.extend(alerts::detect_give_way(&self.own_track, &neighbors, th).unwrap_or_default());
        }

        for mut ev in events {
            ev.timestamp_ms = now;
            if !self.alert_cooldowns.claim((ev.kind, ev.subject, None), now, self.config.alert_cooldown_ms) {
                continue;
            }
            let seq = self.next_seq();
            out.frames.push(alert_frame(self.origin, seq, &ev));
            out.raised.push((ev, seq));
            let for_me = match ev.kind {
                AlertKind::AbnormalVehicle | AlertKind::EmergencyBrake => true,
                _ => ev.subject == Some(self.id),
            };
            if for_me {
                self.push_feed(FeedEntry { received_at_ms: now, event: ev, frame_seq: 0 }, &mut out);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingAdvisory {
    pub id: u32,
    pub kind: AlertKind,
    pub location: Option<GeoPoint>,
    pub expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteBlockCandidate {
    pub vehicle: NodeId,
    pub location: LocalPoint,
    pub detected_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct ActiveVru {
    class: VruClass,
    location: GeoPoint,
    until: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RsuTick {
    pub frames: Vec<Frame>,
    /// Alerts raised this tick with the seq of the frame that carries them.
    pub raised: Vec<(AlertEvent, u16)>,
    pub reports: Vec<BaseReport>,
    pub discarded: Vec<Discard>,
}

/// A road-side unit.
#[derive(Debug, Clone)]
pub struct RsuState {
    pub id: NodeId,
    pub position: LocalPoint,
    pub geo_position: GeoPoint,
    origin: GeoPoint,
    config: NodeConfig,
    /// EVs inside this radius trigger EV_APPROACHING.
    reliable_radius_m: f64,
    pub merge_angle_deg: Option<f64>,
    pub vehicle_tracks: BTreeMap<NodeId, TrackState>,
    vehicle_alerts: BTreeMap<NodeId, BTreeMap<AlertKind, u64>>,
    pub pending_advisories: Vec<PendingAdvisory>,
    pub route_block_candidates: Vec<RouteBlockCandidate>,
    active_vru: Vec<ActiveVru>,
    next_beacon_at: Option<u64>,
    next_report_at: Option<u64>,
    seq: u16,
    pub alert_cooldowns: Cooldowns,
    seq_filter: SeqFilter,
    pub inbox: Vec<InboundFrame>,
}

impl RsuState {
    pub fn new(
        id: NodeId,
        geo_position: GeoPoint,
        origin: GeoPoint,
        merge_angle_deg: Option<f64>,
        reliable_radius_m: f64,
        config: NodeConfig,
    ) -> Result<RsuState, geo::GeoError> {
        let position = geo::project(origin, geo_position)?;
        Ok(RsuState {
            id,
            position,
            geo_position,
            origin,
            config,
            reliable_radius_m,
            merge_angle_deg,
            vehicle_tracks: BTreeMap::new(),
            vehicle_alerts: BTreeMap::new(),
            pending_advisories: Vec::new(),
            route_block_candidates: Vec::new(),
            active_vru: Vec::new(),
            next_beacon_at: None,
            next_report_at: None,
            seq: 0,
            alert_cooldowns: Cooldowns::default(),
            seq_filter: SeqFilter::default(),
            inbox: Vec::new(),
        })
    }

    fn next_seq(&mut self) -> u16 {
        let s = self.seq;
        self.seq = self.seq.wrapping_add(1);
        s
    }

    pub fn prune_stale(&mut self, now: u64, ttl_ms: u64) {
        prune_tracks(&mut self.vehicle_tracks, now, ttl_ms);
        self.alert_cooldowns.prune(now);
        let active = self.config.alert_active_ms;
        for kinds in self.vehicle_alerts.values_mut() {
            kinds.retain(|_, seen| now.saturating_sub(*seen) <= active);
        }
        self.vehicle_alerts.retain(|_, kinds| !kinds.is_empty());
    }

    fn note_alert(&mut self, vehicle: NodeId, kind: AlertKind, now: u64) {
        self.vehicle_alerts.entry(vehicle).or_default().insert(kind, now);
    }

    /// Takes in what the base station handed over on the last poll.
    ///
    /// A ROUTE_CLEAR supersedes any pending ROUTE_BLOCKED.
    pub fn apply_directives(&mut self, now: u64, directives: RsuDirectives) {
        for AdvisoryOrder { id, kind, location, remaining_ms } in directives.advisories {
            if kind == AlertKind::RouteClear {
                self.pending_advisories.retain(|a| a.kind != AlertKind::RouteBlocked);
            }
            self.pending_advisories.retain(|a| a.id != id);
            self.pending_advisories.push(PendingAdvisory { id, kind, location, expires_at: now + remaining_ms });
        }
        for VruOrder { class, location, duration_ms } in directives.vru_events {
            self.active_vru.push(ActiveVru { class, location, until: now + duration_ms });
        }
    }

    fn raise(&mut self, ev: AlertEvent, now: u64, out: &mut RsuTick) -> bool {
        if !self.alert_cooldowns.claim((ev.kind, ev.subject, None), now, self.config.alert_cooldown_ms) {
            return false;
        }
        if let Some(subject) = ev.subject {
            self.note_alert(subject, ev.kind, now);
        }
        let seq = self.next_seq();
        out.frames.push(alert_frame(self.origin, seq, &ev));
        out.raised.push((ev, seq));
        true
    }

    fn ingest(&mut self, inbound: InboundFrame, now: u64, out: &mut RsuTick) {
        let frame = match wire::decode(&inbound.bytes) {
            Ok(f) => f,
            Err(e) => {
                out.discarded.push(Discard::Malformed(e));
                return;
            }
        };
        let sender = frame.header.sender;
        if sender == self.id {
            out.discarded.push(Discard::Own);
            return;
        }
        if !self.seq_filter.accept(sender, frame.header.seq) {
            out.discarded.push(Discard::Stale { sender, seq: frame.header.seq });
            return;
        }
        match frame.payload {
            Payload::Bsm(bsm) if !sender.is_rsu() => {
                let Ok((pose, imu)) = wire::bsm_to_pose(&bsm, self.origin) else { return };
                let track = self.vehicle_tracks.entry(sender).or_insert_with(|| TrackState::new(sender));
                if track.push(TrackSample { t_ms: frame.header.timestamp_ms, pose, imu }).is_ok() {
                    track.last_seq = frame.header.seq;
                }
            }
            Payload::Alert(a) => {
                if let Some(subject) = a.subject.filter(|s| !s.is_rsu()) {
                    self.note_alert(subject, a.alert_kind, now);
                }
            }
            _ => {}
        }
    }

    pub fn tick(&mut self, now: u64, th: &Thresholds) -> RsuTick {
        let mut out = RsuTick::default();
        self.prune_stale(now, self.config.stale_ttl_ms);
        for inbound in std::mem::take(&mut self.inbox) {
            self.ingest(inbound, now, &mut out);
        }

        let next_beacon = *self.next_beacon_at.get_or_insert(now);
        if now >= next_beacon {
            let fixed = FixedGeo::from_geo(self.geo_position);
            let merge_angle = self.merge_angle_deg.map(|a| ((a * 100.0).round() as u16).min(35_999));
            let seq = self.next_seq();
            out.frames.push(Frame::new(
                self.id,
                seq,
                now,
                Payload::RsuBeacon(BeaconPayload { lat: fixed.lat, lon: fixed.lon, merge_angle }),
            ));
            self.next_beacon_at = Some(next_beacon + self.config.beacon_interval_ms);
        }

        // Emergency vehicles inside the reliable radius.
        let approaching: Vec<(NodeId, LocalPoint)> = self
            .vehicle_tracks
            .values()
            .filter(|t| t.id.is_emergency())
            .filter_map(|t| t.latest().map(|s| (t.id, s.pose.pos)))
            .filter(|(_, pos)| geo::distance(*pos, self.position) <= self.reliable_radius_m)
            .collect();
        for (ev_id, pos) in approaching {
            let ev = AlertEvent {
                kind: AlertKind::EvApproaching,
                emitter: self.id,
                subject: Some(ev_id),
                location: Some(pos),
                timestamp_ms: now,
                severity: Severity::Warn,
            };
            self.raise(ev, now, &mut out);
            self.note_alert(ev_id, AlertKind::EvApproaching, now);
        }

        let brakes: Vec<AlertEvent> = self
            .vehicle_tracks
            .values()
            .filter_map(|t| alerts::detect_emergency_brake(self.id, t, th))
            .collect();
        for mut ev in brakes {
            ev.timestamp_ms = now;
            if self.raise(ev, now, &mut out) {
                if let (Some(vehicle), Some(location)) = (ev.subject, ev.location) {
                    self.route_block_candidates.push(RouteBlockCandidate { vehicle, location, detected_at: now });
                }
            }
        }

        self.active_vru.retain(|v| v.until >= now);
        if !self.active_vru.is_empty() {
            let tracks: Vec<TrackState> = self.vehicle_tracks.values().cloned().collect();
            let targets = alerts::vru_alert_targets(self.position, &tracks, th);
            for vru in self.active_vru.clone() {
                let location = geo::project(self.origin, vru.location).ok();
                for &target in &targets {
                    let key = (AlertKind::VruOnPath, Some(target), None);
                    if !self.alert_cooldowns.claim(key, now, self.config.alert_cooldown_ms) {
                        continue;
                    }
                    self.note_alert(target, AlertKind::VruOnPath, now);
                    let fixed = FixedGeo::from_geo(vru.location);
                    let seq = self.next_seq();
                    out.frames.push(Frame::new(
                        self.id,
                        seq,
                        now,
                        Payload::VruEvent(VruPayload { class: vru.class, lat: fixed.lat, lon: fixed.lon, target: Some(target) }),
                    ));
                    let ev = AlertEvent {
                        kind: AlertKind::VruOnPath,
                        emitter: self.id,
                        subject: Some(target),
                        location,
                        timestamp_ms: now,
                        severity: Severity::Warn,
                    };
                    out.raised.push((ev, seq));
                }
            }
        }

        self.pending_advisories.retain(|a| a.expires_at > now);
        for adv in self.pending_advisories.clone() {
            let seq = self.next_seq();
            out.frames.push(Frame::new(
                self.id,
                seq,
                now,
                Payload::Advisory(AdvisoryPayload {
                    advisory_id: adv.id,
                    alert_kind: adv.kind,
                    location: adv.location.map(FixedGeo::from_geo),
                    severity: if adv.kind == AlertKind::RouteBlocked { Severity::Critical } else { Severity::Info },
                    remaining_ms: (adv.expires_at - now).min(u32::MAX as u64) as u32,
                }),
            ));
        }

        let next_report = *self.next_report_at.get_or_insert(now);
        if now >= next_report {
            for track in self.vehicle_tracks.values() {
                let Some(latest) = track.latest() else { continue };
                let Ok(g) = geo::unproject(self.origin, latest.pose.pos) else { continue };
                let alerts = self
                    .vehicle_alerts
                    .get(&track.id)
                    .map(|kinds| kinds.keys().copied().collect())
                    .unwrap_or_default();
                out.reports.push(BaseReport {
                    rsu: self.id,
                    vehicle: track.id,
                    kind: track.id.kind(),
                    emergency: track.id.is_emergency(),
                    lat: g.lat,
                    lon: g.lon,
                    speed: latest.pose.speed,
                    heading: latest.pose.heading.degrees(),
                    timestamp_ms: now,
                    alerts,
                });
            }
            self.next_report_at = Some(next_report + self.config.report_interval_ms);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::Heading;
    use crate::wire::MsgType;

    fn origin() -> GeoPoint {
        GeoPoint { lat: 17.6, lon: 78.12 }
    }

    fn lp(x: f64, y: f64) -> LocalPoint {
        LocalPoint { x, y }
    }

    fn obu(serial: u32) -> ObuState {
        ObuState::new(NodeId::obu(serial).unwrap(), origin(), NodeConfig::default())
    }

    fn rsu_at(pos: LocalPoint, merge: Option<f64>) -> RsuState {
        let g = geo::unproject(origin(), pos).unwrap();
        RsuState::new(NodeId::rsu(1).unwrap(), g, origin(), merge, 600.0, NodeConfig::default()).unwrap()
    }

    fn bsm_bytes(sender: NodeId, seq: u16, t: u64, pos: LocalPoint, speed: f64) -> Vec<u8> {
        let pose = Pose2D::new(pos, Heading::NORTH, speed);
        let g = geo::unproject(origin(), pos).unwrap();
        let bsm = BsmPayload::from_physical(g, 0.0, &pose, &ImuSample::default());
        wire::encode(&Frame::new(sender, seq, t, Payload::Bsm(bsm))).unwrap()
    }

    #[test]
    fn idle_obu_broadcasts_every_100ms() {
        let th = Thresholds::default();
        let mut o = obu(1);
        o.pose = Some((Pose2D::new(lp(0.0, 0.0), Heading::NORTH, 0.0), ImuSample::default()));
        let mut times = Vec::new();
        for now in (0..1000).step_by(50) {
            let out = o.tick(now, &th);
            for f in &out.frames {
                assert_eq!(f.msg_type(), MsgType::Bsm);
                times.push(f.header.timestamp_ms);
            }
            assert!(out.feed.is_empty());
        }
        assert_eq!(times, (0..10).map(|i| i * 100).collect::<Vec<_>>());
        assert!(o.alert_feed.is_empty());
    }

    #[test]
    fn obu_without_pose_stays_silent() {
        let mut o = obu(1);
        assert!(o.tick(0, &Thresholds::default()).frames.is_empty());
    }

    #[test]
    fn brake_alert_is_deduplicated() {
        let th = Thresholds::default();
        let mut o = obu(1);
        o.pose = Some((Pose2D::new(lp(0.0, 0.0), Heading::NORTH, 15.0), ImuSample::default()));
        let lead = NodeId::obu(2).unwrap();
        let mut brake_frames = Vec::new();
        let mut speed = 60.0;
        for k in 0..40u64 {
            let now = k * 100;
            // Decelerating hard for the whole run: the condition persists.
            if k >= 5 {
                speed = f64::max(speed - 1.5, 0.0);
            }
            o.inbox.push(InboundFrame { arrival_ms: now + 2, bytes: bsm_bytes(lead, k as u16, now, lp(0.0, 30.0), speed).into() });
            let out = o.tick(now + 100, &th);
            for f in out.frames {
                if let Payload::Alert(a) = f.payload {
                    assert_eq!(a.alert_kind, AlertKind::EmergencyBrake);
                    brake_frames.push(f.header.timestamp_ms);
                }
            }
        }
        assert!(!brake_frames.is_empty());
        for w in brake_frames.windows(2) {
            assert!(w[1] - w[0] >= 2000, "{brake_frames:?}");
        }
        assert_eq!(brake_frames, vec![700, 2700]);
        assert!(o.alert_feed.iter().any(|e| e.event.kind == AlertKind::EmergencyBrake));
    }

    #[test]
    fn duplicates_and_reordered_frames_are_dropped() {
        let th = Thresholds::default();
        let mut o = obu(1);
        let other = NodeId::obu(2).unwrap();
        o.inbox.push(InboundFrame { arrival_ms: 2, bytes: bsm_bytes(other, 5, 0, lp(0.0, 10.0), 10.0).into() });
        o.inbox.push(InboundFrame { arrival_ms: 3, bytes: bsm_bytes(other, 5, 0, lp(0.0, 10.0), 10.0).into() });
        o.inbox.push(InboundFrame { arrival_ms: 4, bytes: bsm_bytes(other, 4, 50, lp(0.0, 10.0), 10.0).into() });
        o.inbox.push(InboundFrame { arrival_ms: 5, bytes: vec![1, 2, 3].into() });
        o.inbox.push(InboundFrame { arrival_ms: 6, bytes: bsm_bytes(o.id, 0, 0, lp(0.0, 0.0), 1.0).into() });
        let out = o.tick(100, &th);
        assert_eq!(
            out.discarded,
            vec![
                Discard::Stale { sender: other, seq: 5 },
                Discard::Stale { sender: other, seq: 4 },
                Discard::Malformed(DecodeError::BadLength),
                Discard::Own,
            ]
        );
        assert_eq!(o.neighbor_table[&other].len(), 1);
        assert!(!o.neighbor_table.contains_key(&o.id));
    }

    #[test]
    fn prune_stale_examples() {
        let mut o = obu(1);
        let a = NodeId::obu(2).unwrap();
        let b = NodeId::obu(3).unwrap();
        o.inbox.push(InboundFrame { arrival_ms: 2, bytes: bsm_bytes(a, 0, 0, lp(0.0, 10.0), 1.0).into() });
        o.inbox.push(InboundFrame { arrival_ms: 1302, bytes: bsm_bytes(b, 0, 1300, lp(0.0, 20.0), 1.0).into() });
        o.tick(1400, &Thresholds::default());
        assert_eq!(o.neighbor_table.len(), 2);
        o.prune_stale(1500, 1000);
        assert_eq!(o.neighbor_table.keys().copied().collect::<Vec<_>>(), vec![b]);

        let mut empty: BTreeMap<NodeId, TrackState> = BTreeMap::new();
        prune_tracks(&mut empty, 10_000, 1000);
        assert!(empty.is_empty());
    }

    #[test]
    fn rsu_idle_emits_only_beacons() {
        let th = Thresholds::default();
        let mut r = rsu_at(lp(0.0, 0.0), Some(90.0));
        let mut beacons = Vec::new();
        for now in (0..3000).step_by(100) {
            let out = r.tick(now, &th);
            assert!(out.reports.is_empty());
            assert!(out.raised.is_empty());
            for f in out.frames {
                match f.payload {
                    Payload::RsuBeacon(b) => {
                        assert_eq!(b.merge_angle, Some(9000));
                        beacons.push(f.header.timestamp_ms);
                    }
                    other => panic!("unexpected {other:?}"),
                }
            }
        }
        assert_eq!(beacons, vec![0, 1000, 2000]);
    }

    #[test]
    fn rsu_announces_emergency_vehicle_once_per_cooldown() {
        let th = Thresholds::default();
        let mut r = rsu_at(lp(0.0, 0.0), None);
        let ev = NodeId::emergency(7).unwrap();
        let mut announced = Vec::new();
        let mut reports = 0;
        for k in 0..30u64 {
            let now = k * 100;
            r.inbox.push(InboundFrame { arrival_ms: now + 2, bytes: bsm_bytes(ev, k as u16, now, lp(0.0, -580.0 + k as f64), 20.0).into() });
            let out = r.tick(now + 100, &th);
            reports += out.reports.len();
            for (e, _) in out.raised {
                assert_eq!(e.kind, AlertKind::EvApproaching);
                assert_eq!(e.subject, Some(ev));
                announced.push(e.timestamp_ms);
            }
            for rep in out.reports {
                assert!(rep.emergency);
                assert_eq!(rep.alerts, vec![AlertKind::EvApproaching]);
            }
        }
        assert_eq!(announced, vec![100, 2100]);
        assert_eq!(reports, 6);
    }

    #[test]
    fn rsu_ignores_far_emergency_vehicle() {
        let th = Thresholds::default();
        let mut r = rsu_at(lp(0.0, 0.0), None);
        let ev = NodeId::emergency(7).unwrap();
        r.inbox.push(InboundFrame { arrival_ms: 2, bytes: bsm_bytes(ev, 0, 0, lp(0.0, -700.0), 20.0).into() });
        assert!(r.tick(100, &th).raised.is_empty());
    }

    #[test]
    fn advisory_rebroadcast_until_expiry_and_superseded() {
        let th = Thresholds::default();
        let mut r = rsu_at(lp(0.0, 0.0), None);
        r.apply_directives(
            0,
            RsuDirectives {
                advisories: vec![AdvisoryOrder { id: 1, kind: AlertKind::RouteBlocked, location: None, remaining_ms: 10_000 }],
                vru_events: vec![],
            },
        );
        let mut last_blocked = None;
        for now in (0..12_000).step_by(100) {
            let out = r.tick(now, &th);
            let blocked = out.frames.iter().filter(|f| matches!(f.payload, Payload::Advisory(_))).count();
            if blocked > 0 {
                assert_eq!(blocked, 1);
                last_blocked = Some(now);
            }
        }
        assert_eq!(last_blocked, Some(9_900));

        r.apply_directives(
            20_000,
            RsuDirectives {
                advisories: vec![AdvisoryOrder { id: 2, kind: AlertKind::RouteBlocked, location: None, remaining_ms: 10_000 }],
                vru_events: vec![],
            },
        );
        r.apply_directives(
            21_000,
            RsuDirectives {
                advisories: vec![AdvisoryOrder { id: 3, kind: AlertKind::RouteClear, location: None, remaining_ms: 2_000 }],
                vru_events: vec![],
            },
        );
        let out = r.tick(21_100, &th);
        let kinds: Vec<_> = out
            .frames
            .iter()
            .filter_map(|f| match f.payload {
                Payload::Advisory(a) => Some(a.alert_kind),
                _ => None,
            })
            .collect();
        assert_eq!(kinds, vec![AlertKind::RouteClear]);
    }

    #[test]
    fn rsu_brake_detection_queues_route_block_candidate() {
        let th = Thresholds::default();
        let mut r = rsu_at(lp(0.0, 0.0), None);
        let car = NodeId::obu(4).unwrap();
        let speeds = [20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 17.0];
        let mut raised = Vec::new();
        for (k, v) in speeds.iter().enumerate() {
            let now = k as u64 * 100;
            r.inbox.push(InboundFrame { arrival_ms: now + 2, bytes: bsm_bytes(car, k as u16, now, lp(0.0, k as f64 * 2.0), *v).into() });
            raised.extend(r.tick(now + 100, &th).raised);
        }
        assert_eq!(raised.len(), 1);
        assert_eq!(raised[0].0.kind, AlertKind::EmergencyBrake);
        assert_eq!(r.route_block_candidates.len(), 1);
        assert_eq!(r.route_block_candidates[0].vehicle, car);
    }

    #[test]
    fn rsu_warns_approaching_vehicles_about_vru() {
        let th = Thresholds::default();
        let mut r = rsu_at(lp(0.0, 0.0), None);
        let closing = NodeId::obu(2).unwrap();
        let leaving = NodeId::obu(3).unwrap();
        for k in 0..3u64 {
            let now = k * 100;
            r.inbox.push(InboundFrame { arrival_ms: now + 2, bytes: bsm_bytes(closing, k as u16, now, lp(0.0, -100.0 + k as f64), 10.0).into() });
            r.inbox.push(InboundFrame { arrival_ms: now + 2, bytes: bsm_bytes(leaving, k as u16, now, lp(0.0, 50.0 + k as f64), 10.0).into() });
            r.tick(now + 100, &th);
        }
        r.apply_directives(
            300,
            RsuDirectives {
                advisories: vec![],
                vru_events: vec![VruOrder { class: VruClass::Pedestrian, location: geo::unproject(origin(), lp(5.0, 0.0)).unwrap(), duration_ms: 0 }],
            },
        );
        let out = r.tick(300, &th);
        let targets: Vec<_> = out
            .frames
            .iter()
            .filter_map(|f| match f.payload {
                Payload::VruEvent(v) => v.target,
                _ => None,
            })
            .collect();
        assert_eq!(targets, vec![closing]);
        // Single-shot event is gone on the next tick.
        assert!(r.tick(400, &th).frames.iter().all(|f| !matches!(f.payload, Payload::VruEvent(_))));
    }

    #[test]
    fn base_report_frame_round_trip() {
        let rep = BaseReport {
            rsu: NodeId::rsu(2).unwrap(),
            vehicle: NodeId::emergency(1).unwrap(),
            kind: NodeKind::Obu,
            emergency: true,
            lat: 17.6,
            lon: 78.12,
            speed: 12.5,
            heading: 270.0,
            timestamp_ms: 1500,
            alerts: vec![AlertKind::EvApproaching],
        };
        let bytes = wire::encode(&rep.to_frame(3)).unwrap();
        let back = BaseReport::from_frame(&wire::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn feed_relevance() {
        let o = obu(1);
        let me = Some(o.id);
        let other = NodeId::obu(9).ok();
        assert!(o.is_relevant(AlertKind::EvGiveWay, me));
        assert!(!o.is_relevant(AlertKind::EvGiveWay, other));
        assert!(o.is_relevant(AlertKind::EvApproaching, NodeId::emergency(3).ok()));
        assert!(o.is_relevant(AlertKind::RouteBlocked, None));
        assert!(!o.is_relevant(AlertKind::BlindSpotCollision, other));
        let ev = ObuState::new(NodeId::emergency(3).unwrap(), origin(), NodeConfig::default());
        assert!(!ev.is_relevant(AlertKind::EvApproaching, NodeId::emergency(4).ok()));
    }
}
