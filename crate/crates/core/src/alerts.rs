//! Alert detectors.
//!
//! Every detector is a pure function over per-vehicle track history; the
//! node state machines decide when to run them and how to deduplicate what
//! they return.

use crate::geo::{self, BearingClass, LocalPoint, Pose2D};
use crate::wire::{AlertKind, NodeId, Severity};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// History retained per track.
pub const TRACK_CAPACITY: usize = 32;

/// Packets in the emergency-brake window.
pub const BRAKE_WINDOW: usize = 7;

/// Closing speed above which a give-way alert is escalated to critical.
pub const GIVE_WAY_CRITICAL_CLOSING_MPS: f64 = 5.0;

/// Inertial readings in the vehicle frame: x forward, y left.
/// `yaw_rate` is positive counterclockwise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImuSample {
    pub accel_x: f64,
    pub accel_y: f64,
    pub accel_z: f64,
    /// deg/s
    pub yaw_rate: f64,
}

impl ImuSample {
    pub fn is_valid(&self) -> bool {
        [self.accel_x, self.accel_y, self.accel_z].iter().all(|a| a.is_finite() && a.abs() < 200.0)
            && self.yaw_rate.is_finite()
            && self.yaw_rate.abs() < 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub t_ms: u64,
    pub pose: Pose2D,
    pub imu: ImuSample,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackError {
    #[error("sample at {got} ms is not after the newest sample at {newest} ms")]
    NotIncreasing { newest: u64, got: u64 },
}

/// What an observer knows about one vehicle: its recent samples, oldest
/// first, capped at [`TRACK_CAPACITY`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub id: NodeId,
    history: VecDeque<TrackSample>,
    pub last_seq: u16,
}

impl TrackState {
    pub fn new(id: NodeId) -> TrackState {
        TrackState { id, history: VecDeque::with_capacity(TRACK_CAPACITY), last_seq: 0 }
    }

    /// Builds a track from samples, oldest first.
    pub fn from_samples(id: NodeId, samples: impl IntoIterator<Item = TrackSample>) -> Result<TrackState, TrackError> {
        let mut track = TrackState::new(id);
        for s in samples {
            track.push(s)?;
        }
        Ok(track)
    }

    pub fn push(&mut self, sample: TrackSample) -> Result<(), TrackError> {
        if let Some(newest) = self.history.back() {
            if sample.t_ms <= newest.t_ms {
                return Err(TrackError::NotIncreasing { newest: newest.t_ms, got: sample.t_ms });
            }
        }
        if self.history.len() == TRACK_CAPACITY {
            self.history.pop_front();
        }
        self.history.push_back(sample);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn latest(&self) -> Option<&TrackSample> {
        self.history.back()
    }

    pub fn samples(&self) -> impl DoubleEndedIterator<Item = &TrackSample> + ExactSizeIterator {
        self.history.iter()
    }

    /// The `n` most recent samples, oldest first.
    pub fn recent(&self, n: usize) -> impl Iterator<Item = &TrackSample> {
        self.history.iter().skip(self.history.len().saturating_sub(n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// m/s between consecutive packets.
    pub brake_drop_per_packet: f64,
    pub brake_window: usize,
    /// deg/s
    pub abnormal_yaw: f64,
    /// m/s
    pub abnormal_speed: f64,
    /// m/s²
    pub abnormal_lateral_accel: f64,
    pub abnormal_persist: usize,
    pub giveway_distance: f64,
    pub blindspot_distance: f64,
    pub blindspot_decrease_samples: usize,
    /// degrees
    pub merge_angle_tolerance: f64,
    pub vru_radius: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            brake_drop_per_packet: 0.8,
            brake_window: BRAKE_WINDOW,
            abnormal_yaw: 30.0,
            abnormal_speed: 8.0,
            abnormal_lateral_accel: 4.0,
            abnormal_persist: 3,
            giveway_distance: 30.0,
            blindspot_distance: 50.0,
            blindspot_decrease_samples: 3,
            merge_angle_tolerance: 10.0,
            vru_radius: 150.0,
        }
    }
}

impl Thresholds {
    /// Returns the name of every violated field.
    pub fn violations(&self) -> Vec<&'static str> {
        let mut bad = Vec::new();
        let positive = [
            ("brake_drop_per_packet", self.brake_drop_per_packet),
            ("abnormal_yaw", self.abnormal_yaw),
            ("abnormal_speed", self.abnormal_speed),
            ("abnormal_lateral_accel", self.abnormal_lateral_accel),
            ("giveway_distance", self.giveway_distance),
            ("blindspot_distance", self.blindspot_distance),
            ("merge_angle_tolerance", self.merge_angle_tolerance),
            ("vru_radius", self.vru_radius),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                bad.push(name);
            }
        }
        if self.brake_window != BRAKE_WINDOW {
            bad.push("brake_window");
        }
        if self.abnormal_persist == 0 {
            bad.push("abnormal_persist");
        }
        if self.blindspot_decrease_samples == 0 || self.blindspot_decrease_samples >= TRACK_CAPACITY {
            bad.push("blindspot_decrease_samples");
        }
        bad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub kind: AlertKind,
    pub emitter: NodeId,
    pub subject: Option<NodeId>,
    pub location: Option<LocalPoint>,
    pub timestamp_ms: u64,
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlertError {
    #[error("{0} is not an emergency vehicle")]
    NotEmergency(NodeId),
}

/// Hard braking by the tracked vehicle.
///
/// Looks at the newest seven speeds and fires when any single drop between
/// consecutive packets is strictly larger than `brake_drop_per_packet`.
/// Nothing fires until the window is full.
pub fn detect_emergency_brake(emitter: NodeId, track: &TrackState, th: &Thresholds) -> Option<AlertEvent> {
    if track.len() < th.brake_window {
        return None;
    }
    let mut speeds = track.recent(th.brake_window).map(|s| s.pose.speed);
    let mut prev = speeds.next()?;
    let mut max_drop = f64::NEG_INFINITY;
    for v in speeds {
        max_drop = max_drop.max(prev - v);
        prev = v;
    }
    if max_drop <= th.brake_drop_per_packet {
        return None;
    }
    let latest = track.latest()?;
    Some(AlertEvent {
        kind: AlertKind::EmergencyBrake,
        emitter,
        subject: Some(track.id),
        location: Some(latest.pose.pos),
        timestamp_ms: latest.t_ms,
        severity: Severity::Critical,
    })
}

/// Swerving at speed: every one of the last `abnormal_persist` samples
/// shows either a hard yaw while above `abnormal_speed`, or a hard lateral
/// acceleration.
pub fn detect_abnormal(emitter: NodeId, track: &TrackState, th: &Thresholds) -> Option<AlertEvent> {
    if track.len() < th.abnormal_persist {
        return None;
    }
    let abnormal = track.recent(th.abnormal_persist).all(|s| {
        (s.imu.yaw_rate.abs() > th.abnormal_yaw && s.pose.speed > th.abnormal_speed)
            || s.imu.accel_y.abs() > th.abnormal_lateral_accel
    });
    if !abnormal {
        return None;
    }
    let latest = track.latest()?;
    Some(AlertEvent {
        kind: AlertKind::AbnormalVehicle,
        emitter,
        subject: Some(track.id),
        location: Some(latest.pose.pos),
        timestamp_ms: latest.t_ms,
        severity: Severity::Warn,
    })
}

fn strictly_decreasing(mut it: impl Iterator<Item = f64>) -> bool {
    let Some(mut prev) = it.next() else { return false };
    for d in it {
        if !(d < prev) {
            return false;
        }
        prev = d;
    }
    true
}

/// Two vehicles converging on the same point of a merge.
///
/// The collision point comes from the latest poses. An alert is raised for
/// both vehicles when each has been closing on that point over the last
/// `blindspot_decrease_samples + 1` samples, their headings differ by the
/// merge angle (within tolerance), and the nearer of them is inside
/// `blindspot_distance`. Returns either nothing or one event per vehicle,
/// ordered by subject.
pub fn detect_blind_spot(
    emitter: NodeId,
    a: &TrackState,
    b: &TrackState,
    merge_angle_deg: f64,
    th: &Thresholds,
) -> Vec<AlertEvent> {
    let n = th.blindspot_decrease_samples + 1;
    if a.id == b.id || a.len() < n || b.len() < n {
        return Vec::new();
    }
    // Canonical order keeps the result independent of argument order.
    let (first, second) = if a.id <= b.id { (a, b) } else { (b, a) };
    let (Some(l1), Some(l2)) = (first.latest(), second.latest()) else {
        return Vec::new();
    };
    let Ok(point) = geo::collision_point(l1.pose.pos, l1.pose.heading, l2.pose.pos, l2.pose.heading) else {
        return Vec::new();
    };

    let closing = |t: &TrackState| strictly_decreasing(t.recent(n).map(|s| geo::distance(s.pose.pos, point)));
    if !closing(first) || !closing(second) {
        return Vec::new();
    }
    let diff = geo::heading_difference(l1.pose.heading, l2.pose.heading);
    if (diff - merge_angle_deg).abs() > th.merge_angle_tolerance {
        return Vec::new();
    }
    let nearest = geo::distance(l1.pose.pos, point).min(geo::distance(l2.pose.pos, point));
    if !(nearest < th.blindspot_distance) {
        return Vec::new();
    }
    let timestamp_ms = l1.t_ms.max(l2.t_ms);
    [first.id, second.id]
        .into_iter()
        .map(|subject| AlertEvent {
            kind: AlertKind::BlindSpotCollision,
            emitter,
            subject: Some(subject),
            location: Some(point),
            timestamp_ms,
            severity: Severity::Critical,
        })
        .collect()
}

/// Ask vehicles just ahead of an emergency vehicle to make way.
///
/// One event per neighbor that is in the front sector and strictly closer
/// than `giveway_distance`. Severity is critical when the emergency vehicle
/// is closing faster than 5 m/s.
pub fn detect_give_way(ev: &TrackState, neighbors: &[TrackState], th: &Thresholds) -> Result<Vec<AlertEvent>, AlertError> {
    if !ev.id.is_emergency() {
        return Err(AlertError::NotEmergency(ev.id));
    }
    let Some(me) = ev.latest() else { return Ok(Vec::new()) };
    let mut out = Vec::new();
    for nb in neighbors {
        if nb.id == ev.id {
            continue;
        }
        let Some(other) = nb.latest() else { continue };
        let d = geo::distance(me.pose.pos, other.pose.pos);
        if !(d < th.giveway_distance) {
            continue;
        }
        // Coincident positions have no bearing; skip them.
        if geo::relative_bearing_class(&me.pose, other.pose.pos) != Ok(BearingClass::Front) {
            continue;
        }
        let closing = me.pose.speed - other.pose.speed;
        out.push(AlertEvent {
            kind: AlertKind::EvGiveWay,
            emitter: ev.id,
            subject: Some(nb.id),
            location: Some(other.pose.pos),
            timestamp_ms: me.t_ms,
            severity: if closing > GIVE_WAY_CRITICAL_CLOSING_MPS { Severity::Critical } else { Severity::Warn },
        });
    }
    Ok(out)
}

/// Vehicles that should hear about a vulnerable road user spotted near an
/// RSU: inside `vru_radius` of the RSU and getting closer to it.
pub fn vru_alert_targets(rsu_position: LocalPoint, tracks: &[TrackState], th: &Thresholds) -> Vec<NodeId> {
    tracks
        .iter()
        .filter(|t| {
            let mut last_two = t.recent(2).map(|s| geo::distance(s.pose.pos, rsu_position));
            match (last_two.next(), last_two.next()) {
                (Some(before), Some(now)) => now < th.vru_radius && now < before,
                _ => false,
            }
        })
        .map(|t| t.id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::Heading;
    use proptest::prelude::*;

    fn lp(x: f64, y: f64) -> LocalPoint {
        LocalPoint { x, y }
    }

    fn rsu() -> NodeId {
        NodeId::rsu(1).unwrap()
    }

    fn speed_track(speeds: &[f64]) -> TrackState {
        TrackState::from_samples(
            NodeId::obu(5).unwrap(),
            speeds.iter().enumerate().map(|(i, &v)| TrackSample {
                t_ms: i as u64 * 100,
                pose: Pose2D::new(lp(0.0, i as f64 * 2.0), Heading::NORTH, v),
                imu: ImuSample::default(),
            }),
        )
        .unwrap()
    }

    fn straight(id: NodeId, start: LocalPoint, heading: Heading, speed: f64, n: usize, t0: u64) -> TrackState {
        let (dx, dy) = heading.unit_vector();
        TrackState::from_samples(
            id,
            (0..n).map(|i| {
                let t = i as f64 * 0.1;
                TrackSample {
                    t_ms: t0 + i as u64 * 100,
                    pose: Pose2D::new(lp(start.x + dx * speed * t, start.y + dy * speed * t), heading, speed),
                    imu: ImuSample::default(),
                }
            }),
        )
        .unwrap()
    }

    /// Recomputes all six drops by hand.
    fn brake_oracle(speeds: &[f64], threshold: f64) -> bool {
        if speeds.len() < 7 {
            return false;
        }
        let w = &speeds[speeds.len() - 7..];
        let mut fired = false;
        for i in 0..6 {
            if w[i] - w[i + 1] > threshold {
                fired = true;
            }
        }
        fired
    }

    #[test]
    fn track_rejects_non_increasing_and_caps() {
        let mut t = speed_track(&[1.0; 40]);
        assert_eq!(t.len(), TRACK_CAPACITY);
        assert_eq!(t.samples().next().unwrap().t_ms, 800);
        let s = *t.latest().unwrap();
        assert!(t.push(s).is_err());
    }

    #[test]
    fn brake_examples() {
        let th = Thresholds::default();
        let ev = detect_emergency_brake(rsu(), &speed_track(&[20.0, 20.0, 20.0, 20.0, 20.0, 18.0, 15.0]), &th).unwrap();
        assert_eq!(ev.kind, AlertKind::EmergencyBrake);
        assert_eq!(ev.severity, Severity::Critical);
        assert_eq!(ev.subject, NodeId::obu(5).ok());
        assert_eq!(ev.location, Some(lp(0.0, 12.0)));
        assert!(detect_emergency_brake(rsu(), &speed_track(&[20.0; 7]), &th).is_none());
        let gentle = [20.0, 19.9, 19.8, 19.7, 19.6, 19.5, 19.4];
        assert!(detect_emergency_brake(rsu(), &speed_track(&gentle), &th).is_none());
    }

    #[test]
    fn brake_needs_full_window() {
        let th = Thresholds::default();
        let speeds = [20.0, 20.0, 15.0, 15.0, 15.0, 15.0, 15.0];
        for n in 1..7 {
            assert!(detect_emergency_brake(rsu(), &speed_track(&speeds[..n]), &th).is_none(), "fired with {n} samples");
        }
        assert!(detect_emergency_brake(rsu(), &speed_track(&speeds), &th).is_some());
    }

    #[test]
    fn brake_threshold_is_strict() {
        let th = Thresholds { brake_drop_per_packet: 1.0, ..Default::default() };
        let at = [10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 9.0];
        assert!(detect_emergency_brake(rsu(), &speed_track(&at), &th).is_none());
        let over = [10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 8.99];
        assert!(detect_emergency_brake(rsu(), &speed_track(&over), &th).is_some());
    }

    fn imu_track(samples: &[(f64, f64, f64)]) -> TrackState {
        TrackState::from_samples(
            NodeId::obu(9).unwrap(),
            samples.iter().enumerate().map(|(i, &(speed, yaw, accel_y))| TrackSample {
                t_ms: i as u64 * 100,
                pose: Pose2D::new(lp(0.0, 0.0), Heading::NORTH, speed),
                imu: ImuSample { yaw_rate: yaw, accel_y, ..Default::default() },
            }),
        )
        .unwrap()
    }

    #[test]
    fn abnormal_examples() {
        let th = Thresholds::default();
        let swerving = imu_track(&[(10.0, 45.0, 0.0), (10.0, -45.0, 0.0), (10.0, 45.0, 0.0)]);
        let ev = detect_abnormal(rsu(), &swerving, &th).unwrap();
        assert_eq!(ev.kind, AlertKind::AbnormalVehicle);
        assert_eq!(ev.severity, Severity::Warn);
        assert!(detect_abnormal(rsu(), &imu_track(&[(10.0, 0.0, 0.0); 5]), &th).is_none());
        assert!(detect_abnormal(rsu(), &imu_track(&[(3.0, 45.0, 1.0); 5]), &th).is_none());
        // Lateral acceleration alone is enough, regardless of speed.
        assert!(detect_abnormal(rsu(), &imu_track(&[(3.0, 0.0, 5.0); 3]), &th).is_some());
        // Persistence: one calm sample among the last three blocks it.
        let blip = imu_track(&[(10.0, 45.0, 0.0), (10.0, 0.0, 0.0), (10.0, 45.0, 0.0)]);
        assert!(detect_abnormal(rsu(), &blip, &th).is_none());
        assert!(detect_abnormal(rsu(), &imu_track(&[(10.0, 45.0, 0.0); 2]), &th).is_none());
    }

    /// T-junction: one vehicle northbound up x = 0, one westbound along
    /// y = 0, both 40 m from the corner at the newest sample, 10 m/s.
    fn t_junction(second_speed: f64) -> (TrackState, TrackState) {
        let a = straight(NodeId::emergency(1).unwrap(), lp(0.0, -43.0), Heading::NORTH, 10.0, 4, 0);
        let b_start = if second_speed > 0.0 { lp(43.0, 0.0) } else { lp(40.0, 0.0) };
        let b = straight(NodeId::obu(2).unwrap(), b_start, Heading::WEST, second_speed, 4, 0);
        (a, b)
    }

    #[test]
    fn blind_spot_t_junction() {
        let th = Thresholds::default();
        let (a, b) = t_junction(10.0);
        assert!((geo::distance(a.latest().unwrap().pose.pos, LocalPoint::ORIGIN) - 40.0).abs() < 1e-9);
        let events = detect_blind_spot(a.id, &a, &b, 90.0, &th);
        assert_eq!(events.len(), 2);
        let subjects: Vec<_> = events.iter().map(|e| e.subject.unwrap()).collect();
        assert!(subjects.contains(&a.id) && subjects.contains(&b.id));
        for e in &events {
            let p = e.location.unwrap();
            assert!(p.x.abs() < 1e-9 && p.y.abs() < 1e-9, "{p:?}");
            assert_eq!(e.kind, AlertKind::BlindSpotCollision);
        }
    }

    #[test]
    fn blind_spot_negative_cases() {
        let th = Thresholds::default();
        let (a, b) = t_junction(0.0);
        assert!(detect_blind_spot(a.id, &a, &b, 90.0, &th).is_empty(), "stationary vehicle");

        let (a, b) = t_junction(10.0);
        assert!(detect_blind_spot(a.id, &a, &b, 45.0, &th).is_empty(), "wrong merge angle");

        let far_a = straight(NodeId::obu(1).unwrap(), lp(0.0, -83.0), Heading::NORTH, 10.0, 4, 0);
        let far_b = straight(NodeId::obu(2).unwrap(), lp(83.0, 0.0), Heading::WEST, 10.0, 4, 0);
        assert!(detect_blind_spot(far_a.id, &far_a, &far_b, 90.0, &th).is_empty(), "too far");

        let lane1 = straight(NodeId::obu(1).unwrap(), lp(0.0, 0.0), Heading::NORTH, 10.0, 4, 0);
        let lane2 = straight(NodeId::obu(2).unwrap(), lp(3.5, 0.0), Heading::NORTH, 12.0, 4, 0);
        assert!(detect_blind_spot(lane1.id, &lane1, &lane2, 0.0, &th).is_empty(), "parallel lanes");

        let short = straight(NodeId::obu(2).unwrap(), lp(43.0, 0.0), Heading::WEST, 10.0, 3, 0);
        assert!(detect_blind_spot(a.id, &a, &short, 90.0, &th).is_empty(), "not enough history");

        // Receding from the point behind both vehicles.
        let away_a = straight(NodeId::obu(1).unwrap(), lp(0.0, 10.0), Heading::NORTH, 10.0, 4, 0);
        let away_b = straight(NodeId::obu(2).unwrap(), lp(-10.0, 0.0), Heading::WEST, 10.0, 4, 0);
        assert!(detect_blind_spot(away_a.id, &away_a, &away_b, 90.0, &th).is_empty(), "receding");
    }

    fn pose_track(id: NodeId, pos: LocalPoint, heading: Heading, speed: f64) -> TrackState {
        TrackState::from_samples(
            id,
            [TrackSample { t_ms: 1000, pose: Pose2D::new(pos, heading, speed), imu: ImuSample::default() }],
        )
        .unwrap()
    }

    #[test]
    fn give_way_examples() {
        let th = Thresholds::default();
        let ev = pose_track(NodeId::emergency(1).unwrap(), LocalPoint::ORIGIN, Heading::NORTH, 15.0);
        let nb = |serial, pos, speed| pose_track(NodeId::obu(serial).unwrap(), pos, Heading::NORTH, speed);

        let out = detect_give_way(&ev, &[nb(2, lp(0.0, 25.0), 12.0)], &th).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].subject, NodeId::obu(2).ok());
        assert_eq!(out[0].emitter, ev.id);
        assert_eq!(out[0].severity, Severity::Warn);

        assert!(detect_give_way(&ev, &[nb(2, lp(0.0, 30.0), 12.0)], &th).unwrap().is_empty());
        assert!(detect_give_way(&ev, &[nb(2, lp(0.0, -10.0), 12.0)], &th).unwrap().is_empty());
        assert!(detect_give_way(&ev, &[nb(2, lp(10.0, 0.0), 12.0)], &th).unwrap().is_empty());

        let slow = detect_give_way(&ev, &[nb(3, lp(0.0, 20.0), 2.0)], &th).unwrap();
        assert_eq!(slow[0].severity, Severity::Critical);

        let commercial = pose_track(NodeId::obu(9).unwrap(), LocalPoint::ORIGIN, Heading::NORTH, 15.0);
        assert_eq!(detect_give_way(&commercial, &[], &th), Err(AlertError::NotEmergency(commercial.id)));

        // Never targets itself.
        let itself = pose_track(ev.id, lp(0.0, 5.0), Heading::NORTH, 15.0);
        assert!(detect_give_way(&ev, &[itself], &th).unwrap().is_empty());
    }

    fn two_sample(id: u32, d_before: f64, d_now: f64) -> TrackState {
        TrackState::from_samples(
            NodeId::obu(id).unwrap(),
            [(0, d_before), (100, d_now)].map(|(t, d)| TrackSample {
                t_ms: t,
                pose: Pose2D::new(lp(0.0, -d), Heading::NORTH, 10.0),
                imu: ImuSample::default(),
            }),
        )
        .unwrap()
    }

    #[test]
    fn vru_targets() {
        let th = Thresholds::default();
        let tracks = [two_sample(1, 101.0, 100.0), two_sample(2, 99.0, 100.0), two_sample(3, 501.0, 500.0)];
        assert_eq!(vru_alert_targets(LocalPoint::ORIGIN, &tracks, &th), vec![NodeId::obu(1).unwrap()]);
        let single = pose_track(NodeId::obu(4).unwrap(), lp(0.0, -10.0), Heading::NORTH, 5.0);
        assert!(vru_alert_targets(LocalPoint::ORIGIN, &[single], &th).is_empty());
    }

    #[test]
    fn threshold_validation() {
        assert!(Thresholds::default().violations().is_empty());
        let bad = Thresholds { brake_window: 5, giveway_distance: 0.0, ..Default::default() };
        assert_eq!(bad.violations(), vec!["giveway_distance", "brake_window"]);
    }

    proptest! {
        #[test]
        fn brake_matches_oracle(speeds in prop::collection::vec(0.0..40.0f64, 0..20), threshold in 0.1..5.0f64) {
            let th = Thresholds { brake_drop_per_packet: threshold, ..Default::default() };
            let fired = detect_emergency_brake(rsu(), &speed_track(&speeds), &th).is_some();
            prop_assert_eq!(fired, brake_oracle(&speeds, threshold));
        }

        #[test]
        fn brake_ignores_speed_offset(speeds in prop::collection::vec(5.0..30.0f64, 7..12), offset in 0.0..10.0f64) {
            let th = Thresholds::default();
            // Offsets are kept dyadic so the differences are bit-identical.
            let offset = (offset * 8.0).round() / 8.0;
            let speeds: Vec<f64> = speeds.iter().map(|v| (v * 8.0).round() / 8.0).collect();
            let shifted: Vec<f64> = speeds.iter().map(|v| v + offset).collect();
            prop_assert_eq!(
                detect_emergency_brake(rsu(), &speed_track(&speeds), &th).is_some(),
                detect_emergency_brake(rsu(), &speed_track(&shifted), &th).is_some()
            );
        }

        #[test]
        fn blind_spot_symmetric(
            ax in -60.0..60.0f64, ay in -60.0..60.0f64, ah in 0.0..360.0f64, av in 0.0..15.0f64,
            bx in -60.0..60.0f64, by in -60.0..60.0f64, bh in 0.0..360.0f64, bv in 0.0..15.0f64,
            merge in 0.0..180.0f64,
        ) {
            let th = Thresholds::default();
            let a = straight(NodeId::obu(1).unwrap(), lp(ax, ay), Heading::from_compass(ah), av, 5, 0);
            let b = straight(NodeId::obu(2).unwrap(), lp(bx, by), Heading::from_compass(bh), bv, 5, 0);
            prop_assert_eq!(detect_blind_spot(rsu(), &a, &b, merge, &th), detect_blind_spot(rsu(), &b, &a, merge, &th));
        }

        #[test]
        fn give_way_at_most_one_per_neighbor(
            positions in prop::collection::vec((-40.0..40.0f64, -40.0..40.0f64), 0..12),
        ) {
            let th = Thresholds::default();
            let ev = pose_track(NodeId::emergency(1).unwrap(), LocalPoint::ORIGIN, Heading::NORTH, 15.0);
            let mut neighbors: Vec<TrackState> = positions
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| pose_track(NodeId::obu(i as u32 + 2).unwrap(), lp(x, y), Heading::NORTH, 10.0))
                .collect();
            neighbors.push(ev.clone());
            let out = detect_give_way(&ev, &neighbors, &th).unwrap();
            let mut subjects: Vec<_> = out.iter().map(|e| e.subject.unwrap()).collect();
            let n = subjects.len();
            subjects.dedup();
            prop_assert_eq!(subjects.len(), n);
            prop_assert!(!subjects.contains(&ev.id));
        }

        #[test]
        fn blind_spot_rigid_motion_invariant(angle in 0.0..360.0f64, cx in -500.0..500.0f64, cy in -500.0..500.0f64) {
            let th = Thresholds::default();
            let center = lp(cx, cy);
            let rotate = |t: &TrackState| {
                TrackState::from_samples(
                    t.id,
                    t.samples().map(|s| TrackSample {
                        pose: Pose2D::new(s.pose.pos.rotated_about(center, angle), s.pose.heading.rotated_ccw(angle), s.pose.speed),
                        ..*s
                    }),
                )
                .unwrap()
            };
            for second_speed in [10.0, 0.0] {
                let (a, b) = t_junction(second_speed);
                let before = detect_blind_spot(a.id, &a, &b, 90.0, &th).len();
                let after = detect_blind_spot(a.id, &rotate(&a), &rotate(&b), 90.0, &th).len();
                prop_assert_eq!(before, after);
            }
        }
    }
}
