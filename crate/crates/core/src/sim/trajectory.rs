//! Waypoint trajectories and the kinematics derived from them.

use super::scenario::VehicleSpec;
use crate::alerts::ImuSample;
use crate::geo::{self, GeoError, GeoPoint, Heading, LocalPoint, Pose2D};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("t = {t} ms outside the trajectory span [{start}, {end}]")]
    OutOfRange { t: u64, start: u64, end: u64 },
    #[error("need at least two waypoints with increasing times")]
    Degenerate,
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    t0: u64,
    t1: u64,
    p0: LocalPoint,
    p1: LocalPoint,
    speed: f64,
    heading: Heading,
}

/// A vehicle path in the local frame, ready for sampling.
#[derive(Debug, Clone)]
pub struct Trajectory {
    segments: Vec<Segment>,
    overrides: Vec<(u64, ImuSample)>,
}

impl Trajectory {
    pub fn new(spec: &VehicleSpec, origin: GeoPoint) -> Result<Trajectory, TrajectoryError> {
        let points = spec
            .waypoints
            .iter()
            .map(|w| Ok((w.t_ms, w.position.to_local(origin)?)))
            .collect::<Result<Vec<_>, GeoError>>()?;
        if points.len() < 2 || points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(TrajectoryError::Degenerate);
        }
        let mut segments: Vec<Segment> = points
            .windows(2)
            .map(|w| {
                let (t0, p0) = w[0];
                let (t1, p1) = w[1];
                let len = geo::distance(p0, p1);
                Segment { t0, t1, p0, p1, speed: len / ((t1 - t0) as f64 / 1000.0), heading: geo::bearing(p0, p1) }
            })
            .collect();

        // A stationary segment keeps the heading of the motion around it.
        let moving: Vec<Option<Heading>> =
            segments.iter().map(|s| (s.p0 != s.p1).then_some(s.heading)).collect();
        let first_moving = moving.iter().flatten().next().copied().unwrap_or(Heading::NORTH);
        let mut last = first_moving;
        for (seg, h) in segments.iter_mut().zip(moving) {
            match h {
                Some(h) => last = h,
                None => seg.heading = last,
            }
        }

        let mut overrides: Vec<(u64, ImuSample)> = spec.imu_override.iter().map(|o| (o.t_ms, o.imu)).collect();
        overrides.sort_by_key(|(t, _)| *t);
        Ok(Trajectory { segments, overrides })
    }

    pub fn start_ms(&self) -> u64 {
        self.segments[0].t0
    }

    pub fn end_ms(&self) -> u64 {
        self.segments[self.segments.len() - 1].t1
    }

    pub fn contains(&self, t: u64) -> bool {
        (self.start_ms()..=self.end_ms()).contains(&t)
    }

    fn segment_index(&self, t: u64) -> usize {
        // The segment that starts at or before t; the final instant belongs
        // to the last segment.
        self.segments.partition_point(|s| s.t1 <= t).min(self.segments.len() - 1)
    }

    /// Pose and IMU at `t`.
    ///
    /// Position is interpolated linearly; speed and heading are those of the
    /// current segment. Around each interior waypoint the change in speed
    /// and heading is spread over a window reaching halfway into both
    /// adjacent segments, which gives `accel_x` and `yaw_rate` there and
    /// zero elsewhere.
    pub fn sample(&self, t: u64) -> Result<(Pose2D, ImuSample), TrajectoryError> {
        if !self.contains(t) {
            return Err(TrajectoryError::OutOfRange { t, start: self.start_ms(), end: self.end_ms() });
        }
        let i = self.segment_index(t);
        let seg = self.segments[i];
        let frac = (t - seg.t0) as f64 / (seg.t1 - seg.t0) as f64;
        let pos = if t == seg.t1 { seg.p1 } else { seg.p0.lerp(seg.p1, frac) };
        let pose = Pose2D::new(pos, seg.heading, seg.speed);

        let mut imu = ImuSample::default();
        for j in [i, i + 1] {
            // Junction j sits between segments j-1 and j.
            if j == 0 || j >= self.segments.len() {
                continue;
            }
            let (before, after) = (self.segments[j - 1], self.segments[j]);
            let junction = after.t0 as f64;
            let lo = junction - (before.t1 - before.t0) as f64 / 2.0;
            let hi = junction + (after.t1 - after.t0) as f64 / 2.0;
            let tf = t as f64;
            if tf >= lo && tf < hi {
                let window_s = (hi - lo) / 1000.0;
                imu.accel_x = (after.speed - before.speed) / window_s;
                // Compass angles grow clockwise; yaw is positive counterclockwise.
                let turn = geo::signed_angle_deg(after.heading.degrees() - before.heading.degrees());
                imu.yaw_rate = -turn / window_s;
                imu.accel_y = pose.speed * imu.yaw_rate.to_radians();
            }
        }
        if let Ok(k) = self.overrides.binary_search_by_key(&t, |(ot, _)| *ot) {
            imu = self.overrides[k].1;
        }
        Ok((pose, imu))
    }
}

/// One-off sampling without keeping the trajectory around.
pub fn interpolate_pose(spec: &VehicleSpec, t: u64, origin: GeoPoint) -> Result<(Pose2D, ImuSample), TrajectoryError> {
    Trajectory::new(spec, origin)?.sample(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::{ImuOverride, Position, Waypoint};
    use crate::wire::NodeId;

    const ORIGIN: GeoPoint = GeoPoint { lat: 17.6, lon: 78.12 };

    fn spec(points: &[(u64, f64, f64)]) -> VehicleSpec {
        VehicleSpec {
            id: NodeId::obu(1).unwrap(),
            emergency: None,
            waypoints: points
                .iter()
                .map(|&(t_ms, x, y)| Waypoint { t_ms, position: Position::Local(LocalPoint { x, y }) })
                .collect(),
            imu_override: Vec::new(),
        }
    }

    #[test]
    fn midpoint_of_straight_segment() {
        let (pose, imu) = interpolate_pose(&spec(&[(0, 0.0, 0.0), (10_000, 0.0, 100.0)]), 5000, ORIGIN).unwrap();
        assert_eq!(pose.pos, LocalPoint { x: 0.0, y: 50.0 });
        assert_eq!(pose.speed, 10.0);
        assert_eq!(pose.heading.degrees(), 0.0);
        assert_eq!(imu, ImuSample::default());
    }

    #[test]
    fn waypoint_times_give_exact_positions() {
        let s = spec(&[(0, 1.0, 2.0), (1000, 11.0, 2.0), (2500, 11.0, -8.0)]);
        let tr = Trajectory::new(&s, ORIGIN).unwrap();
        assert_eq!(tr.sample(0).unwrap().0.pos, LocalPoint { x: 1.0, y: 2.0 });
        assert_eq!(tr.sample(1000).unwrap().0.pos, LocalPoint { x: 11.0, y: 2.0 });
        assert_eq!(tr.sample(2500).unwrap().0.pos, LocalPoint { x: 11.0, y: -8.0 });
    }

    #[test]
    fn speed_drop_gives_junction_deceleration() {
        // 20 m/s for 1 s then 5 m/s for 1 s.
        let s = spec(&[(0, 0.0, 0.0), (1000, 0.0, 20.0), (2000, 0.0, 25.0)]);
        let tr = Trajectory::new(&s, ORIGIN).unwrap();
        let (pose, imu) = tr.sample(1000).unwrap();
        assert_eq!(pose.speed, 5.0);
        assert_eq!(imu.accel_x, -15.0);
        assert_eq!(tr.sample(500).unwrap().1.accel_x, -15.0);
        assert_eq!(tr.sample(400).unwrap().1.accel_x, 0.0);
        assert_eq!(tr.sample(1500).unwrap().1.accel_x, 0.0);
    }

    #[test]
    fn left_turn_has_positive_yaw() {
        // North for 1 s, then west for 1 s: a 90 degree left turn.
        let s = spec(&[(0, 0.0, 0.0), (1000, 0.0, 10.0), (2000, -10.0, 10.0)]);
        let (_, imu) = interpolate_pose(&s, 1000, ORIGIN).unwrap();
        assert_eq!(imu.yaw_rate, 90.0);
        assert!((imu.accel_y - 10.0 * 90f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn stationary_segments_keep_heading() {
        let s = spec(&[(0, 0.0, 0.0), (1000, 10.0, 0.0), (3000, 10.0, 0.0)]);
        let (pose, _) = interpolate_pose(&s, 2000, ORIGIN).unwrap();
        assert_eq!(pose.speed, 0.0);
        assert_eq!(pose.heading, Heading::EAST);
        let parked = spec(&[(0, 5.0, 5.0), (1000, 5.0, 5.0)]);
        assert_eq!(interpolate_pose(&parked, 0, ORIGIN).unwrap().0.heading, Heading::NORTH);
    }

    #[test]
    fn override_replaces_at_matching_time_only() {
        let mut s = spec(&[(0, 0.0, 0.0), (1000, 0.0, 10.0)]);
        let hard = ImuSample { accel_x: 0.0, accel_y: 6.0, accel_z: 0.0, yaw_rate: 45.0 };
        s.imu_override.push(ImuOverride { t_ms: 300, imu: hard });
        let tr = Trajectory::new(&s, ORIGIN).unwrap();
        assert_eq!(tr.sample(300).unwrap().1, hard);
        assert_eq!(tr.sample(400).unwrap().1, ImuSample::default());
    }

    #[test]
    fn out_of_range() {
        let s = spec(&[(100, 0.0, 0.0), (1000, 0.0, 10.0)]);
        assert!(matches!(interpolate_pose(&s, 50, ORIGIN), Err(TrajectoryError::OutOfRange { .. })));
        assert!(matches!(interpolate_pose(&s, 1001, ORIGIN), Err(TrajectoryError::OutOfRange { .. })));
    }
}
