//! Planar kinematic geometry.
//!
//! Positions arrive as GPS fixes and are flattened onto a local east/north
//! plane (meters from a scenario origin) with an equirectangular projection.
//! Headings are stored the way GPS reports them: compass degrees, clockwise
//! from true north. Anything that needs a mathematical angle goes through
//! [`to_math_angle`].

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Mean Earth radius used by the projection, meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Sanity bound on local coordinates.
pub const LOCAL_BOUND_M: f64 = 1e7;

/// Below this |sin Δθ| two headings are treated as parallel.
pub const PARALLEL_EPS: f64 = 1e-9;

/// Minimum separation for a bearing to be meaningful.
pub const COINCIDENT_EPS_M: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("{field} out of range: {value}")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("projection origin latitude {0} too close to a pole")]
    PolarOrigin(f64),
    #[error("lines are parallel; no intersection")]
    NoIntersection,
    #[error("points are coincident")]
    Coincident,
}

/// A WGS-84 style geographic position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !self.lat.is_finite() || !self.lon.is_finite() {
            return Err(GeoError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(GeoError::OutOfRange { field: "lat", value: self.lat });
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(GeoError::OutOfRange { field: "lon", value: self.lon });
        }
        Ok(())
    }
}

/// Meters east (`x`) and north (`y`) of the scenario origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalPoint {
    pub x: f64,
    pub y: f64,
}

impl LocalPoint {
    pub const ORIGIN: LocalPoint = LocalPoint { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Result<Self, GeoError> {
        let p = LocalPoint { x, y };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(GeoError::NonFinite);
        }
        if self.x.abs() >= LOCAL_BOUND_M {
            return Err(GeoError::OutOfRange { field: "x", value: self.x });
        }
        if self.y.abs() >= LOCAL_BOUND_M {
            return Err(GeoError::OutOfRange { field: "y", value: self.y });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Linear interpolation, `frac` in [0, 1].
    pub fn lerp(self, other: LocalPoint, frac: f64) -> LocalPoint {
        LocalPoint {
            x: self.x + (other.x - self.x) * frac,
            y: self.y + (other.y - self.y) * frac,
        }
    }

    /// Rotate counterclockwise by `deg` about `center`.
    pub fn rotated_about(self, center: LocalPoint, deg: f64) -> LocalPoint {
        let (s, c) = deg.to_radians().sin_cos();
        let dx = self.x - center.x;
        let dy = self.y - center.y;
        LocalPoint {
            x: center.x + dx * c - dy * s,
            y: center.y + dx * s + dy * c,
        }
    }
}

/// Compass heading in degrees, clockwise from true north, in [0, 360).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Heading(f64);

impl Heading {
    pub const NORTH: Heading = Heading(0.0);
    pub const EAST: Heading = Heading(90.0);
    pub const SOUTH: Heading = Heading(180.0);
    pub const WEST: Heading = Heading(270.0);

    /// Normalizes any finite angle into [0, 360).
    pub fn from_compass(deg: f64) -> Heading {
        let mut h = deg.rem_euclid(360.0);
        // rem_euclid rounds tiny negatives up to exactly 360.
        if h >= 360.0 {
            h = 0.0;
        }
        Heading(h)
    }

    /// Heading whose mathematical angle (counterclockwise from +x) is `rad`.
    pub fn from_math_angle(rad: f64) -> Heading {
        Heading::from_compass(90.0 - rad.to_degrees())
    }

    pub fn degrees(self) -> f64 {
        self.0
    }

    /// Unit direction of travel in the local frame, `(east, north)`.
    pub fn unit_vector(self) -> (f64, f64) {
        let (s, c) = self.0.to_radians().sin_cos();
        (s, c)
    }

    /// Rotate counterclockwise (in the map sense) by `deg`.
    pub fn rotated_ccw(self, deg: f64) -> Heading {
        Heading::from_compass(self.0 - deg)
    }
}

/// Absolute circular difference between two headings, in [0, 180].
pub fn heading_difference(a: Heading, b: Heading) -> f64 {
    signed_angle_deg(a.0 - b.0).abs()
}

/// Normalizes degrees into (-180, 180].
pub fn signed_angle_deg(deg: f64) -> f64 {
    let mut d = (deg + 180.0).rem_euclid(360.0) - 180.0;
    if d <= -180.0 {
        d += 360.0;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub pos: LocalPoint,
    pub heading: Heading,
    /// Meters per second, never negative.
    pub speed: f64,
}

impl Pose2D {
    pub fn new(pos: LocalPoint, heading: Heading, speed: f64) -> Self {
        Pose2D { pos, heading, speed: speed.max(0.0) }
    }
}

/// Equirectangular projection of `p` onto the plane tangent at `origin`.
pub fn project(origin: GeoPoint, p: GeoPoint) -> Result<LocalPoint, GeoError> {
    origin.validate()?;
    p.validate()?;
    if origin.lat.abs() >= 85.0 {
        return Err(GeoError::PolarOrigin(origin.lat));
    }
    let k = PI / 180.0 * EARTH_RADIUS_M;
    let x = (p.lon - origin.lon) * k * origin.lat.to_radians().cos();
    let y = (p.lat - origin.lat) * k;
    LocalPoint::new(x, y)
}

/// Inverse of [`project`].
pub fn unproject(origin: GeoPoint, p: LocalPoint) -> Result<GeoPoint, GeoError> {
    origin.validate()?;
    p.validate()?;
    if origin.lat.abs() >= 85.0 {
        return Err(GeoError::PolarOrigin(origin.lat));
    }
    let k = PI / 180.0 * EARTH_RADIUS_M;
    let lat = origin.lat + p.y / k;
    let lon = origin.lon + p.x / (k * origin.lat.to_radians().cos());
    GeoPoint::new(lat, lon)
}

/// Compass heading to a mathematical angle in radians, (-π, π].
/// North maps to π/2, east to 0.
pub fn to_math_angle(h: Heading) -> f64 {
    signed_angle_deg(90.0 - h.0).to_radians()
}

pub fn distance(a: LocalPoint, b: LocalPoint) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Compass bearing from `from` to `to`.
pub fn bearing(from: LocalPoint, to: LocalPoint) -> Heading {
    Heading::from_compass((to.x - from.x).atan2(to.y - from.y).to_degrees())
}

/// Where the carrier lines of two headed vehicles cross.
///
/// This is the predicted collision point of two vehicles at an
/// intersection. The closed forms
///
/// ```text
/// x3 = ((y2 - y1) - (x2 tan θ2 - x1 tan θ1)) / (tan θ1 - tan θ2)
/// y3 = ((x2 - x1) - (y2 cot θ2 - y1 cot θ1)) / (cot θ1 - cot θ2)
/// ```
///
/// blow up whenever a heading is axis aligned, so the point is computed as
/// the meet of the two homogeneous lines instead, in double-double
/// arithmetic so that near-parallel pairs still round correctly. The result
/// is a line intersection: it may lie behind either vehicle.
pub fn collision_point(
    p1: LocalPoint,
    th1: Heading,
    p2: LocalPoint,
    th2: Heading,
) -> Result<LocalPoint, GeoError> {
    if !p1.is_finite() || !p2.is_finite() || !th1.0.is_finite() || !th2.0.is_finite() {
        return Err(GeoError::NonFinite);
    }
    let d1 = th1.unit_vector();
    let d2 = th2.unit_vector();
    intersect_lines(p1, d1, p2, d2)
}

/// Intersection of `p1 + t·d1` and `p2 + s·d2`.
pub(crate) fn intersect_lines(
    p1: LocalPoint,
    d1: (f64, f64),
    p2: LocalPoint,
    d2: (f64, f64),
) -> Result<LocalPoint, GeoError> {
    use dd::Dd;

    // sin of the angle from d1 to d2.
    let denom = Dd::cross(d1.0, d1.1, d2.0, d2.1);
    let norm = (d1.0.hypot(d1.1)) * (d2.0.hypot(d2.1));
    if !(denom.hi.abs() >= PARALLEL_EPS * norm) {
        return Err(GeoError::NoIntersection);
    }
    // Work relative to p1 so the line through p1 has no constant term.
    let qx = Dd::diff(p2.x, p1.x);
    let qy = Dd::diff(p2.y, p1.y);
    let num = qx.mul_f64(d2.1).sub(qy.mul_f64(d2.0));
    let t = num.div(denom);
    let x = Dd::from(p1.x).add(t.mul_f64(d1.0)).to_f64();
    let y = Dd::from(p1.y).add(t.mul_f64(d1.1)).to_f64();
    if !x.is_finite() || !y.is_finite() {
        return Err(GeoError::NoIntersection);
    }
    Ok(LocalPoint { x, y })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BearingClass {
    Front,
    Back,
    Left,
    Right,
}

/// Which side of `observer` the point `other` is on.
///
/// Sectors are ±45° around the nose (front) and tail (back); the 45° and
/// 135° boundaries belong to front and back respectively.
pub fn relative_bearing_class(observer: &Pose2D, other: LocalPoint) -> Result<BearingClass, GeoError> {
    if !observer.pos.is_finite() || !other.is_finite() {
        return Err(GeoError::NonFinite);
    }
    if distance(observer.pos, other) <= COINCIDENT_EPS_M {
        return Err(GeoError::Coincident);
    }
    let beta = signed_angle_deg(bearing(observer.pos, other).0 - observer.heading.0);
    Ok(classify_relative_angle(beta))
}

/// Sector for a relative angle already normalized to (-180, 180].
pub fn classify_relative_angle(beta: f64) -> BearingClass {
    if beta.abs() <= 45.0 {
        BearingClass::Front
    } else if beta.abs() >= 135.0 {
        BearingClass::Back
    } else if beta > 0.0 {
        BearingClass::Right
    } else {
        BearingClass::Left
    }
}

/// Minimal double-double arithmetic for the intersection solve.
mod dd {
    #[derive(Debug, Clone, Copy)]
    pub struct Dd {
        pub hi: f64,
        pub lo: f64,
    }

    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        let e = (a - (s - bb)) + (b - bb);
        Dd { hi: s, lo: e }
    }

    fn quick_two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        Dd { hi: s, lo: b - (s - a) }
    }

    fn two_prod(a: f64, b: f64) -> Dd {
        let p = a * b;
        Dd { hi: p, lo: a.mul_add(b, -p) }
    }

    impl From<f64> for Dd {
        fn from(v: f64) -> Self {
            Dd { hi: v, lo: 0.0 }
        }
    }

    impl Dd {
        /// Exact `a - b`.
        pub fn diff(a: f64, b: f64) -> Dd {
            two_sum(a, -b)
        }

        /// `ax·by − ay·bx`.
        pub fn cross(ax: f64, ay: f64, bx: f64, by: f64) -> Dd {
            two_prod(ax, by).sub(two_prod(ay, bx))
        }

        pub fn add(self, o: Dd) -> Dd {
            let s = two_sum(self.hi, o.hi);
            let t = two_sum(self.lo, o.lo);
            let s = quick_two_sum(s.hi, s.lo + t.hi);
            quick_two_sum(s.hi, s.lo + t.lo)
        }

        pub fn sub(self, o: Dd) -> Dd {
            self.add(Dd { hi: -o.hi, lo: -o.lo })
        }

        pub fn mul_f64(self, b: f64) -> Dd {
            let p = two_prod(self.hi, b);
            quick_two_sum(p.hi, p.lo + self.lo * b)
        }

        pub fn mul(self, o: Dd) -> Dd {
            let p = two_prod(self.hi, o.hi);
            quick_two_sum(p.hi, p.lo + (self.hi * o.lo + self.lo * o.hi))
        }

        pub fn div(self, o: Dd) -> Dd {
            let q1 = self.hi / o.hi;
            let r = self.sub(o.mul(Dd::from(q1)));
            let q2 = r.hi / o.hi;
            let r = r.sub(o.mul(Dd::from(q2)));
            let q3 = r.hi / o.hi;
            quick_two_sum(q1, q2).add(Dd::from(q3))
        }

        pub fn to_f64(self) -> f64 {
            self.hi + self.lo
        }
    }
}
