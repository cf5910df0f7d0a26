//! Binary framing for everything exchanged between OBUs, RSUs and the base
//! station.
//!
//! A frame is a fixed 20-byte header, a typed payload and a trailing CRC-32:
//!
//! ```text
//! offset  size  field
//!      0     2  magic 0x56 0x32 ("V2")
//!      2     1  version (1)
//!      3     1  msg_type
//!      4     4  sender NodeId
//!      8     2  seq (wrapping)
//!     10     8  timestamp_ms since scenario epoch
//!     18     2  payload_len
//!     20     n  payload
//!   20+n     4  CRC-32 (IEEE, reflected) over bytes [0, 20+n)
//! ```
//!
//! All integers are big-endian. Payload fields are fixed point, following
//! the J2735 BSM Part I scales: 1e-7 degrees, 0.01 m/s, 0.01 degrees.

use crate::alerts::ImuSample;
use crate::geo::{self, GeoError, GeoPoint, Heading, Pose2D};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x56, 0x32];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
pub const CRC_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 1000;
pub const MAX_FRAME: usize = 1024;

pub const BSM_LEN: usize = 22;
pub const BEACON_LEN: usize = 10;
pub const ALERT_LEN: usize = 14;
pub const ADVISORY_LEN: usize = 18;
pub const VRU_LEN: usize = 13;
/// Fixed part of a base report; followed by one byte per active alert kind.
pub const BASE_REPORT_MIN_LEN: usize = 17;
pub const MAX_REPORT_ALERTS: usize = 8;

const DEG_SCALE: f64 = 1e7;
const NO_MERGE_ANGLE: u16 = u16::MAX;

const RSU_BIT: u32 = 1 << 31;
const EMERGENCY_BIT: u32 = 1 << 30;
const SERIAL_MASK: u32 = EMERGENCY_BIT - 1;

/// Sender identity. Bit 31 marks an RSU, bit 30 an emergency OBU, the low
/// 30 bits are the serial number (0 is reserved as "unassigned").
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Obu,
    Rsu,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NodeIdError {
    #[error("serial 0 is reserved")]
    ZeroSerial,
    #[error("serial {0} does not fit in 30 bits")]
    SerialTooLarge(u32),
    #[error("RSU id with emergency flag: {0:#010x}")]
    EmergencyRsu(u32),
    #[error("unparseable node id {0:?}")]
    Parse(String),
}

impl NodeId {
    pub fn obu(serial: u32) -> Result<NodeId, NodeIdError> {
        Self::check_serial(serial)?;
        Ok(NodeId(serial))
    }

    pub fn emergency(serial: u32) -> Result<NodeId, NodeIdError> {
        Self::check_serial(serial)?;
        Ok(NodeId(serial | EMERGENCY_BIT))
    }

    pub fn rsu(serial: u32) -> Result<NodeId, NodeIdError> {
        Self::check_serial(serial)?;
        Ok(NodeId(serial | RSU_BIT))
    }

    pub fn vehicle(serial: u32, emergency: bool) -> Result<NodeId, NodeIdError> {
        if emergency {
            Self::emergency(serial)
        } else {
            Self::obu(serial)
        }
    }

    fn check_serial(serial: u32) -> Result<(), NodeIdError> {
        if serial == 0 {
            Err(NodeIdError::ZeroSerial)
        } else if serial > SERIAL_MASK {
            Err(NodeIdError::SerialTooLarge(serial))
        } else {
            Ok(())
        }
    }

    pub fn from_raw(raw: u32) -> Result<NodeId, NodeIdError> {
        if raw & RSU_BIT != 0 && raw & EMERGENCY_BIT != 0 {
            return Err(NodeIdError::EmergencyRsu(raw));
        }
        if raw & SERIAL_MASK == 0 {
            return Err(NodeIdError::ZeroSerial);
        }
        Ok(NodeId(raw))
    }

    pub fn raw(self) -> u32 {
        self.0
    }

    pub fn kind(self) -> NodeKind {
        if self.0 & RSU_BIT != 0 {
            NodeKind::Rsu
        } else {
            NodeKind::Obu
        }
    }

    pub fn is_rsu(self) -> bool {
        self.kind() == NodeKind::Rsu
    }

    pub fn is_emergency(self) -> bool {
        !self.is_rsu() && self.0 & EMERGENCY_BIT != 0
    }

    pub fn serial(self) -> u32 {
        self.0 & SERIAL_MASK
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = if self.is_rsu() {
            "RSU"
        } else if self.is_emergency() {
            "EV"
        } else {
            "OBU"
        };
        write!(f, "{prefix}-{}", self.serial())
    }
}

impl FromStr for NodeId {
    type Err = NodeIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || NodeIdError::Parse(s.to_string());
        let (prefix, serial) = s.split_once('-').ok_or_else(err)?;
        let serial: u32 = serial.parse().map_err(|_| err())?;
        match prefix {
            "OBU" => NodeId::obu(serial),
            "EV" => NodeId::emergency(serial),
            "RSU" => NodeId::rsu(serial),
            _ => Err(err()),
        }
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgType {
    Bsm = 1,
    RsuBeacon = 2,
    Alert = 3,
    Advisory = 4,
    VruEvent = 5,
    BaseReport = 6,
}

impl MsgType {
    pub fn from_code(code: u8) -> Option<MsgType> {
        Some(match code {
            1 => MsgType::Bsm,
            2 => MsgType::RsuBeacon,
            3 => MsgType::Alert,
            4 => MsgType::Advisory,
            5 => MsgType::VruEvent,
            6 => MsgType::BaseReport,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertKind {
    AbnormalVehicle = 1,
    EmergencyBrake = 2,
    VruOnPath = 3,
    BlindSpotCollision = 4,
    EvGiveWay = 5,
    EvApproaching = 6,
    RouteBlocked = 7,
    RouteClear = 8,
}

impl AlertKind {
    pub const ALL: [AlertKind; 8] = [
        AlertKind::AbnormalVehicle,
        AlertKind::EmergencyBrake,
        AlertKind::VruOnPath,
        AlertKind::BlindSpotCollision,
        AlertKind::EvGiveWay,
        AlertKind::EvApproaching,
        AlertKind::RouteBlocked,
        AlertKind::RouteClear,
    ];

    pub fn from_code(code: u8) -> Option<AlertKind> {
        AlertKind::ALL.get((code as usize).wrapping_sub(1)).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            AlertKind::AbnormalVehicle => "ABNORMAL_VEHICLE",
            AlertKind::EmergencyBrake => "EMERGENCY_BRAKE",
            AlertKind::VruOnPath => "VRU_ON_PATH",
            AlertKind::BlindSpotCollision => "BLIND_SPOT_COLLISION",
            AlertKind::EvGiveWay => "EV_GIVE_WAY",
            AlertKind::EvApproaching => "EV_APPROACHING",
            AlertKind::RouteBlocked => "ROUTE_BLOCKED",
            AlertKind::RouteClear => "ROUTE_CLEAR",
        }
    }

    pub fn is_advisory(self) -> bool {
        matches!(self, AlertKind::RouteBlocked | AlertKind::RouteClear)
    }
}

impl fmt::Display for AlertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlertKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AlertKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown alert kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info = 1,
    Warn = 2,
    Critical = 3,
}

impl Severity {
    pub fn from_code(code: u8) -> Option<Severity> {
        Some(match code {
            1 => Severity::Info,
            2 => Severity::Warn,
            3 => Severity::Critical,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VruClass {
    Pedestrian = 1,
    Dog = 2,
    Cow = 3,
    Cat = 4,
    Other = 5,
}

impl VruClass {
    pub fn from_code(code: u8) -> Option<VruClass> {
        Some(match code {
            1 => VruClass::Pedestrian,
            2 => VruClass::Dog,
            3 => VruClass::Cow,
            4 => VruClass::Cat,
            5 => VruClass::Other,
            _ => return None,
        })
    }
}

/// Fixed-point latitude/longitude, 1e-7 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FixedGeo {
    pub lat: i32,
    pub lon: i32,
}

impl FixedGeo {
    pub fn from_geo(p: GeoPoint) -> FixedGeo {
        FixedGeo {
            lat: (p.lat * DEG_SCALE).round() as i32,
            lon: (p.lon * DEG_SCALE).round() as i32,
        }
    }

    pub fn to_geo(self) -> GeoPoint {
        GeoPoint { lat: self.lat as f64 / DEG_SCALE, lon: self.lon as f64 / DEG_SCALE }
    }

    fn check(self) -> Result<(), &'static str> {
        if self.lat.unsigned_abs() > 900_000_000 {
            return Err("lat");
        }
        if self.lon.unsigned_abs() > 1_800_000_000 {
            return Err("lon");
        }
        Ok(())
    }

    fn is_zero(self) -> bool {
        self.lat == 0 && self.lon == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BsmPayload {
    pub lat: i32,
    pub lon: i32,
    /// 0.1 m
    pub elev: i16,
    /// 0.01 m/s
    pub speed: u16,
    /// 0.01 degrees compass, [0, 36000)
    pub heading: u16,
    /// 0.01 m/s²
    pub accel_x: i16,
    pub accel_y: i16,
    pub accel_z: i16,
    /// 0.01 deg/s
    pub yaw_rate: i16,
}

fn sat_i16(v: f64) -> i16 {
    v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

fn sat_u16(v: f64) -> u16 {
    v.round().clamp(0.0, u16::MAX as f64) as u16
}

impl BsmPayload {
    /// Quantizes physical values; out-of-range values saturate.
    pub fn from_physical(position: GeoPoint, elev_m: f64, pose: &Pose2D, imu: &ImuSample) -> BsmPayload {
        let fixed = FixedGeo::from_geo(position);
        let mut heading = (pose.heading.degrees() * 100.0).round() as u32;
        if heading >= 36000 {
            heading = 0;
        }
        BsmPayload {
            lat: fixed.lat,
            lon: fixed.lon,
            elev: sat_i16(elev_m * 10.0),
            speed: sat_u16(pose.speed * 100.0),
            heading: heading as u16,
            accel_x: sat_i16(imu.accel_x * 100.0),
            accel_y: sat_i16(imu.accel_y * 100.0),
            accel_z: sat_i16(imu.accel_z * 100.0),
            yaw_rate: sat_i16(imu.yaw_rate * 100.0),
        }
    }

    pub fn position(&self) -> GeoPoint {
        FixedGeo { lat: self.lat, lon: self.lon }.to_geo()
    }

    pub fn speed_mps(&self) -> f64 {
        self.speed as f64 / 100.0
    }

    pub fn heading(&self) -> Heading {
        Heading::from_compass(self.heading as f64 / 100.0)
    }

    pub fn imu(&self) -> ImuSample {
        ImuSample {
            accel_x: self.accel_x as f64 / 100.0,
            accel_y: self.accel_y as f64 / 100.0,
            accel_z: self.accel_z as f64 / 100.0,
            yaw_rate: self.yaw_rate as f64 / 100.0,
        }
    }

    fn check(&self) -> Result<(), &'static str> {
        FixedGeo { lat: self.lat, lon: self.lon }.check()?;
        if self.heading >= 36000 {
            return Err("heading");
        }
        Ok(())
    }
}

/// Converts a received BSM into the receiver's local frame.
pub fn bsm_to_pose(p: &BsmPayload, origin: GeoPoint) -> Result<(Pose2D, ImuSample), GeoError> {
    let pos = geo::project(origin, p.position())?;
    Ok((Pose2D::new(pos, p.heading(), p.speed_mps()), p.imu()))
}

/// Periodic RSU announcement: where it is and the merge angle of the
/// intersection it watches, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeaconPayload {
    pub lat: i32,
    pub lon: i32,
    /// 0.01 degrees; `None` when the RSU is not at a merge.
    pub merge_angle: Option<u16>,
}

impl BeaconPayload {
    pub fn merge_angle_deg(&self) -> Option<f64> {
        self.merge_angle.map(|a| a as f64 / 100.0)
    }

    pub fn position(&self) -> GeoPoint {
        FixedGeo { lat: self.lat, lon: self.lon }.to_geo()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertPayload {
    pub alert_kind: AlertKind,
    /// Vehicle the alert is about.
    pub subject: Option<NodeId>,
    /// Alert location; `None` encodes as 0/0.
    pub location: Option<FixedGeo>,
    pub severity: Severity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvisoryPayload {
    pub advisory_id: u32,
    pub alert_kind: AlertKind,
    pub location: Option<FixedGeo>,
    pub severity: Severity,
    /// Remaining lifetime at transmission.
    pub remaining_ms: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VruPayload {
    pub class: VruClass,
    pub lat: i32,
    pub lon: i32,
    /// Vehicle being warned; `None` addresses everyone in range.
    pub target: Option<NodeId>,
}

impl VruPayload {
    pub fn position(&self) -> GeoPoint {
        FixedGeo { lat: self.lat, lon: self.lon }.to_geo()
    }
}

/// RSU-to-base uplink record. The reporting RSU and the report time are
/// the frame's sender and timestamp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseReportPayload {
    pub vehicle: NodeId,
    pub lat: i32,
    pub lon: i32,
    pub speed: u16,
    pub heading: u16,
    pub alerts: Vec<AlertKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "msg_type", content = "body", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Payload {
    Bsm(BsmPayload),
    RsuBeacon(BeaconPayload),
    Alert(AlertPayload),
    Advisory(AdvisoryPayload),
    VruEvent(VruPayload),
    BaseReport(BaseReportPayload),
}

impl Payload {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Payload::Bsm(_) => MsgType::Bsm,
            Payload::RsuBeacon(_) => MsgType::RsuBeacon,
            Payload::Alert(_) => MsgType::Alert,
            Payload::Advisory(_) => MsgType::Advisory,
            Payload::VruEvent(_) => MsgType::VruEvent,
            Payload::BaseReport(_) => MsgType::BaseReport,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameHeader {
    pub sender: NodeId,
    pub seq: u16,
    pub timestamp_ms: u64,
}

/// A decoded frame. Magic, version, msg_type, payload length and CRC are
/// implied by the contents and produced by [`encode`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub header: FrameHeader,
    pub payload: Payload,
}

impl Frame {
    pub fn new(sender: NodeId, seq: u16, timestamp_ms: u64, payload: Payload) -> Frame {
        Frame { header: FrameHeader { sender, seq, timestamp_ms }, payload }
    }

    pub fn msg_type(&self) -> MsgType {
        self.payload.msg_type()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    Oversize(usize),
    #[error("field `{0}` violates its invariant")]
    Invariant(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("bad length")]
    BadLength,
    #[error("crc mismatch")]
    BadCrc,
    #[error("field `{0}` out of range")]
    BadRange(&'static str),
    #[error("unknown msg_type {0}")]
    UnknownMsgType(u8),
}

/// CRC-32/ISO-HDLC (the Ethernet polynomial, reflected).
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

fn put_geo(out: &mut Vec<u8>, g: Option<FixedGeo>) {
    let g = g.unwrap_or_default();
    out.extend_from_slice(&g.lat.to_be_bytes());
    out.extend_from_slice(&g.lon.to_be_bytes());
}

fn put_node(out: &mut Vec<u8>, n: Option<NodeId>) {
    out.extend_from_slice(&n.map_or(0, NodeId::raw).to_be_bytes());
}

fn encode_payload(payload: &Payload, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    match payload {
        Payload::Bsm(b) => {
            b.check().map_err(EncodeError::Invariant)?;
            out.extend_from_slice(&b.lat.to_be_bytes());
            out.extend_from_slice(&b.lon.to_be_bytes());
            out.extend_from_slice(&b.elev.to_be_bytes());
            out.extend_from_slice(&b.speed.to_be_bytes());
            out.extend_from_slice(&b.heading.to_be_bytes());
            out.extend_from_slice(&b.accel_x.to_be_bytes());
            out.extend_from_slice(&b.accel_y.to_be_bytes());
            out.extend_from_slice(&b.accel_z.to_be_bytes());
            out.extend_from_slice(&b.yaw_rate.to_be_bytes());
        }
        Payload::RsuBeacon(b) => {
            FixedGeo { lat: b.lat, lon: b.lon }.check().map_err(EncodeError::Invariant)?;
            if b.merge_angle.is_some_and(|a| a >= 36000) {
                return Err(EncodeError::Invariant("merge_angle"));
            }
            put_geo(out, Some(FixedGeo { lat: b.lat, lon: b.lon }));
            out.extend_from_slice(&b.merge_angle.unwrap_or(NO_MERGE_ANGLE).to_be_bytes());
        }
        Payload::Alert(a) => {
            if let Some(g) = a.location {
                g.check().map_err(EncodeError::Invariant)?;
            }
            out.push(a.alert_kind.code());
            put_node(out, a.subject);
            put_geo(out, a.location);
            out.push(a.severity as u8);
        }
        Payload::Advisory(a) => {
            if !a.alert_kind.is_advisory() {
                return Err(EncodeError::Invariant("alert_kind"));
            }
            if let Some(g) = a.location {
                g.check().map_err(EncodeError::Invariant)?;
            }
            out.extend_from_slice(&a.advisory_id.to_be_bytes());
            out.push(a.alert_kind.code());
            put_geo(out, a.location);
            out.push(a.severity as u8);
            out.extend_from_slice(&a.remaining_ms.to_be_bytes());
        }
        Payload::VruEvent(v) => {
            FixedGeo { lat: v.lat, lon: v.lon }.check().map_err(EncodeError::Invariant)?;
            out.push(v.class as u8);
            put_geo(out, Some(FixedGeo { lat: v.lat, lon: v.lon }));
            put_node(out, v.target);
        }
        Payload::BaseReport(r) => {
            FixedGeo { lat: r.lat, lon: r.lon }.check().map_err(EncodeError::Invariant)?;
            if r.heading >= 36000 {
                return Err(EncodeError::Invariant("heading"));
            }
            if r.alerts.len() > MAX_REPORT_ALERTS {
                return Err(EncodeError::Invariant("alerts"));
            }
            if r.vehicle.is_rsu() {
                return Err(EncodeError::Invariant("vehicle"));
            }
            put_node(out, Some(r.vehicle));
            put_geo(out, Some(FixedGeo { lat: r.lat, lon: r.lon }));
            out.extend_from_slice(&r.speed.to_be_bytes());
            out.extend_from_slice(&r.heading.to_be_bytes());
            out.push(r.alerts.len() as u8);
            out.extend(r.alerts.iter().map(|k| k.code()));
        }
    }
    Ok(())
}

/// Serializes a frame. Identical input always yields identical bytes.
pub fn encode(frame: &Frame) -> Result<Vec<u8>, EncodeError> {
    let mut payload = Vec::with_capacity(32);
    encode_payload(&frame.payload, &mut payload)?;
    if payload.len() > MAX_PAYLOAD {
        return Err(EncodeError::Oversize(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + CRC_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.msg_type().code());
    out.extend_from_slice(&frame.header.sender.raw().to_be_bytes());
    out.extend_from_slice(&frame.header.seq.to_be_bytes());
    out.extend_from_slice(&frame.header.timestamp_ms.to_be_bytes());
    out.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

/// Bounds-checked big-endian reader over a payload slice.
struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        if self.buf.len() < N {
            return Err(DecodeError::BadLength);
        }
        let (head, rest) = self.buf.split_at(N);
        self.buf = rest;
        Ok(head.try_into().expect("split_at yields N bytes"))
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.take()?))
    }
    fn i16(&mut self) -> Result<i16, DecodeError> {
        Ok(i16::from_be_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take()?))
    }
    fn i32(&mut self) -> Result<i32, DecodeError> {
        Ok(i32::from_be_bytes(self.take()?))
    }

    fn geo(&mut self) -> Result<FixedGeo, DecodeError> {
        let g = FixedGeo { lat: self.i32()?, lon: self.i32()? };
        g.check().map_err(DecodeError::BadRange)?;
        Ok(g)
    }

    fn node(&mut self, field: &'static str) -> Result<Option<NodeId>, DecodeError> {
        match self.u32()? {
            0 => Ok(None),
            raw => NodeId::from_raw(raw).map(Some).map_err(|_| DecodeError::BadRange(field)),
        }
    }

    fn alert_kind(&mut self) -> Result<AlertKind, DecodeError> {
        AlertKind::from_code(self.u8()?).ok_or(DecodeError::BadRange("alert_kind"))
    }

    fn severity(&mut self) -> Result<Severity, DecodeError> {
        Severity::from_code(self.u8()?).ok_or(DecodeError::BadRange("severity"))
    }
}

fn decode_payload(msg_type: MsgType, bytes: &[u8]) -> Result<Payload, DecodeError> {
    let expected = match msg_type {
        MsgType::Bsm => Some(BSM_LEN),
        MsgType::RsuBeacon => Some(BEACON_LEN),
        MsgType::Alert => Some(ALERT_LEN),
        MsgType::Advisory => Some(ADVISORY_LEN),
        MsgType::VruEvent => Some(VRU_LEN),
        MsgType::BaseReport => None,
    };
    if expected.is_some_and(|n| n != bytes.len()) {
        return Err(DecodeError::BadLength);
    }
    let mut r = Reader { buf: bytes };
    let payload = match msg_type {
        MsgType::Bsm => {
            let b = BsmPayload {
                lat: r.i32()?,
                lon: r.i32()?,
                elev: r.i16()?,
                speed: r.u16()?,
                heading: r.u16()?,
                accel_x: r.i16()?,
                accel_y: r.i16()?,
                accel_z: r.i16()?,
                yaw_rate: r.i16()?,
            };
            b.check().map_err(DecodeError::BadRange)?;
            Payload::Bsm(b)
        }
        MsgType::RsuBeacon => {
            let g = r.geo()?;
            let merge = r.u16()?;
            let merge_angle = match merge {
                NO_MERGE_ANGLE => None,
                a if a < 36000 => Some(a),
                _ => return Err(DecodeError::BadRange("merge_angle")),
            };
            Payload::RsuBeacon(BeaconPayload { lat: g.lat, lon: g.lon, merge_angle })
        }
        MsgType::Alert => {
            let alert_kind = r.alert_kind()?;
            let subject = r.node("subject")?;
            let g = r.geo()?;
            let severity = r.severity()?;
            Payload::Alert(AlertPayload {
                alert_kind,
                subject,
                location: (!g.is_zero()).then_some(g),
                severity,
            })
        }
        MsgType::Advisory => {
            let advisory_id = r.u32()?;
            let alert_kind = r.alert_kind()?;
            if !alert_kind.is_advisory() {
                return Err(DecodeError::BadRange("alert_kind"));
            }
            let g = r.geo()?;
            let severity = r.severity()?;
            let remaining_ms = r.u32()?;
            Payload::Advisory(AdvisoryPayload {
                advisory_id,
                alert_kind,
                location: (!g.is_zero()).then_some(g),
                severity,
                remaining_ms,
            })
        }
        MsgType::VruEvent => {
            let class = VruClass::from_code(r.u8()?).ok_or(DecodeError::BadRange("class"))?;
            let g = r.geo()?;
            let target = r.node("target")?;
            Payload::VruEvent(VruPayload { class, lat: g.lat, lon: g.lon, target })
        }
        MsgType::BaseReport => {
            if bytes.len() < BASE_REPORT_MIN_LEN {
                return Err(DecodeError::BadLength);
            }
            let vehicle = r.node("vehicle")?.ok_or(DecodeError::BadRange("vehicle"))?;
            if vehicle.is_rsu() {
                return Err(DecodeError::BadRange("vehicle"));
            }
            let g = r.geo()?;
            let speed = r.u16()?;
            let heading = r.u16()?;
            if heading >= 36000 {
                return Err(DecodeError::BadRange("heading"));
            }
            let n = r.u8()? as usize;
            if n > MAX_REPORT_ALERTS || r.buf.len() != n {
                return Err(DecodeError::BadLength);
            }
            let alerts = (0..n).map(|_| r.alert_kind()).collect::<Result<Vec<_>, _>>()?;
            Payload::BaseReport(BaseReportPayload { vehicle, lat: g.lat, lon: g.lon, speed, heading, alerts })
        }
    };
    Ok(payload)
}

/// Parses and verifies a frame. Total over arbitrary input: every failure
/// is reported as the first check that did not hold.
pub fn decode(bytes: &[u8]) -> Result<Frame, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::BadLength);
    }
    if bytes[0..2] != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    if bytes[2] != VERSION {
        return Err(DecodeError::BadVersion(bytes[2]));
    }
    let msg_type = MsgType::from_code(bytes[3]).ok_or(DecodeError::UnknownMsgType(bytes[3]))?;
    let payload_len = u16::from_be_bytes([bytes[18], bytes[19]]) as usize;
    if payload_len > MAX_PAYLOAD || bytes.len() != HEADER_LEN + payload_len + CRC_LEN {
        return Err(DecodeError::BadLength);
    }
    let body_end = HEADER_LEN + payload_len;
    let crc = u32::from_be_bytes(bytes[body_end..].try_into().expect("4 crc bytes"));
    if crc32(&bytes[..body_end]) != crc {
        return Err(DecodeError::BadCrc);
    }
    let sender_raw = u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let sender = NodeId::from_raw(sender_raw).map_err(|_| DecodeError::BadRange("sender"))?;
    let seq = u16::from_be_bytes([bytes[8], bytes[9]]);
    let timestamp_ms = u64::from_be_bytes(bytes[10..18].try_into().expect("8 bytes"));
    let payload = decode_payload(msg_type, &bytes[HEADER_LEN..body_end])?;
    Ok(Frame { header: FrameHeader { sender, seq, timestamp_ms }, payload })
}

/// True when `seq` is newer than `last` under 16-bit wrapping order.
pub fn seq_is_newer(seq: u16, last: u16) -> bool {
    (seq.wrapping_sub(last) as i16) > 0
}
