//! Codec properties and golden vectors.
//!
//! Golden frames live in `vectors/` at the workspace root, each as
//! `<name>.hex` with its decoded form in `<name>.json`. Set `V2X_BLESS=1`
//! to rewrite them after an intentional format change.

use proptest::prelude::*;
use std::path::PathBuf;
use v2x_core::wire::{
    self, AdvisoryPayload, AlertKind, AlertPayload, BaseReportPayload, BeaconPayload, BsmPayload, DecodeError, FixedGeo,
    Frame, NodeId, Payload, Severity, VruClass, VruPayload, MAX_REPORT_ALERTS,
};

fn node() -> impl Strategy<Value = NodeId> {
    (1u32..(1 << 30), 0..3u8).prop_map(|(serial, kind)| match kind {
        0 => NodeId::obu(serial).unwrap(),
        1 => NodeId::emergency(serial).unwrap(),
        _ => NodeId::rsu(serial).unwrap(),
    })
}

fn vehicle() -> impl Strategy<Value = NodeId> {
    (1u32..(1 << 30), any::<bool>()).prop_map(|(serial, ev)| NodeId::vehicle(serial, ev).unwrap())
}

fn lat() -> impl Strategy<Value = i32> {
    -900_000_000..=900_000_000i32
}

fn lon() -> impl Strategy<Value = i32> {
    -1_800_000_000..=1_800_000_000i32
}

/// Zero encodes "no location", so `Some` never holds 0/0.
fn location() -> impl Strategy<Value = Option<FixedGeo>> {
    prop::option::of((lat(), lon()).prop_filter("0/0 means none", |&(a, b)| a != 0 || b != 0))
        .prop_map(|g| g.map(|(lat, lon)| FixedGeo { lat, lon }))
}

fn alert_kind() -> impl Strategy<Value = AlertKind> {
    prop::sample::select(AlertKind::ALL.to_vec())
}

fn severity() -> impl Strategy<Value = Severity> {
    prop::sample::select(vec![Severity::Info, Severity::Warn, Severity::Critical])
}

fn payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        (lat(), lon(), any::<i16>(), any::<u16>(), 0..36000u16, any::<[i16; 4]>()).prop_map(
            |(lat, lon, elev, speed, heading, [ax, ay, az, yaw])| Payload::Bsm(BsmPayload {
                lat,
                lon,
                elev,
                speed,
                heading,
                accel_x: ax,
                accel_y: ay,
                accel_z: az,
                yaw_rate: yaw,
            })
        ),
        (lat(), lon(), prop::option::of(0..36000u16))
            .prop_map(|(lat, lon, merge_angle)| Payload::RsuBeacon(BeaconPayload { lat, lon, merge_angle })),
        (alert_kind(), prop::option::of(node()), location(), severity()).prop_map(
            |(alert_kind, subject, location, severity)| Payload::Alert(AlertPayload {
                alert_kind,
                subject,
                location,
                severity
            })
        ),
        (
            any::<u32>(),
            prop::sample::select(vec![AlertKind::RouteBlocked, AlertKind::RouteClear]),
            location(),
            severity(),
            any::<u32>()
        )
            .prop_map(|(advisory_id, alert_kind, location, severity, remaining_ms)| {
                Payload::Advisory(AdvisoryPayload { advisory_id, alert_kind, location, severity, remaining_ms })
            }),
        (
            prop::sample::select(vec![VruClass::Pedestrian, VruClass::Dog, VruClass::Cow, VruClass::Cat, VruClass::Other]),
            lat(),
            lon(),
            prop::option::of(node())
        )
            .prop_map(|(class, lat, lon, target)| Payload::VruEvent(VruPayload { class, lat, lon, target })),
        (vehicle(), lat(), lon(), any::<u16>(), 0..36000u16, prop::collection::vec(alert_kind(), 0..=MAX_REPORT_ALERTS))
            .prop_map(|(vehicle, lat, lon, speed, heading, alerts)| Payload::BaseReport(BaseReportPayload {
                vehicle,
                lat,
                lon,
                speed,
                heading,
                alerts
            })),
    ]
}

fn frame() -> impl Strategy<Value = Frame> {
    (node(), any::<u16>(), any::<u64>(), payload())
        .prop_map(|(sender, seq, ts, payload)| Frame::new(sender, seq, ts, payload))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn round_trip(f in frame()) {
        let bytes = wire::encode(&f).unwrap();
        prop_assert_eq!(wire::decode(&bytes), Ok(f));
    }

    #[test]
    fn decode_is_total(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
        let _ = wire::decode(&bytes);
    }

    /// Random tails behind a valid header reach the payload checks.
    #[test]
    fn decode_is_total_behind_valid_header(msg_type in 0u8..8, body in prop::collection::vec(any::<u8>(), 0..64)) {
        let mut bytes = vec![0x56, 0x32, 1, msg_type, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        bytes.extend_from_slice(&(body.len() as u16).to_be_bytes());
        bytes.extend_from_slice(&body);
        let crc = wire::crc32(&bytes);
        bytes.extend_from_slice(&crc.to_be_bytes());
        if let Ok(f) = wire::decode(&bytes) {
            prop_assert_eq!(wire::encode(&f).unwrap(), bytes);
        }
    }
}

fn golden_frames() -> Vec<(&'static str, Frame)> {
    let ev = NodeId::emergency(7).unwrap();
    let obu = NodeId::obu(12).unwrap();
    let rsu = NodeId::rsu(1).unwrap();
    let here = FixedGeo { lat: 176_012_345, lon: 781_234_567 };
    vec![
        (
            "bsm",
            Frame::new(
                ev,
                4242,
                1_000_100,
                Payload::Bsm(BsmPayload {
                    lat: here.lat,
                    lon: here.lon,
                    elev: 5421,
                    speed: 1667,
                    heading: 27_000,
                    accel_x: -350,
                    accel_y: 12,
                    accel_z: 981,
                    yaw_rate: -150,
                }),
            ),
        ),
        ("rsu_beacon", Frame::new(rsu, 9, 2_000, Payload::RsuBeacon(BeaconPayload { lat: here.lat, lon: here.lon, merge_angle: Some(9000) }))),
        (
            "alert",
            Frame::new(
                rsu,
                77,
                3_500,
                Payload::Alert(AlertPayload {
                    alert_kind: AlertKind::EvApproaching,
                    subject: Some(ev),
                    location: Some(here),
                    severity: Severity::Warn,
                }),
            ),
        ),
        (
            "advisory",
            Frame::new(
                rsu,
                78,
                3_600,
                Payload::Advisory(AdvisoryPayload {
                    advisory_id: 3,
                    alert_kind: AlertKind::RouteBlocked,
                    location: Some(here),
                    severity: Severity::Critical,
                    remaining_ms: 9_400,
                }),
            ),
        ),
        (
            "vru_event",
            Frame::new(
                rsu,
                79,
                3_700,
                Payload::VruEvent(VruPayload { class: VruClass::Pedestrian, lat: here.lat, lon: here.lon, target: Some(obu) }),
            ),
        ),
        (
            "base_report",
            Frame::new(
                rsu,
                80,
                4_000,
                Payload::BaseReport(BaseReportPayload {
                    vehicle: ev,
                    lat: here.lat,
                    lon: here.lon,
                    speed: 1667,
                    heading: 27_000,
                    alerts: vec![AlertKind::EvGiveWay, AlertKind::EmergencyBrake],
                }),
            ),
        ),
    ]
}

fn vectors_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../vectors")
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn from_hex(s: &str) -> Vec<u8> {
    let s: String = s.split_whitespace().collect();
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

#[test]
fn golden_vectors() {
    let bless = std::env::var_os("V2X_BLESS").is_some();
    for (name, frame) in golden_frames() {
        let hex_path = vectors_dir().join(format!("{name}.hex"));
        let json_path = vectors_dir().join(format!("{name}.json"));
        let encoded = wire::encode(&frame).unwrap();
        if bless {
            std::fs::write(&hex_path, to_hex(&encoded) + "\n").unwrap();
            std::fs::write(&json_path, serde_json::to_string_pretty(&frame).unwrap() + "\n").unwrap();
        }
        let read = |p: &PathBuf| std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        let golden = from_hex(&read(&hex_path));
        assert_eq!(to_hex(&encoded), to_hex(&golden), "{name}: encoding changed");
        assert_eq!(wire::decode(&golden).as_ref(), Ok(&frame), "{name}");
        let decoded: Frame = serde_json::from_str(&read(&json_path)).unwrap();
        assert_eq!(decoded, frame, "{name}: decoded JSON differs");
    }
}

#[test]
fn golden_frame_sizes() {
    let sizes: Vec<(&str, usize)> =
        golden_frames().iter().map(|(n, f)| (*n, wire::encode(f).unwrap().len())).collect();
    assert_eq!(
        sizes,
        vec![("bsm", 46), ("rsu_beacon", 34), ("alert", 38), ("advisory", 42), ("vru_event", 37), ("base_report", 43)]
    );
}

#[test]
fn every_single_byte_corruption_is_rejected() {
    for (name, frame) in golden_frames() {
        let good = wire::encode(&frame).unwrap();
        for i in 0..good.len() {
            for delta in 1..=255u8 {
                let mut bad = good.clone();
                bad[i] ^= delta;
                assert!(wire::decode(&bad).is_err(), "{name}: byte {i} ^ {delta:#04x} accepted");
            }
        }
    }
}

#[test]
fn truncation_and_extension_are_rejected() {
    for (name, frame) in golden_frames() {
        let good = wire::encode(&frame).unwrap();
        for n in 0..good.len() {
            assert!(wire::decode(&good[..n]).is_err(), "{name}: truncated to {n}");
        }
        let mut long = good.clone();
        long.push(0);
        assert_eq!(wire::decode(&long), Err(DecodeError::BadLength), "{name}");
    }
}
