//! Scenario documents (`*.scenario.json`) and their validation.

use crate::alerts::{ImuSample, Thresholds};
use crate::channel::{ChannelParams, Obstruction};
use crate::geo::{self, GeoPoint, LocalPoint};
use crate::nodes::NodeConfig;
use crate::uplink::{AdvisoryCommand, MAX_ADVISORY_TTL_MS, MIN_ADVISORY_TTL_MS};
use crate::wire::{AlertKind, NodeId, VruClass};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// A position given either geographically or directly in the local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Position {
    Geo(GeoPoint),
    Local(LocalPoint),
}

impl Position {
    pub fn to_local(self, origin: GeoPoint) -> Result<LocalPoint, geo::GeoError> {
        match self {
            Position::Geo(g) => geo::project(origin, g),
            Position::Local(p) => {
                p.validate()?;
                Ok(p)
            }
        }
    }

    pub fn to_geo(self, origin: GeoPoint) -> Result<GeoPoint, geo::GeoError> {
        match self {
            Position::Geo(g) => {
                g.validate()?;
                Ok(g)
            }
            Position::Local(p) => geo::unproject(origin, p),
        }
    }
}

impl From<LocalPoint> for Position {
    fn from(p: LocalPoint) -> Self {
        Position::Local(p)
    }
}

impl From<GeoPoint> for Position {
    fn from(p: GeoPoint) -> Self {
        Position::Geo(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsuSpec {
    pub id: NodeId,
    pub position: Position,
    /// Angle between the merging roads at this RSU's intersection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_angle_deg: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t_ms: u64,
    pub position: Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuOverride {
    pub t_ms: u64,
    pub imu: ImuSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub id: NodeId,
    /// Optional; when present it must agree with the id prefix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emergency: Option<bool>,
    pub waypoints: Vec<Waypoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub imu_override: Vec<ImuOverride>,
}

fn default_vru_duration() -> u64 {
    5000
}

/// A camera sighting handed to the nearest RSU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VruSpec {
    pub t_ms: u64,
    pub position: Position,
    pub class: VruClass,
    #[serde(default = "default_vru_duration")]
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorCommand {
    pub t_ms: u64,
    pub kind: AlertKind,
    pub target_rsu: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Position>,
    pub ttl_ms: u64,
    #[serde(default)]
    pub operator: String,
}

impl OperatorCommand {
    pub fn to_command(&self, origin: GeoPoint) -> AdvisoryCommand {
        AdvisoryCommand {
            kind: self.kind,
            target_rsu: self.target_rsu,
            location: self.location.and_then(|p| p.to_geo(origin).ok()),
            ttl_ms: self.ttl_ms,
            operator: self.operator.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseStationSpec {
    /// Remote base station; in-process when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Turn RSU brake detections straight into ROUTE_BLOCKED advisories.
    pub auto_confirm_route_blocked: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub operator_commands: Vec<OperatorCommand>,
}

fn default_tick() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub origin: GeoPoint,
    pub duration_ms: u64,
    #[serde(default = "default_tick")]
    pub tick_ms: u64,
    /// Seeds the channel; takes precedence over `channel.seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub channel: ChannelParams,
    #[serde(default)]
    pub obstructions: Vec<Obstruction>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub nodes: NodeConfig,
    #[serde(default)]
    pub rsus: Vec<RsuSpec>,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub vru_events: Vec<VruSpec>,
    #[serde(default)]
    pub base_station: BaseStationSpec,
}

/// One violated invariant, located by a JSON-pointer-like path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("scenario has {} problem(s):\n{}", .0.len(), .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Issue>),
}

struct Issues(Vec<Issue>);

impl Issues {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(Issue { path: path.into(), message: message.into() });
    }
}

impl Scenario {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text)?;
        let issues = scenario.validate();
        if issues.is_empty() {
            Ok(scenario)
        } else {
            Err(ScenarioError::Invalid(issues))
        }
    }

    /// Every violated invariant, in document order.
    pub fn validate(&self) -> Vec<Issue> {
        let mut out = Issues(Vec::new());
        let origin = self.origin;
        if let Err(e) = geo::project(origin, origin) {
            out.push("/origin", e.to_string());
        }
        if self.duration_ms == 0 {
            out.push("/duration_ms", "must be positive");
        }
        if self.tick_ms == 0 {
            out.push("/tick_ms", "must be positive");
        } else if !self.nodes.bsm_interval_ms.is_multiple_of(self.tick_ms) {
            out.push("/tick_ms", format!("must divide the BSM interval ({} ms)", self.nodes.bsm_interval_ms));
        }
        if let Err(e) = self.channel.validate() {
            out.push("/channel", e.to_string());
        }
        for field in self.thresholds.violations() {
            out.push(format!("/thresholds/{field}"), "out of range");
        }
        for field in self.nodes.violations() {
            out.push(format!("/nodes/{field}"), "out of range");
        }
        for (i, o) in self.obstructions.iter().enumerate() {
            if o.segment.iter().any(|p| p.validate().is_err()) {
                out.push(format!("/obstructions/{i}"), "endpoint outside the local frame");
            } else if o.segment[0] == o.segment[1] {
                out.push(format!("/obstructions/{i}"), "endpoints coincide");
            }
        }

        let mut seen: BTreeMap<NodeId, String> = BTreeMap::new();
        let mut claim = |out: &mut Issues, id: NodeId, path: String| {
            if let Some(first) = seen.get(&id) {
                out.push(path.clone(), format!("duplicate NodeId {id} (first used at {first})"));
            } else {
                seen.insert(id, path);
            }
        };

        for (i, r) in self.rsus.iter().enumerate() {
            let path = format!("/rsus/{i}");
            claim(&mut out, r.id, format!("{path}/id"));
            if !r.id.is_rsu() {
                out.push(format!("{path}/id"), format!("{} is not an RSU id", r.id));
            }
            if let Err(e) = r.position.to_local(origin).and_then(|p| geo::unproject(origin, p)) {
                out.push(format!("{path}/position"), e.to_string());
            }
            if let Some(a) = r.merge_angle_deg {
                if !(a.is_finite() && (0.0..=180.0).contains(&a)) {
                    out.push(format!("{path}/merge_angle_deg"), "must be within [0, 180]");
                }
            }
        }

        for (i, v) in self.vehicles.iter().enumerate() {
            let path = format!("/vehicles/{i}");
            claim(&mut out, v.id, format!("{path}/id"));
            if v.id.is_rsu() {
                out.push(format!("{path}/id"), format!("{} is an RSU id", v.id));
            }
            if let Some(flag) = v.emergency {
                if flag != v.id.is_emergency() {
                    out.push(format!("{path}/emergency"), format!("disagrees with id {}", v.id));
                }
            }
            if v.waypoints.len() < 2 {
                out.push(format!("{path}/waypoints"), "needs at least 2 waypoints");
            }
            for (j, w) in v.waypoints.iter().enumerate() {
                let wpath = format!("{path}/waypoints/{j}");
                if j > 0 && w.t_ms <= v.waypoints[j - 1].t_ms {
                    out.push(format!("{wpath}/t_ms"), "times must be strictly increasing");
                }
                if w.t_ms > self.duration_ms {
                    out.push(format!("{wpath}/t_ms"), "after the end of the scenario");
                }
                if let Err(e) = w.position.to_local(origin).and_then(|p| geo::unproject(origin, p)) {
                    out.push(format!("{wpath}/position"), e.to_string());
                }
            }
            for (j, o) in v.imu_override.iter().enumerate() {
                if !o.imu.is_valid() {
                    out.push(format!("{path}/imu_override/{j}/imu"), "non-finite or implausible reading");
                }
                if o.t_ms > self.duration_ms {
                    out.push(format!("{path}/imu_override/{j}/t_ms"), "after the end of the scenario");
                }
            }
        }

        for (i, e) in self.vru_events.iter().enumerate() {
            let path = format!("/vru_events/{i}");
            if e.t_ms > self.duration_ms {
                out.push(format!("{path}/t_ms"), "after the end of the scenario");
            }
            if let Err(err) = e.position.to_local(origin).and_then(|p| geo::unproject(origin, p)) {
                out.push(format!("{path}/position"), err.to_string());
            }
            if self.rsus.is_empty() {
                out.push(path, "no RSU to report the sighting");
            }
        }

        for (i, c) in self.base_station.operator_commands.iter().enumerate() {
            let path = format!("/base_station/operator_commands/{i}");
            if !c.kind.is_advisory() {
                out.push(format!("{path}/kind"), format!("{} is not an advisory kind", c.kind));
            }
            if !(MIN_ADVISORY_TTL_MS..=MAX_ADVISORY_TTL_MS).contains(&c.ttl_ms) {
                out.push(
                    format!("{path}/ttl_ms"),
                    format!("must be within [{MIN_ADVISORY_TTL_MS}, {MAX_ADVISORY_TTL_MS}]"),
                );
            }
            if !self.rsus.iter().any(|r| r.id == c.target_rsu) {
                out.push(format!("{path}/target_rsu"), format!("unknown RSU {}", c.target_rsu));
            }
            if c.t_ms > self.duration_ms {
                out.push(format!("{path}/t_ms"), "after the end of the scenario");
            }
            if let Some(Err(e)) = c.location.map(|p| p.to_geo(origin)) {
                out.push(format!("{path}/location"), e.to_string());
            }
        }
        out.0
    }

    /// Channel parameters with the scenario seed applied.
    pub fn effective_channel(&self) -> ChannelParams {
        ChannelParams { seed: self.seed, ..self.channel.clone() }
    }
}
