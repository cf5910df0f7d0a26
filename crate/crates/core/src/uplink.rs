//! The RSU ↔ base-station contract.
//!
//! RSUs push [`BaseReport`]s up and poll for directives (operator
//! advisories, camera VRU sightings). The simulator talks to the base
//! station only through [`BaseLink`], so an in-process region view, a
//! remote HTTP service and the [`LoopbackLink`] used in tests are
//! interchangeable.

use crate::geo::GeoPoint;
use crate::nodes::BaseReport;
use crate::wire::{AlertKind, NodeId, VruClass};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const MIN_ADVISORY_TTL_MS: u64 = 1_000;
pub const MAX_ADVISORY_TTL_MS: u64 = 600_000;

/// An operator request to broadcast a route advisory from one RSU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisoryCommand {
    pub kind: AlertKind,
    pub target_rsu: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
    pub ttl_ms: u64,
    #[serde(default)]
    pub operator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommandError {
    #[error("{0} is not an advisory kind")]
    NotAdvisory(AlertKind),
    #[error("ttl_ms {0} outside [{MIN_ADVISORY_TTL_MS}, {MAX_ADVISORY_TTL_MS}]")]
    TtlOutOfRange(u64),
    #[error("target {0} is not an RSU")]
    NotRsu(NodeId),
    #[error("invalid location")]
    BadLocation,
}

impl AdvisoryCommand {
    pub fn validate(&self) -> Result<(), CommandError> {
        if !self.kind.is_advisory() {
            return Err(CommandError::NotAdvisory(self.kind));
        }
        if !(MIN_ADVISORY_TTL_MS..=MAX_ADVISORY_TTL_MS).contains(&self.ttl_ms) {
            return Err(CommandError::TtlOutOfRange(self.ttl_ms));
        }
        if !self.target_rsu.is_rsu() {
            return Err(CommandError::NotRsu(self.target_rsu));
        }
        if let Some(loc) = self.location {
            loc.validate().map_err(|_| CommandError::BadLocation)?;
        }
        Ok(())
    }
}

/// An advisory handed to its target RSU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisoryOrder {
    pub id: u32,
    pub kind: AlertKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
    /// Lifetime left at hand-over.
    pub remaining_ms: u64,
}

/// A vulnerable road user spotted by a camera near an RSU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VruOrder {
    pub class: VruClass,
    pub location: GeoPoint,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RsuDirectives {
    #[serde(default)]
    pub advisories: Vec<AdvisoryOrder>,
    #[serde(default)]
    pub vru_events: Vec<VruOrder>,
}

impl RsuDirectives {
    pub fn is_empty(&self) -> bool {
        self.advisories.is_empty() && self.vru_events.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("rejected by base station: {0}")]
    Rejected(String),
    #[error("transport: {0}")]
    Transport(String),
}

pub trait BaseLink {
    fn push_reports(&mut self, reports: &[BaseReport]) -> Result<(), LinkError>;

    /// Called once per tick by every RSU. Also announces the RSU's
    /// position so the base station knows it exists.
    fn poll(&mut self, rsu: NodeId, position: GeoPoint, now_ms: u64) -> Result<RsuDirectives, LinkError>;

    fn issue_advisory(&mut self, cmd: &AdvisoryCommand, now_ms: u64) -> Result<u32, LinkError>;
}

/// Minimal base station: forwards advisories to their RSU on the next
/// poll and keeps every report it is sent.
#[derive(Debug, Default)]
pub struct LoopbackLink {
    next_id: u32,
    queued: BTreeMap<NodeId, Vec<(AdvisoryOrder, u64)>>,
    pub reports: Vec<BaseReport>,
}

impl LoopbackLink {
    pub fn new() -> LoopbackLink {
        LoopbackLink::default()
    }
}

impl BaseLink for LoopbackLink {
    fn push_reports(&mut self, reports: &[BaseReport]) -> Result<(), LinkError> {
        self.reports.extend_from_slice(reports);
        Ok(())
    }

    fn poll(&mut self, rsu: NodeId, _position: GeoPoint, now_ms: u64) -> Result<RsuDirectives, LinkError> {
        let advisories = self
            .queued
            .remove(&rsu)
            .unwrap_or_default()
            .into_iter()
            .filter(|(_, expires_at)| *expires_at > now_ms)
            .map(|(mut order, expires_at)| {
                order.remaining_ms = expires_at - now_ms;
                order
            })
            .collect();
        Ok(RsuDirectives { advisories, vru_events: Vec::new() })
    }

    fn issue_advisory(&mut self, cmd: &AdvisoryCommand, now_ms: u64) -> Result<u32, LinkError> {
        cmd.validate().map_err(|e| LinkError::Rejected(e.to_string()))?;
        self.next_id += 1;
        let order = AdvisoryOrder { id: self.next_id, kind: cmd.kind, location: cmd.location, remaining_ms: cmd.ttl_ms };
        self.queued.entry(cmd.target_rsu).or_default().push((order, now_ms + cmd.ttl_ms));
        Ok(self.next_id)
    }
}
