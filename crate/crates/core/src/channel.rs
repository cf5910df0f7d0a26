//! Simulated DSRC broadcast medium.
//!
//! Delivery is certain (up to `base_loss`) inside the reliable radius,
//! falls off linearly over `falloff` meters beyond it, and is impossible
//! further out. Which radius applies depends on whether the straight path
//! between sender and receiver crosses an obstruction.

use crate::geo::{distance, LocalPoint};
use crate::wire::NodeId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    pub r_reliable_los: f64,
    pub r_reliable_nlos: f64,
    pub falloff: f64,
    pub base_loss: f64,
    pub latency_ms: u64,
    /// Extra uniform latency in [0, jitter_ms]; 0 disables it.
    pub jitter_ms: u64,
    pub seed: u64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            r_reliable_los: 600.0,
            r_reliable_nlos: 350.0,
            falloff: 150.0,
            base_loss: 0.0,
            latency_ms: 2,
            jitter_ms: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("r_reliable_nlos ({nlos}) exceeds r_reliable_los ({los})")]
    NlosBeyondLos { los: f64, nlos: f64 },
    #[error("falloff must be positive, got {0}")]
    Falloff(f64),
    #[error("base_loss must be within [0, 1], got {0}")]
    BaseLoss(f64),
    #[error("{0} must be a finite non-negative distance")]
    Radius(&'static str),
    #[error("obstruction endpoints coincide")]
    DegenerateObstruction,
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.r_reliable_los.is_finite() && self.r_reliable_los >= 0.0) {
            return Err(ChannelError::Radius("r_reliable_los"));
        }
        if !(self.r_reliable_nlos.is_finite() && self.r_reliable_nlos >= 0.0) {
            return Err(ChannelError::Radius("r_reliable_nlos"));
        }
        if self.r_reliable_nlos > self.r_reliable_los {
            return Err(ChannelError::NlosBeyondLos { los: self.r_reliable_los, nlos: self.r_reliable_nlos });
        }
        if !(self.falloff.is_finite() && self.falloff > 0.0) {
            return Err(ChannelError::Falloff(self.falloff));
        }
        if !(0.0..=1.0).contains(&self.base_loss) {
            return Err(ChannelError::BaseLoss(self.base_loss));
        }
        Ok(())
    }
}

/// An opaque wall between two points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstruction {
    pub segment: [LocalPoint; 2],
}

impl Obstruction {
    pub fn new(a: LocalPoint, b: LocalPoint) -> Result<Obstruction, ChannelError> {
        if a == b {
            return Err(ChannelError::DegenerateObstruction);
        }
        Ok(Obstruction { segment: [a, b] })
    }
}

pub fn delivery_probability(d: f64, los: bool, p: &ChannelParams) -> f64 {
    let reliable = if los { p.r_reliable_los } else { p.r_reliable_nlos };
    let top = 1.0 - p.base_loss;
    if d <= reliable {
        top
    } else if d <= reliable + p.falloff {
        top * (1.0 - (d - reliable) / p.falloff)
    } else {
        0.0
    }
}

fn orient(a: LocalPoint, b: LocalPoint, c: LocalPoint) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: LocalPoint, b: LocalPoint, p: LocalPoint) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed segment intersection; touching counts.
pub fn segments_intersect(p1: LocalPoint, p2: LocalPoint, q1: LocalPoint, q2: LocalPoint) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

pub fn has_los(a: LocalPoint, b: LocalPoint, obstructions: &[Obstruction]) -> bool {
    !obstructions.iter().any(|o| segments_intersect(a, b, o.segment[0], o.segment[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Delivered { at_ms: u64 },
    Dropped { would_arrive_ms: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reception {
    pub receiver: NodeId,
    pub distance_m: f64,
    pub los: bool,
    pub outcome: Outcome,
}

/// The broadcast medium and its single random stream.
#[derive(Debug, Clone)]
pub struct Channel {
    params: ChannelParams,
    obstructions: Vec<Obstruction>,
    rng: ChaCha8Rng,
}

impl Channel {
    pub fn new(params: ChannelParams, obstructions: Vec<Obstruction>) -> Result<Channel, ChannelError> {
        params.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(params.seed);
        Ok(Channel { params, obstructions, rng })
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn obstructions(&self) -> &[Obstruction] {
        &self.obstructions
    }

    /// Decides, per receiver, whether a frame sent now reaches it.
    ///
    /// One uniform draw is consumed per receiver, in ascending `NodeId`
    /// order, whatever the outcome. Jitter, when enabled, takes one more
    /// draw per delivered copy. The sender is never a receiver.
    pub fn transmit(
        &mut self,
        sender: NodeId,
        sender_pos: LocalPoint,
        sent_at_ms: u64,
        receivers: &[(NodeId, LocalPoint)],
    ) -> Vec<Reception> {
        let mut order: Vec<&(NodeId, LocalPoint)> = receivers.iter().filter(|(id, _)| *id != sender).collect();
        order.sort_by_key(|(id, _)| *id);
        order.dedup_by_key(|(id, _)| *id);

        let base_arrival = sent_at_ms + self.params.latency_ms;
        order
            .into_iter()
            .map(|&(receiver, pos)| {
                let d = distance(sender_pos, pos);
                let los = has_los(sender_pos, pos, &self.obstructions);
                let p = delivery_probability(d, los, &self.params);
                let draw: f64 = self.rng.random();
                let outcome = if draw < p {
                    let jitter = if self.params.jitter_ms > 0 {
                        self.rng.random_range(0..=self.params.jitter_ms)
                    } else {
                        0
                    };
                    Outcome::Delivered { at_ms: base_arrival + jitter }
                } else {
                    Outcome::Dropped { would_arrive_ms: base_arrival }
                };
                Reception { receiver, distance_m: d, los, outcome }
            })
            .collect()
    }
}
