//! Protocol library and deterministic simulator for a DSRC-style V2X
//! emergency-vehicle alert system.

// Threshold checks are written `!(a < b)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alerts;
pub mod channel;
pub mod geo;
pub mod nodes;
pub mod sim;
pub mod uplink;
pub mod wire;
