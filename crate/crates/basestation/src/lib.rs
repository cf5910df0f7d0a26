//! Base station: region view, HTTP service and client.

pub mod client;
pub mod region;
pub mod service;
