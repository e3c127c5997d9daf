//! Authenticated multi-hop all-to-all telemetry broadcast for small UAV swarms.

pub mod crypto;
pub mod engine;
pub mod forwarding;
pub mod routing;
pub mod sim;
pub mod wire;
