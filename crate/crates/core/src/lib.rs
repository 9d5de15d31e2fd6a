//! Cluster simulator for process migration with direct, location-aware
//! communication between migrated processes.
//!
//! The crate models a cluster whose processes keep a permanent home node,
//! spreads their locations with bounded gossip, and compares two ways of
//! moving bytes between them: relaying through both home nodes, or sending
//! directly to the node a process currently runs on (falling back to the
//! home when the sender does not know, or knows wrongly).

pub mod balancer;
pub mod bench;
pub mod cluster;
mod error;
pub mod gossip;
pub mod par;
pub mod simcore;
pub mod socket;
pub mod transport;

pub use cluster::{ClusterState, GPid, JobId, MigrationEvent, NodeId, Path, Topology};
pub use error::{Error, FieldError, Result};
pub use simcore::{LatencyModel, SimConfig, Simulation, TransportKind};
pub use transport::{DeliveryReport, FrameKind};
