//! Simulator for scale-out data-analytics engines attached to banked
//! high-bandwidth memory.
//!
//! The crate pairs bit-exact functional engines (range selection, hash join,
//! minibatch SGD) with analytic cost models driven by a channel-level
//! contention model of the memory.

pub mod error;
pub mod mem_model;
pub mod traffic;
pub mod report;
pub mod select;
pub mod join;
pub mod sgd;
pub mod orchestrator;

pub use error::{Error, Result};
pub use mem_model::{
    effective_bandwidth, shim_resolve, AccessPlan, BandwidthReport, ChannelId, Direction, Extent,
    HbmGeometry, RawPort, ShimPort,
};
pub use orchestrator::{
    host_transfer_time, plan_placement, run_experiment, PlacementMode, PlacementPlan, SystemConfig,
};
pub use report::{CostReport, Phase};
