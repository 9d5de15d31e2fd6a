//! Scenario runner, built-in experiments and model calibration.

mod calibrate;
mod experiments;
mod report;
mod scenario;

pub use calibrate::{
    calibrate, conventional_model, mean_slowdown, Calibration, CalibrationStatus, ALPHA_NET,
    BETA_NET, TARGET_IMPROVEMENT, TARGET_SLOWDOWN, TOLERANCE,
};
pub use experiments::{
    balance_to_fixpoint, balanced_cluster, crossover, default_sweep_sizes, gossip_stats,
    gossip_trial, imbalance_test, imbalanced_cluster, informed_facts, latency_sweep, limit_test,
    max_deliverable, mean, ring_load, round_trip, sweep_points, GossipStudy, GossipTrial,
    Placement, SweepPoint,
};
pub use report::{Check, GossipRow, LatencyRow, Report};
pub use scenario::{
    run_scenario, Assertion, MigrationSpec, ModelOverrides, ProcessSpec, Scenario, SendSpec,
    SCENARIO_VERSION,
};

use crate::par::Exec;
use crate::simcore::SimConfig;

/// Settings shared by every runner.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: SimConfig,
    /// Overrides the scenario's own seed; templates default to 0.
    pub seed: Option<u64>,
    pub trace: bool,
    pub exec: Exec,
}
