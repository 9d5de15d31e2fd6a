//! Deterministic discrete-event engine, latency model and metrics.

mod engine;
mod latency;
mod metrics;
mod queue;

pub use engine::{Caps, Delivery, SimConfig, Simulation, TraceRecord};
pub use latency::{LatencyModel, LinkParams, TransportKind};
pub use metrics::{Metrics, NodeCounters};
pub use queue::EventQueue;

use serde::{Deserialize, Serialize};

/// Versioned model defaults as written by calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultsFile {
    pub version: u32,
    pub model: LatencyModel,
    pub control_frame_bytes: u64,
    pub relay_cap: u64,
    pub direct_cap: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<serde_json::Value>,
}

pub const DEFAULTS_VERSION: u32 = 1;

const SHIPPED_DEFAULTS: &str = include_str!("../../defaults.json");

impl DefaultsFile {
    /// The defaults shipped with the crate.
    pub fn shipped() -> Self {
        serde_json::from_str(SHIPPED_DEFAULTS).expect("shipped defaults parse")
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        let file: Self = serde_json::from_str(text)?;
        if file.version != DEFAULTS_VERSION {
            return Err(crate::Error::InvalidScenario(vec![crate::FieldError::new(
                "version",
                format!("unsupported defaults version {}", file.version),
            )]));
        }
        file.model
            .validate()
            .map_err(|m| crate::Error::InvalidScenario(vec![crate::FieldError::new("model", m)]))?;
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("defaults serialize");
        s.push('\n');
        s
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            model: self.model.clone(),
            caps: Caps {
                relay: self.relay_cap,
                direct: self.direct_cap,
            },
            control_frame_bytes: self.control_frame_bytes,
            gossip: Default::default(),
        }
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        DefaultsFile::shipped().model
    }
}
