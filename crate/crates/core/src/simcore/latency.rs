use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{NodeId, Path};

/// Which byte-transfer component carries a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    Relay,
    Direct,
    Auto,
}

impl TransportKind {
    pub const ALL: [TransportKind; 3] = [
        TransportKind::Relay,
        TransportKind::Direct,
        TransportKind::Auto,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransportKind::Relay => "relay",
            TransportKind::Direct => "direct",
            TransportKind::Auto => "auto",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Per-hop store-and-forward cost model, in seconds and bytes/second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub alpha_net: f64,
    pub beta_net: f64,
    pub alpha_sm: f64,
    pub beta_sm: f64,
    pub delta_dicom: f64,
    /// Overrides for individual directed links.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty", with = "link_map")]
    pub links: BTreeMap<(NodeId, NodeId), LinkParams>,
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), String> {
        let non_negative = [
            ("alpha_net", self.alpha_net),
            ("alpha_sm", self.alpha_sm),
            ("delta_dicom", self.delta_dicom),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!(
                    "{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        for (name, v) in [("beta_net", self.beta_net), ("beta_sm", self.beta_sm)] {
            if v.is_nan() || v <= 0.0 {
                return Err(format!("{name} must be strictly positive, got {v}"));
            }
        }
        for (&(a, b), p) in &self.links {
            if !(p.alpha >= 0.0 && p.beta > 0.0) {
                return Err(format!("link {a}->{b} has invalid parameters"));
            }
        }
        Ok(())
    }

    pub fn link(&self, from: NodeId, to: NodeId) -> LinkParams {
        self.links.get(&(from, to)).copied().unwrap_or(LinkParams {
            alpha: self.alpha_net,
            beta: self.beta_net,
        })
    }

    pub fn hop(&self, from: NodeId, to: NodeId, size: u64) -> f64 {
        let p = self.link(from, to);
        p.alpha + size as f64 / p.beta
    }

    pub fn shared_memory(&self, size: u64) -> f64 {
        self.alpha_sm + size as f64 / self.beta_sm
    }

    /// Time to move `size` bytes along `path`, plus the direct-protocol
    /// overhead when `transport` is [`TransportKind::Direct`].
    pub fn latency_of(&self, path: &Path, size: u64, transport: TransportKind) -> f64 {
        let wire = if path.is_shared_memory() {
            self.shared_memory(size)
        } else {
            path.links().map(|(a, b)| self.hop(a, b, size)).sum()
        };
        match transport {
            TransportKind::Direct => wire + self.delta_dicom,
            _ => wire,
        }
    }
}

mod link_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Row {
        from: NodeId,
        to: NodeId,
        alpha: f64,
        beta: f64,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(NodeId, NodeId), LinkParams>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let rows: Vec<Row> = map
            .iter()
            .map(|(&(from, to), p)| Row {
                from,
                to,
                alpha: p.alpha,
                beta: p.beta,
            })
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<(NodeId, NodeId), LinkParams>, D::Error> {
        let rows = Vec::<Row>::deserialize(d)?;
        Ok(rows
            .into_iter()
            .map(|r| {
                (
                    (r.from, r.to),
                    LinkParams {
                        alpha: r.alpha,
                        beta: r.beta,
                    },
                )
            })
            .collect())
    }
}
