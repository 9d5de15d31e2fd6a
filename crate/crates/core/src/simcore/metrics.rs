use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use crate::cluster::NodeId;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeCounters {
    /// Payload bytes this node received and sent onward for someone else.
    pub relayed_bytes: u64,
    pub relayed_frames: u64,
    /// Payload bytes handed to a process resident on this node.
    pub delivered_bytes: u64,
    /// Frames received over a network link.
    pub frames_handled: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub nodes: Vec<NodeCounters>,
    pub link_bytes: BTreeMap<(NodeId, NodeId), u64>,
    pub latencies: Vec<f64>,
    /// Payload sizes of every message reported as delivered.
    pub sent_bytes_delivered: u64,
    pub messages_delivered: u64,
    pub control_frames: u64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "scenario,seed,metric,key,value";

    pub fn new(nodes: usize) -> Self {
        Self {
            nodes: vec![NodeCounters::default(); nodes],
            ..Self::default()
        }
    }

    pub fn node(&self, n: NodeId) -> &NodeCounters {
        &self.nodes[n.index()]
    }

    pub(crate) fn node_mut(&mut self, n: NodeId) -> &mut NodeCounters {
        &mut self.nodes[n.index()]
    }

    pub(crate) fn record_link(&mut self, from: NodeId, to: NodeId, bytes: u64) {
        *self.link_bytes.entry((from, to)).or_default() += bytes;
        self.node_mut(to).frames_handled += 1;
    }

    pub fn total_relayed_bytes(&self) -> u64 {
        self.nodes.iter().map(|n| n.relayed_bytes).sum()
    }

    pub fn total_delivered_bytes(&self) -> u64 {
        self.nodes.iter().map(|n| n.delivered_bytes).sum()
    }

    /// Delivered bytes at the nodes equal the payload of delivered messages.
    pub fn is_conserved(&self) -> bool {
        self.total_delivered_bytes() == self.sent_bytes_delivered
    }

    pub fn mean_latency(&self) -> Option<f64> {
        if self.latencies.is_empty() {
            None
        } else {
            Some(self.latencies.iter().sum::<f64>() / self.latencies.len() as f64)
        }
    }

    /// Long-format rows `scenario,seed,metric,key,value`, header included.
    pub fn to_csv(&self, scenario: &str, seed: u64) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        let mut row = |metric: &str, key: &str, value: String| {
            let _ = writeln!(out, "{scenario},{seed},{metric},{key},{value}");
        };
        for (i, n) in self.nodes.iter().enumerate() {
            let key = format!("n{i}");
            row("relayed_bytes", &key, n.relayed_bytes.to_string());
            row("relayed_frames", &key, n.relayed_frames.to_string());
            row("delivered_bytes", &key, n.delivered_bytes.to_string());
            row("frames_handled", &key, n.frames_handled.to_string());
        }
        for (&(a, b), bytes) in &self.link_bytes {
            row("link_bytes", &format!("{a}->{b}"), bytes.to_string());
        }
        row(
            "messages_delivered",
            "all",
            self.messages_delivered.to_string(),
        );
        row(
            "sent_bytes_delivered",
            "all",
            self.sent_bytes_delivered.to_string(),
        );
        row("control_frames", "all", self.control_frames.to_string());
        if let Some(mean) = self.mean_latency() {
            row("mean_latency_s", "all", format!("{mean:e}"));
        }
        out
    }

    /// Stable digest over the exact bit patterns of every counter.
    pub fn digest(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for n in &self.nodes {
            (
                n.relayed_bytes,
                n.relayed_frames,
                n.delivered_bytes,
                n.frames_handled,
            )
                .hash(&mut h);
        }
        self.link_bytes.hash(&mut h);
        for l in &self.latencies {
            l.to_bits().hash(&mut h);
        }
        (
            self.sent_bytes_delivered,
            self.messages_delivered,
            self.control_frames,
        )
            .hash(&mut h);
        h.finish()
    }
}
