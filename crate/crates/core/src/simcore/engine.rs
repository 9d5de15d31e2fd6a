use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::latency::{LatencyModel, TransportKind};
use super::metrics::Metrics;
use super::queue::EventQueue;
use crate::cluster::{ClusterState, GPid, MigrationEvent, NodeId};
use crate::error::Result;
use crate::gossip::{self, GossipConfig, RoundReport};
use crate::transport::{self, DeliveryReport, Emission, Frame, MsgId, Outcome, Payload};

/// Link traversals after which a message is declared undeliverable.
const HOP_LIMIT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Caps {
    pub relay: u64,
    pub direct: u64,
}

impl Default for Caps {
    fn default() -> Self {
        Self {
            relay: transport::DEFAULT_RELAY_CAP,
            direct: transport::DEFAULT_DIRECT_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: LatencyModel,
    pub caps: Caps,
    pub control_frame_bytes: u64,
    pub gossip: GossipConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        super::DefaultsFile::shipped().sim_config()
    }
}

/// One row of the frame/event trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time: f64,
    pub kind: String,
    pub src: String,
    pub dst: String,
    pub from_node: NodeId,
    pub to_node: NodeId,
    pub size: u64,
}

impl TraceRecord {
    pub const CSV_HEADER: &'static str = "time,kind,src,dst,from_node,to_node,size";

    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{},{},{},{},{},{}",
            self.time, self.kind, self.src, self.dst, self.from_node.0, self.to_node.0, self.size
        )
    }
}

/// A payload handed to a destination process.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub time: f64,
    pub msg: MsgId,
    pub src: GPid,
    pub dst: GPid,
    pub node: NodeId,
    pub size: u64,
    pub payload: Payload,
}

#[derive(Debug)]
enum Action {
    /// A frame reaches `node`, over a link or as a local step.
    Process {
        node: NodeId,
        frame: Frame,
    },
    /// Shared-memory handoff finishing at `node`.
    LocalDeliver {
        node: NodeId,
        frame: Frame,
    },
    Migrate {
        pid: GPid,
        to: NodeId,
    },
    GossipRound,
}

#[derive(Debug)]
struct MessageState {
    transport: TransportKind,
    size: u64,
    /// Wall time at which the first frame leaves the sender.
    departs: f64,
    overhead: f64,
    payload: Payload,
    data_hops: usize,
    wasted_hops: usize,
    control_hops: usize,
    frames: usize,
    relayed_by: Vec<NodeId>,
    report: Option<DeliveryReport>,
}

pub struct Simulation {
    cluster: ClusterState,
    config: SimConfig,
    queue: EventQueue<Action>,
    metrics: Metrics,
    rng: ChaCha8Rng,
    messages: BTreeMap<MsgId, MessageState>,
    deliveries: Vec<Delivery>,
    trace: Option<Vec<TraceRecord>>,
    gossip_log: Vec<RoundReport>,
    migrations: Vec<MigrationEvent>,
    next_msg: u64,
}

impl Simulation {
    pub fn new(cluster: ClusterState, config: SimConfig, seed: u64) -> Self {
        let metrics = Metrics::new(cluster.node_count());
        Self {
            cluster,
            config,
            queue: EventQueue::new(),
            metrics,
            rng: ChaCha8Rng::seed_from_u64(seed),
            messages: BTreeMap::new(),
            deliveries: Vec::new(),
            trace: None,
            gossip_log: Vec::new(),
            migrations: Vec::new(),
            next_msg: 0,
        }
    }

    pub fn cluster(&self) -> &ClusterState {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut ClusterState {
        &mut self.cluster
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> f64 {
        self.queue.now()
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn metrics_snapshot(&self) -> Metrics {
        self.metrics.clone()
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn gossip_log(&self) -> &[RoundReport] {
        &self.gossip_log
    }

    pub fn migrations(&self) -> &[MigrationEvent] {
        &self.migrations
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub(crate) fn payload_size(&self, msg: MsgId) -> u64 {
        self.messages.get(&msg).map_or(0, |m| m.size)
    }

    pub fn report(&self, msg: MsgId) -> Option<&DeliveryReport> {
        self.messages.get(&msg).and_then(|m| m.report.as_ref())
    }

    /// Payloads delivered since the last call.
    pub fn take_deliveries(&mut self) -> Vec<Delivery> {
        std::mem::take(&mut self.deliveries)
    }

    pub fn migrate(&mut self, pid: GPid, to: NodeId) -> Result<Option<MigrationEvent>> {
        let ev = self.cluster.migrate(pid, to)?;
        if let Some(ev) = ev {
            self.log_migration(ev, "MIGRATE");
        }
        Ok(ev)
    }

    pub(crate) fn log_migration(&mut self, ev: MigrationEvent, kind: &str) {
        self.migrations.push(ev);
        let now = self.now();
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                time: now,
                kind: kind.to_string(),
                src: ev.pid.to_string(),
                dst: ev.pid.to_string(),
                from_node: ev.from,
                to_node: ev.to,
                size: 0,
            });
        }
    }

    pub fn schedule_migration(&mut self, at: f64, pid: GPid, to: NodeId) -> Result<()> {
        self.cluster.process(pid)?;
        self.cluster.check_node(to)?;
        self.queue.schedule(at, Action::Migrate { pid, to })
    }

    pub fn schedule_gossip(&mut self, at: f64) -> Result<()> {
        self.queue.schedule(at, Action::GossipRound)
    }

    pub fn gossip_round(&mut self) -> RoundReport {
        let report = gossip::gossip_round(&mut self.cluster, &self.config.gossip, &mut self.rng);
        self.gossip_log.push(report);
        report
    }

    /// Gossips until every bulletin matches ground truth.
    pub fn converge(&mut self, max_rounds: usize) -> Option<usize> {
        for round in 0..=max_rounds {
            if gossip::is_converged(&self.cluster) {
                return Some(round);
            }
            if round < max_rounds {
                self.gossip_round();
            }
        }
        None
    }

    /// Hands a message to `kind` at the current time and returns its id.
    /// Progress happens as the event queue runs.
    pub fn submit(
        &mut self,
        kind: TransportKind,
        src: GPid,
        dst: GPid,
        size: u64,
        payload: Payload,
    ) -> Result<MsgId> {
        let origin = self.cluster.process(src)?.current;
        self.cluster.process(dst)?;
        let chosen = transport::choose_transport(self, kind, src, dst, size)?;
        let overhead = match chosen {
            TransportKind::Direct => self.config.model.delta_dicom,
            _ => 0.0,
        };
        let msg = MsgId(self.next_msg);
        self.next_msg += 1;
        let departs = self.now() + overhead;
        self.messages.insert(
            msg,
            MessageState {
                transport: chosen,
                size,
                departs,
                overhead,
                payload,
                data_hops: 0,
                wasted_hops: 0,
                control_hops: 0,
                frames: 0,
                relayed_by: Vec::new(),
                report: None,
            },
        );
        let frame = transport::initial_frame(chosen, msg, src, dst, size, origin);
        self.queue.schedule(
            departs,
            Action::Process {
                node: origin,
                frame,
            },
        )?;
        Ok(msg)
    }

    /// Submits and runs the simulation until the message completes.
    pub fn send(
        &mut self,
        kind: TransportKind,
        src: GPid,
        dst: GPid,
        size: u64,
    ) -> Result<DeliveryReport> {
        let msg = self.submit(kind, src, dst, size, Payload::Opaque)?;
        Ok(self.run_until_complete(msg))
    }

    /// Processes events in order until `msg` has a report. If the queue runs
    /// dry first, the message is reported as failed.
    pub fn run_until_complete(&mut self, msg: MsgId) -> DeliveryReport {
        while self.report(msg).is_none() {
            match self.queue.pop() {
                Some((t, action)) => self.dispatch(t, action),
                None => {
                    self.fail(msg, "event queue drained before delivery");
                }
            }
        }
        self.report(msg).cloned().expect("loop exits with a report")
    }

    /// Processes every event up to `t_end`.
    pub fn run_until(&mut self, t_end: f64) -> usize {
        let mut processed = 0;
        while self.queue.peek_time().is_some_and(|t| t <= t_end) {
            let (t, action) = self.queue.pop().expect("peeked");
            self.dispatch(t, action);
            processed += 1;
        }
        self.queue.advance_to(t_end);
        processed
    }

    /// Processes the next event if it is due by `t`. Returns whether one ran.
    pub fn step_until(&mut self, t: f64) -> bool {
        if !self.queue.peek_time().is_some_and(|next| next <= t) {
            return false;
        }
        let (time, action) = self.queue.pop().expect("peeked");
        self.dispatch(time, action);
        true
    }

    /// Processes events until the queue is empty.
    pub fn run_to_idle(&mut self) -> usize {
        let mut processed = 0;
        while let Some((t, action)) = self.queue.pop() {
            self.dispatch(t, action);
            processed += 1;
        }
        processed
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    fn dispatch(&mut self, t: f64, action: Action) {
        match action {
            Action::Process { node, frame } => self.process(t, node, frame),
            Action::LocalDeliver { node, frame } => self.deliver(t, node, frame),
            Action::Migrate { pid, to } => {
                // Validated at scheduling time; processes are never removed.
                if let Ok(Some(ev)) = self.cluster.migrate(pid, to) {
                    self.log_migration(ev, "MIGRATE");
                }
            }
            Action::GossipRound => {
                self.gossip_round();
            }
        }
    }

    fn process(&mut self, t: f64, node: NodeId, frame: Frame) {
        let mut pending = vec![frame];
        while let Some(frame) = pending.pop() {
            let emissions = transport::handle_incoming(self, node, frame);
            for e in emissions {
                match e {
                    Emission::Transmit { to, frame } if to == node => pending.push(frame),
                    Emission::Transmit { to, frame } => self.transmit(t, node, to, frame),
                    Emission::Deliver(frame) => {
                        let no_network = self
                            .messages
                            .get(&frame.msg)
                            .is_some_and(|m| m.data_hops == 0);
                        if no_network {
                            let sm = self.config.model.shared_memory(frame.size);
                            let mut f = frame;
                            f.wire += sm;
                            let at = self.departure(f.msg) + f.wire;
                            self.queue
                                .schedule(at.max(t), Action::LocalDeliver { node, frame: f })
                                .expect("shared-memory delivery is in the future");
                        } else {
                            self.deliver(t, node, frame);
                        }
                    }
                    Emission::LocationLearned {
                        pid,
                        node: at,
                        epoch,
                    } => {
                        self.cluster
                            .bulletin_mut(node)
                            .publish_location(pid, at, epoch);
                    }
                    Emission::Invalidate { pid, node: stale } => {
                        let bulletin = self.cluster.bulletin_mut(node);
                        if bulletin.lookup_location(pid).map(|(n, _)| n) == Some(stale) {
                            bulletin.invalidate_location(pid);
                        }
                    }
                    Emission::Dropped(frame) => {
                        if let Some(m) = self.messages.get_mut(&frame.msg) {
                            if frame.arrived_over_link && frame.kind.carries_payload() {
                                m.wasted_hops += 1;
                            }
                        }
                        if frame.kind.carries_payload() && !frame.arrived_over_link {
                            // Could not even leave the sender.
                            self.fail(frame.msg, "destination unknown to its home");
                        }
                    }
                }
            }
        }
    }

    fn departure(&self, msg: MsgId) -> f64 {
        self.messages.get(&msg).map_or(self.now(), |m| m.departs)
    }

    fn transmit(&mut self, t: f64, from: NodeId, to: NodeId, mut frame: Frame) {
        let is_data = frame.kind.carries_payload();
        let hop = self.config.model.hop(from, to, frame.size);
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                time: t,
                kind: frame.kind.as_str().to_string(),
                src: frame.src.to_string(),
                dst: frame.dst.to_string(),
                from_node: from,
                to_node: to,
                size: frame.size,
            });
        }
        let relaying = is_data && frame.arrived_over_link;
        let Some(m) = self.messages.get_mut(&frame.msg) else {
            return;
        };
        m.frames += 1;
        if is_data {
            m.data_hops += 1;
            if relaying {
                m.relayed_by.push(from);
            }
        } else {
            m.control_hops += 1;
            self.metrics.control_frames += 1;
        }
        if relaying {
            let c = self.metrics.node_mut(from);
            c.relayed_bytes += frame.size;
            c.relayed_frames += 1;
        }
        self.metrics.record_link(from, to, frame.size);
        if m.data_hops + m.control_hops > HOP_LIMIT {
            self.fail(frame.msg, "hop limit exceeded");
            return;
        }
        frame.path.push(to);
        frame.arrived_over_link = true;
        frame.wire += hop;
        let at = self.departure(frame.msg) + frame.wire;
        self.queue
            .schedule(at.max(t), Action::Process { node: to, frame })
            .expect("arrival is never in the past");
    }

    fn deliver(&mut self, t: f64, node: NodeId, frame: Frame) {
        let Some(m) = self.messages.get_mut(&frame.msg) else {
            return;
        };
        if m.report.is_some() {
            return;
        }
        let latency = frame.wire + m.overhead;
        m.report = Some(DeliveryReport {
            msg: frame.msg,
            transport: m.transport,
            outcome: Outcome::Delivered,
            network_hops: m.data_hops,
            wasted_hops: m.wasted_hops,
            control_hops: m.control_hops,
            latency,
            frames_emitted: m.frames,
            relayed_by: m.relayed_by.clone(),
            path: frame.path.clone(),
        });
        self.metrics.node_mut(node).delivered_bytes += frame.size;
        self.metrics.sent_bytes_delivered += m.size;
        self.metrics.messages_delivered += 1;
        self.metrics.latencies.push(latency);
        self.deliveries.push(Delivery {
            time: t,
            msg: frame.msg,
            src: frame.src,
            dst: frame.dst,
            node,
            size: frame.size,
            payload: m.payload.clone(),
        });
    }

    fn fail(&mut self, msg: MsgId, reason: &str) {
        let Some(m) = self.messages.get_mut(&msg) else {
            return;
        };
        if m.report.is_some() {
            return;
        }
        m.report = Some(DeliveryReport {
            msg,
            transport: m.transport,
            outcome: Outcome::Failed(reason.to_string()),
            network_hops: m.data_hops,
            wasted_hops: m.wasted_hops,
            control_hops: m.control_hops,
            latency: f64::INFINITY,
            frames_emitted: m.frames,
            relayed_by: m.relayed_by.clone(),
            path: Vec::new(),
        });
    }

    /// Drops the message bookkeeping once its report has been read. Keeps
    /// long sweeps from growing without bound.
    pub fn forget(&mut self, msg: MsgId) -> Option<DeliveryReport> {
        self.messages.remove(&msg).and_then(|m| m.report)
    }
}
