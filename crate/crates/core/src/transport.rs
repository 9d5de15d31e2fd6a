//! Byte-transfer components: the home-node relay baseline, direct delivery
//! with home fallback, and automatic selection between the two.
//!
//! All three route frames through [`Simulation`]; this module holds the
//! per-node protocol logic ([`handle_incoming`]) and the sender-side
//! decisions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cluster::{GPid, NodeId, Path};
use crate::error::{Error, Result};
use crate::simcore::{Simulation, TransportKind};
use crate::socket::SocketFrame;

/// Size of every control frame unless configured otherwise.
pub const DEFAULT_CONTROL_FRAME_BYTES: u64 = 64;
pub const DEFAULT_RELAY_CAP: u64 = 1 << 30;
pub const DEFAULT_DIRECT_CAP: u64 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MsgId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Data,
    /// Data addressed to the destination's home with a location request
    /// piggybacked.
    LocReq,
    LocReply,
    NackUnknown,
    Ack,
}

impl FrameKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameKind::Data => "DATA",
            FrameKind::LocReq => "LOC_REQ",
            FrameKind::LocReply => "LOC_REPLY",
            FrameKind::NackUnknown => "NACK_UNKNOWN",
            FrameKind::Ack => "ACK",
        }
    }

    pub fn carries_payload(self) -> bool {
        matches!(self, FrameKind::Data | FrameKind::LocReq | FrameKind::Ack)
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the application handed to the transport.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Opaque,
    Socket(SocketFrame),
}

/// Position of a relayed frame along R1 -> H1 -> H2 -> R2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelayStage {
    AtSource,
    AtSourceHome,
    AtDestHome,
    AtDest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Relay(RelayStage),
    /// Direct transport; `origin` is the node that answers NACKs and receives
    /// location replies.
    Direct {
        origin: NodeId,
        routed: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: FrameKind,
    pub msg: MsgId,
    pub src: GPid,
    pub dst: GPid,
    pub size: u64,
    /// Every node the frame has visited, in order. Append-only.
    pub path: Vec<NodeId>,
    pub route: Route,
    /// Location carried by a LOC_REPLY, or the refusing node of a
    /// NACK_UNKNOWN.
    pub location: Option<NodeId>,
    /// Migration epoch of the destination that `location` refers to.
    pub epoch: u32,
    /// Set once the frame has crossed a network link.
    pub(crate) arrived_over_link: bool,
    /// Link and shared-memory time accumulated since the message departed.
    /// Carried on the frame so latency is an exact sum of hop costs,
    /// independent of the absolute clock.
    pub(crate) wire: f64,
}

impl Frame {
    pub fn current(&self) -> NodeId {
        *self.path.last().expect("frames start with a node")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Delivered,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryReport {
    pub msg: MsgId,
    /// The component that actually carried the message (never `Auto`).
    pub transport: TransportKind,
    pub outcome: Outcome,
    /// Network links crossed by data frames, including wasted ones.
    pub network_hops: usize,
    /// Data hops that ended at a node not hosting the destination.
    pub wasted_hops: usize,
    /// Network links crossed by control frames (LOC_REPLY, NACK_UNKNOWN).
    pub control_hops: usize,
    pub latency: f64,
    pub frames_emitted: usize,
    pub relayed_by: Vec<NodeId>,
    /// Nodes visited by the data frame that was finally delivered.
    pub path: Vec<NodeId>,
}

impl DeliveryReport {
    pub fn is_delivered(&self) -> bool {
        self.outcome == Outcome::Delivered
    }
}

/// Effects of handling one frame at one node.
#[derive(Debug, Clone, PartialEq)]
pub enum Emission {
    /// Send `frame` over the link to `to`.
    Transmit { to: NodeId, frame: Frame },
    /// Hand the payload to the resident destination process.
    Deliver(Frame),
    /// The origin learned where a process lives.
    LocationLearned { pid: GPid, node: NodeId, epoch: u32 },
    /// The origin's bulletin entry mapping `pid` to `node` is wrong.
    Invalidate { pid: GPid, node: NodeId },
    /// The data frame died here.
    Dropped(Frame),
}

/// Sender-side cost estimate from local knowledge only: the sender's own
/// bulletin, the processes resident on its node and, if it is the
/// destination's home, the authoritative registry.
pub fn estimate_latency(
    sim: &Simulation,
    kind: TransportKind,
    src: GPid,
    dst: GPid,
    size: u64,
) -> Result<f64> {
    let cluster = sim.cluster();
    let here = cluster.process(src)?.current;
    cluster.process(dst)?;
    let believed = believed_location(sim, here, dst);
    let model = &sim.config().model;
    let estimate = match kind {
        TransportKind::Relay => {
            let r2 = believed.unwrap_or(dst.home());
            model.latency_of(
                &Path::collapsed([here, src.home(), dst.home(), r2]),
                size,
                TransportKind::Relay,
            )
        }
        TransportKind::Direct => {
            let path = match believed {
                Some(r2) => Path::collapsed([here, r2]),
                None => Path::collapsed([here, dst.home()]),
            };
            model.latency_of(&path, size, TransportKind::Direct)
        }
        TransportKind::Auto => {
            return Err(Error::BadState {
                op: "estimate",
                state: "auto is not a concrete transport",
            })
        }
    };
    Ok(estimate)
}

fn believed_location(sim: &Simulation, here: NodeId, dst: GPid) -> Option<NodeId> {
    let cluster = sim.cluster();
    if cluster.is_resident(dst, here) {
        return Some(here);
    }
    if dst.home() == here {
        return cluster.locate_authoritative(dst).ok();
    }
    cluster
        .bulletin(here)
        .lookup_location(dst)
        .map(|(n, _)| n)
        .filter(|&n| n != here)
}

/// Resolves `Auto` to a concrete component: the cheaper estimate among the
/// transports whose cap admits `size`. Ties go to the relay.
pub fn choose_transport(
    sim: &Simulation,
    kind: TransportKind,
    src: GPid,
    dst: GPid,
    size: u64,
) -> Result<TransportKind> {
    let caps = sim.config().caps;
    match kind {
        TransportKind::Relay if size > caps.relay => Err(Error::MsgTooLarge {
            size,
            cap: caps.relay,
        }),
        TransportKind::Direct if size > caps.direct => Err(Error::MsgTooLarge {
            size,
            cap: caps.direct,
        }),
        TransportKind::Relay | TransportKind::Direct => Ok(kind),
        TransportKind::Auto => {
            let relay_ok = size <= caps.relay;
            let direct_ok = size <= caps.direct;
            match (relay_ok, direct_ok) {
                (false, false) => Err(Error::MsgTooLarge {
                    size,
                    cap: caps.relay.max(caps.direct),
                }),
                (true, false) => Ok(TransportKind::Relay),
                (false, true) => Ok(TransportKind::Direct),
                (true, true) => {
                    let relay = estimate_latency(sim, TransportKind::Relay, src, dst, size)?;
                    let direct = estimate_latency(sim, TransportKind::Direct, src, dst, size)?;
                    Ok(if direct < relay {
                        TransportKind::Direct
                    } else {
                        TransportKind::Relay
                    })
                }
            }
        }
    }
}

/// Builds the first frame of a message at the sender's node.
pub(crate) fn initial_frame(
    kind: TransportKind,
    msg: MsgId,
    src: GPid,
    dst: GPid,
    size: u64,
    origin: NodeId,
) -> Frame {
    let route = match kind {
        TransportKind::Relay => Route::Relay(RelayStage::AtSource),
        _ => Route::Direct {
            origin,
            routed: false,
        },
    };
    Frame {
        kind: FrameKind::Data,
        msg,
        src,
        dst,
        size,
        path: vec![origin],
        route,
        location: None,
        epoch: 0,
        arrived_over_link: false,
        wire: 0.0,
    }
}

/// Protocol step for `frame` sitting at `node`. Pure with respect to the
/// simulation: it reads cluster state and returns what should happen.
pub fn handle_incoming(sim: &Simulation, node: NodeId, frame: Frame) -> Vec<Emission> {
    match frame.route {
        Route::Relay(stage) => relay_step(sim, node, frame, stage),
        Route::Direct { origin, routed } => match frame.kind {
            FrameKind::LocReply => match frame.location {
                Some(at) => vec![Emission::LocationLearned {
                    pid: frame.dst,
                    node: at,
                    epoch: frame.epoch,
                }],
                None => Vec::new(),
            },
            FrameKind::NackUnknown => {
                // Back at the origin: forget the stale entry and resend the
                // data through the home.
                let stale = frame.location;
                let mut resend = frame;
                resend.kind = FrameKind::LocReq;
                resend.size = sim.payload_size(resend.msg);
                resend.location = None;
                resend.arrived_over_link = false;
                let home = resend.dst.home();
                let mut out = Vec::new();
                if let Some(stale) = stale {
                    out.push(Emission::Invalidate {
                        pid: resend.dst,
                        node: stale,
                    });
                }
                out.push(Emission::Transmit {
                    to: home,
                    frame: resend,
                });
                out
            }
            _ if !routed => direct_first_hop(sim, node, frame, origin),
            _ => direct_arrival(sim, node, frame, origin),
        },
    }
}

fn relay_step(
    sim: &Simulation,
    node: NodeId,
    mut frame: Frame,
    stage: RelayStage,
) -> Vec<Emission> {
    let cluster = sim.cluster();
    let (next, stage) = match stage {
        RelayStage::AtSource => (frame.src.home(), RelayStage::AtSourceHome),
        RelayStage::AtSourceHome => (frame.dst.home(), RelayStage::AtDestHome),
        RelayStage::AtDestHome => match cluster.locate_authoritative(frame.dst) {
            Ok(at) => (at, RelayStage::AtDest),
            Err(_) => return vec![Emission::Dropped(frame)],
        },
        RelayStage::AtDest => {
            if cluster.is_resident(frame.dst, node) {
                return vec![Emission::Deliver(frame)];
            }
            // Moved while in flight; the home knows where it went.
            (frame.dst.home(), RelayStage::AtDestHome)
        }
    };
    frame.route = Route::Relay(stage);
    vec![Emission::Transmit { to: next, frame }]
}

fn direct_first_hop(
    sim: &Simulation,
    node: NodeId,
    mut frame: Frame,
    origin: NodeId,
) -> Vec<Emission> {
    let cluster = sim.cluster();
    frame.route = Route::Direct {
        origin,
        routed: true,
    };
    if cluster.is_resident(frame.dst, node) {
        return vec![Emission::Deliver(frame)];
    }
    let mut out = Vec::new();
    match cluster.bulletin(node).lookup_location(frame.dst) {
        Some((at, _)) if at == node => {
            // Our own entry is stale: forget it and ask the home.
            out.push(Emission::Invalidate {
                pid: frame.dst,
                node,
            });
            frame.kind = FrameKind::LocReq;
            out.push(Emission::Transmit {
                to: frame.dst.home(),
                frame,
            });
        }
        Some((at, _)) => out.push(Emission::Transmit { to: at, frame }),
        None => {
            frame.kind = FrameKind::LocReq;
            out.push(Emission::Transmit {
                to: frame.dst.home(),
                frame,
            });
        }
    }
    out
}

fn direct_arrival(sim: &Simulation, node: NodeId, frame: Frame, origin: NodeId) -> Vec<Emission> {
    let cluster = sim.cluster();
    let at_home = node == frame.dst.home();
    if cluster.is_resident(frame.dst, node) {
        let mut out = Vec::new();
        if frame.kind == FrameKind::LocReq && at_home {
            out.push(loc_reply(sim, &frame, origin, node, node));
        }
        out.push(Emission::Deliver(frame));
        return out;
    }
    if at_home {
        let Ok(at) = cluster.locate_authoritative(frame.dst) else {
            return vec![Emission::Dropped(frame)];
        };
        let reply = loc_reply(sim, &frame, origin, node, at);
        let mut forward = frame;
        forward.kind = FrameKind::Data;
        return vec![
            reply,
            Emission::Transmit {
                to: at,
                frame: forward,
            },
        ];
    }
    let mut nack = frame.clone();
    nack.kind = FrameKind::NackUnknown;
    nack.size = sim.config().control_frame_bytes;
    nack.location = Some(node);
    vec![
        Emission::Dropped(frame),
        Emission::Transmit {
            to: origin,
            frame: nack,
        },
    ]
}

fn loc_reply(
    sim: &Simulation,
    frame: &Frame,
    origin: NodeId,
    home: NodeId,
    at: NodeId,
) -> Emission {
    let epoch = sim.cluster().process(frame.dst).map_or(0, |p| p.epoch);
    if origin == home {
        return Emission::LocationLearned {
            pid: frame.dst,
            node: at,
            epoch,
        };
    }
    Emission::Transmit {
        to: origin,
        frame: Frame {
            kind: FrameKind::LocReply,
            msg: frame.msg,
            src: frame.src,
            dst: frame.dst,
            size: sim.config().control_frame_bytes,
            path: vec![home],
            route: Route::Direct {
                origin,
                routed: true,
            },
            location: Some(at),
            epoch,
            arrived_over_link: false,
            wire: frame.wire,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ClusterState, JobId};
    use crate::simcore::{Caps, SimConfig};

    fn sim(n: u32) -> Simulation {
        Simulation::new(ClusterState::mesh(n).unwrap(), SimConfig::default(), 3)
    }

    fn spawn(s: &mut Simulation, home: u32) -> GPid {
        s.cluster_mut().spawn(NodeId(home), JobId(0), 1.0).unwrap()
    }

    /// a homed at 0, b homed at 1, moved to 2 and 3.
    fn both_migrated() -> (Simulation, GPid, GPid) {
        let mut s = sim(6);
        let a = spawn(&mut s, 0);
        let b = spawn(&mut s, 1);
        s.migrate(a, NodeId(2)).unwrap();
        s.migrate(b, NodeId(3)).unwrap();
        (s, a, b)
    }

    #[test]
    fn relay_both_migrated_takes_three_hops() {
        let (mut s, a, b) = both_migrated();
        let r = s.send(TransportKind::Relay, a, b, 4096).unwrap();
        assert!(r.is_delivered());
        assert_eq!(r.network_hops, 3);
        assert_eq!(r.relayed_by, [NodeId(0), NodeId(1)]);
        assert_eq!(r.path, [NodeId(2), NodeId(0), NodeId(1), NodeId(3)]);
        let m = s.metrics();
        assert_eq!(m.node(NodeId(0)).relayed_bytes, 4096);
        assert_eq!(m.node(NodeId(1)).relayed_bytes, 4096);
    }

    #[test]
    fn relay_unmigrated_is_one_hop() {
        let mut s = sim(6);
        let a = spawn(&mut s, 0);
        let b = spawn(&mut s, 1);
        let r = s.send(TransportKind::Relay, a, b, 10).unwrap();
        assert_eq!(r.network_hops, 1);
        assert!(r.relayed_by.is_empty());
    }

    #[test]
    fn relay_over_cap_is_rejected() {
        let mut s = sim(2);
        let a = spawn(&mut s, 0);
        let b = spawn(&mut s, 1);
        let cap = s.config().caps.relay;
        assert!(matches!(
            s.send(TransportKind::Relay, a, b, cap + 1),
            Err(Error::MsgTooLarge { .. })
        ));
        assert!(s
            .send(TransportKind::Relay, a, b, cap)
            .unwrap()
            .is_delivered());
    }

    #[test]
    fn unknown_process_is_an_error() {
        let mut s = sim(2);
        let a = spawn(&mut s, 0);
        let ghost = GPid::new(NodeId(1), 9);
        for kind in TransportKind::ALL {
            assert!(matches!(
                s.send(kind, a, ghost, 1),
                Err(Error::NoSuchProcess(_))
            ));
        }
    }

    #[test]
    fn direct_converged_is_one_hop_plus_overhead() {
        let (mut s, a, b) = both_migrated();
        s.converge(200).unwrap();
        let r = s.send(TransportKind::Direct, a, b, 4096).unwrap();
        assert_eq!(r.network_hops, 1);
        assert!(r.relayed_by.is_empty());
        let m = &s.config().model;
        assert_eq!(r.latency, m.hop(NodeId(2), NodeId(3), 4096) + m.delta_dicom);
        assert_eq!(s.metrics().total_relayed_bytes(), 0);
    }

    #[test]
    fn direct_miss_goes_through_home_and_learns() {
        let (mut s, a, b) = both_migrated();
        assert_eq!(s.cluster().bulletin(NodeId(2)).lookup_location(b), None);
        let r = s.send(TransportKind::Direct, a, b, 100).unwrap();
        assert_eq!(r.network_hops, 2);
        assert_eq!(r.control_hops, 1);
        assert_eq!(r.wasted_hops, 0);
        assert_eq!(r.relayed_by, [NodeId(1)]);
        let learned = s.cluster().bulletin(NodeId(2)).lookup_location(b);
        assert_eq!(learned.map(|(n, _)| n), Some(NodeId(3)));
        let again = s.send(TransportKind::Direct, a, b, 100).unwrap();
        assert_eq!(again.network_hops, 1);
    }

    #[test]
    fn direct_miss_with_home_hosting_collapses() {
        let mut s = sim(4);
        let a = spawn(&mut s, 0);
        let b = spawn(&mut s, 1);
        s.migrate(a, NodeId(2)).unwrap();
        let r = s.send(TransportKind::Direct, a, b, 100).unwrap();
        assert_eq!(r.network_hops, 1);
        assert_eq!(r.control_hops, 1);
    }

    #[test]
    fn direct_co_resident_uses_shared_memory() {
        let mut s = sim(4);
        let a = spawn(&mut s, 0);
        let b = spawn(&mut s, 1);
        s.migrate(a, NodeId(3)).unwrap();
        s.migrate(b, NodeId(3)).unwrap();
        let r = s.send(TransportKind::Direct, a, b, 2048).unwrap();
        assert_eq!(r.network_hops, 0);
        let m = &s.config().model;
        assert_eq!(r.latency, m.shared_memory(2048) + m.delta_dicom);
    }

    #[test]
    fn direct_stale_entry_wastes_one_hop() {
        let (mut s, a, b) = both_migrated();
        s.converge(200).unwrap();
        s.migrate(b, NodeId(4)).unwrap();
        let size = 1000;
        let r = s.send(TransportKind::Direct, a, b, size).unwrap();
        assert!(r.is_delivered());
        assert_eq!(r.wasted_hops, 1);
        assert_eq!(r.network_hops, 3);
        assert_eq!(r.control_hops, 2);
        let m = &s.config().model;
        let c = s.config().control_frame_bytes;
        let expected = m.delta_dicom
            + m.hop(NodeId(2), NodeId(3), size)
            + m.hop(NodeId(3), NodeId(2), c)
            + m.hop(NodeId(2), NodeId(1), size)
            + m.hop(NodeId(1), NodeId(4), size);
        assert!(
            (r.latency - expected).abs() < 1e-12,
            "{} vs {expected}",
            r.latency
        );
        let r2 = s.send(TransportKind::Direct, a, b, size).unwrap();
        assert_eq!((r2.network_hops, r2.wasted_hops), (1, 0));
    }

    #[test]
    fn stale_self_entry_falls_back_to_home() {
        let mut s = sim(4);
        let a = spawn(&mut s, 0);
        let b = spawn(&mut s, 1);
        s.migrate(a, NodeId(2)).unwrap();
        s.migrate(b, NodeId(2)).unwrap();
        s.converge(200).unwrap();
        s.migrate(b, NodeId(3)).unwrap();
        let r = s.send(TransportKind::Direct, a, b, 64).unwrap();
        assert!(r.is_delivered());
        assert_eq!(r.wasted_hops, 0);
        assert_eq!(r.network_hops, 2);
    }

    #[test]
    fn auto_prefers_relay_when_nobody_moved() {
        let mut s = sim(4);
        let a = spawn(&mut s, 0);
        let b = spawn(&mut s, 1);
        s.converge(200).unwrap();
        for size in [0, 1 << 10, 1 << 20] {
            assert_eq!(
                choose_transport(&s, TransportKind::Auto, a, b, size).unwrap(),
                TransportKind::Relay
            );
        }
    }

    #[test]
    fn auto_prefers_direct_when_both_moved() {
        let (mut s, a, b) = both_migrated();
        s.converge(200).unwrap();
        let r = s.send(TransportKind::Auto, a, b, 1 << 16).unwrap();
        assert_eq!(r.transport, TransportKind::Direct);
    }

    #[test]
    fn auto_respects_caps() {
        let mut s = sim(4);
        let a = spawn(&mut s, 0);
        let b = spawn(&mut s, 1);
        let caps = s.config().caps;
        assert_eq!(caps.direct, 2 * caps.relay);
        assert_eq!(
            choose_transport(&s, TransportKind::Auto, a, b, caps.relay + 1).unwrap(),
            TransportKind::Direct
        );
        assert!(matches!(
            choose_transport(&s, TransportKind::Auto, a, b, caps.direct + 1),
            Err(Error::MsgTooLarge { .. })
        ));
        assert!(matches!(
            choose_transport(&s, TransportKind::Direct, a, b, caps.direct + 1),
            Err(Error::MsgTooLarge { .. })
        ));
    }

    #[test]
    fn relay_only_cap_forces_relay() {
        let config = SimConfig {
            caps: Caps {
                relay: 100,
                direct: 10,
            },
            ..SimConfig::default()
        };
        let mut s = Simulation::new(ClusterState::mesh(4).unwrap(), config, 0);
        let a = spawn(&mut s, 0);
        let b = spawn(&mut s, 1);
        s.migrate(b, NodeId(3)).unwrap();
        assert_eq!(
            choose_transport(&s, TransportKind::Auto, a, b, 50).unwrap(),
            TransportKind::Relay
        );
    }

    #[test]
    fn frame_kinds_render_like_the_wire_names() {
        assert_eq!(FrameKind::NackUnknown.to_string(), "NACK_UNKNOWN");
        assert!(FrameKind::LocReq.carries_payload());
        assert!(!FrameKind::LocReply.carries_payload());
    }
}
