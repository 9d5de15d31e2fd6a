//! TCP-like, non-blocking socket facade over the transports. Connections
//! are addressed by process and port, so they survive migration of either
//! endpoint untouched.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::cluster::{GPid, MigrationEvent, NodeId};
use crate::error::{Error, Result};
use crate::simcore::{Delivery, Simulation, TransportKind};
use crate::transport::{DeliveryReport, MsgId, Payload};

const EPHEMERAL_BASE: u16 = 49152;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SocketId(pub u64);

impl fmt::Display for SocketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sock{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SocketState {
    Closed,
    Bound,
    Listening,
    Connecting,
    Established,
}

impl SocketState {
    pub const ALL: [SocketState; 5] = [
        SocketState::Closed,
        SocketState::Bound,
        SocketState::Listening,
        SocketState::Connecting,
        SocketState::Established,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SocketState::Closed => "CLOSED",
            SocketState::Bound => "BOUND",
            SocketState::Listening => "LISTENING",
            SocketState::Connecting => "CONNECTING",
            SocketState::Established => "ESTABLISHED",
        }
    }
}

/// Inputs to the connection state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SocketEvent {
    Bind,
    Listen,
    Connect,
    HandshakeDone,
    Refused,
    Close,
}

impl SocketEvent {
    pub const ALL: [SocketEvent; 6] = [
        SocketEvent::Bind,
        SocketEvent::Listen,
        SocketEvent::Connect,
        SocketEvent::HandshakeDone,
        SocketEvent::Refused,
        SocketEvent::Close,
    ];

    fn as_str(self) -> &'static str {
        match self {
            SocketEvent::Bind => "bind",
            SocketEvent::Listen => "listen",
            SocketEvent::Connect => "connect",
            SocketEvent::HandshakeDone => "handshake",
            SocketEvent::Refused => "refused",
            SocketEvent::Close => "close",
        }
    }
}

/// The complete transition table. Anything not listed is `E_BAD_STATE`.
pub fn transition(state: SocketState, event: SocketEvent) -> Result<SocketState> {
    use SocketEvent as E;
    use SocketState as S;
    match (state, event) {
        (S::Closed, E::Bind) => Ok(S::Bound),
        (S::Bound, E::Listen) => Ok(S::Listening),
        (S::Closed, E::Connect) => Ok(S::Connecting),
        (S::Connecting, E::HandshakeDone) => Ok(S::Established),
        (S::Connecting, E::Refused) => Ok(S::Closed),
        (_, E::Close) => Ok(S::Closed),
        _ => Err(Error::BadState {
            op: event.as_str(),
            state: state.as_str(),
        }),
    }
}

/// Socket-level messages carried as transport payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SocketFrame {
    Syn {
        from: SocketId,
        from_port: u16,
        port: u16,
        transport: TransportKind,
    },
    SynAck {
        to: SocketId,
        from: SocketId,
    },
    Refuse {
        to: SocketId,
    },
    Segment {
        to: SocketId,
        seq: u64,
        len: u64,
    },
    /// End of stream after `seq` segments.
    Fin {
        to: SocketId,
        seq: u64,
    },
}

/// One application send, as seen by the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub seq: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Received {
    Bytes(u64),
    /// The peer closed and everything it sent has been read.
    EndOfStream,
}

#[derive(Debug, Clone)]
pub struct Socket {
    pub id: SocketId,
    pub owner: GPid,
    pub state: SocketState,
    pub local_port: Option<u16>,
    pub peer: Option<(GPid, u16)>,
    pub transport: TransportKind,
    pub recv_queue: VecDeque<Chunk>,
    /// Bytes already consumed from the front chunk.
    front_consumed: u64,
    peer_socket: Option<SocketId>,
    pending_accept: VecDeque<SocketId>,
    next_send_seq: u64,
    next_recv_seq: u64,
    reorder: BTreeMap<u64, Chunk>,
    peer_fin: Option<u64>,
    error: Option<(GPid, u16)>,
    connect_started: Option<f64>,
    pub established_at: Option<f64>,
}

impl Socket {
    fn new(id: SocketId, owner: GPid, transport: TransportKind) -> Self {
        Self {
            id,
            owner,
            state: SocketState::Closed,
            local_port: None,
            peer: None,
            transport,
            recv_queue: VecDeque::new(),
            front_consumed: 0,
            peer_socket: None,
            pending_accept: VecDeque::new(),
            next_send_seq: 0,
            next_recv_seq: 0,
            reorder: BTreeMap::new(),
            peer_fin: None,
            error: None,
            connect_started: None,
            established_at: None,
        }
    }

    fn apply(&mut self, event: SocketEvent) -> Result<()> {
        self.state = transition(self.state, event)?;
        Ok(())
    }

    pub fn pending_connections(&self) -> usize {
        self.pending_accept.len()
    }

    pub fn queued_bytes(&self) -> u64 {
        self.recv_queue.iter().map(|c| c.len).sum::<u64>() - self.front_consumed
    }

    /// Round-trip time of the handshake, for an actively opened socket.
    pub fn connect_latency(&self) -> Option<f64> {
        Some(self.established_at? - self.connect_started?)
    }

    fn at_end_of_stream(&self) -> bool {
        self.recv_queue.is_empty() && self.peer_fin == Some(self.next_recv_seq)
    }

    fn is_ready(&self) -> bool {
        match self.state {
            SocketState::Established => !self.recv_queue.is_empty(),
            SocketState::Listening => !self.pending_accept.is_empty(),
            _ => false,
        }
    }
}

/// Socket layer bound to one simulation.
pub struct SocketApi {
    sim: Simulation,
    sockets: BTreeMap<SocketId, Socket>,
    ports: BTreeMap<(GPid, u16), SocketId>,
    next_id: u64,
    dropped_segments: u64,
}

impl SocketApi {
    pub fn new(sim: Simulation) -> Self {
        Self {
            sim,
            sockets: BTreeMap::new(),
            ports: BTreeMap::new(),
            next_id: 0,
            dropped_segments: 0,
        }
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulation {
        &mut self.sim
    }

    pub fn into_sim(self) -> Simulation {
        self.sim
    }

    pub fn get(&self, h: SocketId) -> Result<&Socket> {
        self.sockets.get(&h).ok_or(Error::NoSuchSocket(h.0))
    }

    fn get_mut(&mut self, h: SocketId) -> Result<&mut Socket> {
        self.sockets.get_mut(&h).ok_or(Error::NoSuchSocket(h.0))
    }

    pub fn state(&self, h: SocketId) -> Result<SocketState> {
        Ok(self.get(h)?.state)
    }

    /// Segments that arrived for a socket already closed locally.
    pub fn dropped_segments(&self) -> u64 {
        self.dropped_segments
    }

    /// Takes the asynchronous error of a failed connect, if any.
    pub fn take_error(&mut self, h: SocketId) -> Result<Option<Error>> {
        Ok(self
            .get_mut(h)?
            .error
            .take()
            .map(|(pid, port)| Error::ConnRefused(pid, port)))
    }

    pub fn socket(&mut self, owner: GPid, transport: TransportKind) -> Result<SocketId> {
        self.sim.cluster().process(owner)?;
        let id = SocketId(self.next_id);
        self.next_id += 1;
        self.sockets.insert(id, Socket::new(id, owner, transport));
        Ok(id)
    }

    pub fn bind(&mut self, h: SocketId, port: u16) -> Result<()> {
        let owner = self.get(h)?.owner;
        transition(self.get(h)?.state, SocketEvent::Bind)?;
        if self.ports.contains_key(&(owner, port)) {
            return Err(Error::AddrInUse { owner, port });
        }
        self.ports.insert((owner, port), h);
        let s = self.get_mut(h)?;
        s.apply(SocketEvent::Bind)?;
        s.local_port = Some(port);
        Ok(())
    }

    pub fn listen(&mut self, h: SocketId) -> Result<()> {
        self.get_mut(h)?.apply(SocketEvent::Listen)
    }

    /// Starts the handshake. Completion is observed through [`state`],
    /// [`select`] or [`take_error`] as the simulation advances.
    ///
    /// [`state`]: Self::state
    /// [`select`]: Self::select
    /// [`take_error`]: Self::take_error
    pub fn connect(&mut self, h: SocketId, dst: (GPid, u16)) -> Result<()> {
        self.sim.cluster().process(dst.0)?;
        let (owner, transport, state) = {
            let s = self.get(h)?;
            (s.owner, s.transport, s.state)
        };
        transition(state, SocketEvent::Connect)?;
        let port = self.ephemeral_port(owner);
        self.ports.insert((owner, port), h);
        let now = self.sim.now();
        {
            let s = self.get_mut(h)?;
            s.apply(SocketEvent::Connect)?;
            s.local_port = Some(port);
            s.peer = Some(dst);
            s.connect_started = Some(now);
        }
        let size = self.sim.config().control_frame_bytes;
        self.sim.submit(
            transport,
            owner,
            dst.0,
            size,
            Payload::Socket(SocketFrame::Syn {
                from: h,
                from_port: port,
                port: dst.1,
                transport,
            }),
        )?;
        Ok(())
    }

    fn ephemeral_port(&self, owner: GPid) -> u16 {
        (EPHEMERAL_BASE..=u16::MAX)
            .find(|p| !self.ports.contains_key(&(owner, *p)))
            .expect("ephemeral ports exhausted")
    }

    pub fn accept(&mut self, h: SocketId) -> Result<SocketId> {
        let s = self.get_mut(h)?;
        if s.state != SocketState::Listening {
            return Err(Error::BadState {
                op: "accept",
                state: s.state.as_str(),
            });
        }
        s.pending_accept.pop_front().ok_or(Error::WouldBlock)
    }

    /// Sends `size` bytes and runs the simulation until they are delivered.
    pub fn send(&mut self, h: SocketId, size: u64) -> Result<DeliveryReport> {
        let msg = self.send_nowait(h, size)?;
        self.run_until_complete(msg)
    }

    /// Queues `size` bytes without waiting for delivery.
    pub fn send_nowait(&mut self, h: SocketId, size: u64) -> Result<MsgId> {
        let s = self.get(h)?;
        if s.state != SocketState::Established {
            return Err(Error::BadState {
                op: "send",
                state: s.state.as_str(),
            });
        }
        let (owner, transport, seq) = (s.owner, s.transport, s.next_send_seq);
        let (peer, _) = s.peer.expect("established sockets have a peer");
        let to = s
            .peer_socket
            .expect("established sockets know the peer socket");
        let msg = self.sim.submit(
            transport,
            owner,
            peer,
            size,
            Payload::Socket(SocketFrame::Segment { to, seq, len: size }),
        )?;
        self.get_mut(h)?.next_send_seq += 1;
        Ok(msg)
    }

    /// Reads up to `max` bytes. An empty queue yields `Bytes(0)`.
    pub fn recv(&mut self, h: SocketId, max: u64) -> Result<Received> {
        let s = self.get_mut(h)?;
        if s.state != SocketState::Established {
            return Err(Error::BadState {
                op: "recv",
                state: s.state.as_str(),
            });
        }
        if s.at_end_of_stream() {
            return Ok(Received::EndOfStream);
        }
        let mut taken = 0;
        while taken < max {
            let Some(front) = s.recv_queue.front() else {
                break;
            };
            let left = front.len - s.front_consumed;
            let take = left.min(max - taken);
            taken += take;
            s.front_consumed += take;
            if s.front_consumed == front.len {
                s.recv_queue.pop_front();
                s.front_consumed = 0;
            }
        }
        Ok(Received::Bytes(taken))
    }

    /// Dequeues one whole unread send, with its sequence number.
    pub fn recv_chunk(&mut self, h: SocketId) -> Result<Option<Chunk>> {
        let s = self.get_mut(h)?;
        if s.state != SocketState::Established {
            return Err(Error::BadState {
                op: "recv",
                state: s.state.as_str(),
            });
        }
        let chunk = s.recv_queue.pop_front().map(|c| Chunk {
            seq: c.seq,
            len: c.len - s.front_consumed,
        });
        s.front_consumed = 0;
        Ok(chunk)
    }

    /// Advances the simulation to `now` and reports which handles are ready.
    pub fn select(&mut self, handles: &[SocketId], now: f64) -> Result<BTreeSet<SocketId>> {
        self.advance(now)?;
        let mut ready = BTreeSet::new();
        for &h in handles {
            if self.get(h)?.is_ready() {
                ready.insert(h);
            }
        }
        Ok(ready)
    }

    pub fn close(&mut self, h: SocketId) -> Result<()> {
        let s = self.get(h)?;
        if s.state == SocketState::Closed {
            return Ok(());
        }
        let notify = match (s.state, s.peer, s.peer_socket) {
            (SocketState::Established, Some((peer, _)), Some(to)) => {
                Some((s.owner, s.transport, peer, to, s.next_send_seq))
            }
            _ => None,
        };
        if let Some(port) = s.local_port {
            let key = (s.owner, port);
            if self.ports.get(&key) == Some(&h) {
                self.ports.remove(&key);
            }
        }
        self.get_mut(h)?.apply(SocketEvent::Close)?;
        if let Some((owner, transport, peer, to, seq)) = notify {
            let size = self.sim.config().control_frame_bytes;
            self.sim.submit(
                transport,
                owner,
                peer,
                size,
                Payload::Socket(SocketFrame::Fin { to, seq }),
            )?;
        }
        Ok(())
    }

    pub fn migrate(&mut self, pid: GPid, to: NodeId) -> Result<Option<MigrationEvent>> {
        self.sim.migrate(pid, to)
    }

    /// Processes simulation events up to `t`, dispatching socket traffic as
    /// it arrives.
    pub fn advance(&mut self, t: f64) -> Result<()> {
        while self.sim.step_until(t) {
            self.pump()?;
        }
        self.sim.run_until(t);
        self.pump()
    }

    /// Runs until nothing is left in flight.
    pub fn run_to_idle(&mut self) -> Result<()> {
        while self.sim.step_until(f64::INFINITY) {
            self.pump()?;
        }
        Ok(())
    }

    pub fn run_until_complete(&mut self, msg: MsgId) -> Result<DeliveryReport> {
        while self.sim.report(msg).is_none() {
            if !self.sim.step_until(f64::INFINITY) {
                break;
            }
            self.pump()?;
        }
        Ok(self.sim.run_until_complete(msg))
    }

    fn pump(&mut self) -> Result<()> {
        for d in self.sim.take_deliveries() {
            if let Payload::Socket(frame) = d.payload {
                self.on_socket_frame(&d, frame)?;
            }
        }
        Ok(())
    }

    fn on_socket_frame(&mut self, d: &Delivery, frame: SocketFrame) -> Result<()> {
        let control = self.sim.config().control_frame_bytes;
        match frame {
            SocketFrame::Syn {
                from,
                from_port,
                port,
                transport,
            } => {
                let listener = self
                    .ports
                    .get(&(d.dst, port))
                    .copied()
                    .filter(|id| self.sockets[id].state == SocketState::Listening);
                let reply = match listener {
                    Some(lid) => {
                        let child = SocketId(self.next_id);
                        self.next_id += 1;
                        let mut s = Socket::new(child, d.dst, transport);
                        s.state = SocketState::Established;
                        s.local_port = Some(port);
                        s.peer = Some((d.src, from_port));
                        s.peer_socket = Some(from);
                        s.established_at = Some(d.time);
                        self.sockets.insert(child, s);
                        self.get_mut(lid)?.pending_accept.push_back(child);
                        SocketFrame::SynAck {
                            to: from,
                            from: child,
                        }
                    }
                    None => SocketFrame::Refuse { to: from },
                };
                self.sim
                    .submit(transport, d.dst, d.src, control, Payload::Socket(reply))?;
            }
            SocketFrame::SynAck { to, from } => {
                let s = self.get_mut(to)?;
                if s.state == SocketState::Connecting {
                    s.apply(SocketEvent::HandshakeDone)?;
                    s.peer_socket = Some(from);
                    s.established_at = Some(d.time);
                }
            }
            SocketFrame::Refuse { to } => {
                let s = self.get_mut(to)?;
                if s.state == SocketState::Connecting {
                    s.apply(SocketEvent::Refused)?;
                    s.error = s.peer;
                    if let Some(port) = s.local_port.take() {
                        let key = (s.owner, port);
                        self.ports.remove(&key);
                    }
                }
            }
            SocketFrame::Segment { to, seq, len } => {
                let s = self.get_mut(to)?;
                if s.state != SocketState::Established {
                    self.dropped_segments += 1;
                    return Ok(());
                }
                s.reorder.insert(seq, Chunk { seq, len });
                while let Some(c) = s.reorder.remove(&s.next_recv_seq) {
                    s.recv_queue.push_back(c);
                    s.next_recv_seq += 1;
                }
            }
            SocketFrame::Fin { to, seq } => {
                self.get_mut(to)?.peer_fin = Some(seq);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ClusterState, JobId};
    use crate::simcore::SimConfig;

    fn api(nodes: u32) -> (SocketApi, GPid, GPid) {
        let mut sim = Simulation::new(ClusterState::mesh(nodes).unwrap(), SimConfig::default(), 7);
        let a = sim.cluster_mut().spawn(NodeId(0), JobId(0), 1.0).unwrap();
        let b = sim.cluster_mut().spawn(NodeId(1), JobId(0), 1.0).unwrap();
        (SocketApi::new(sim), a, b)
    }

    fn established(
        api: &mut SocketApi,
        a: GPid,
        b: GPid,
        kind: TransportKind,
    ) -> (SocketId, SocketId) {
        let l = api.socket(b, kind).unwrap();
        api.bind(l, 5000).unwrap();
        api.listen(l).unwrap();
        let c = api.socket(a, kind).unwrap();
        api.connect(c, (b, 5000)).unwrap();
        api.run_to_idle().unwrap();
        let child = api.accept(l).unwrap();
        (c, child)
    }

    #[test]
    fn fresh_socket_is_closed_and_ids_differ() {
        let (mut api, a, _) = api(2);
        let s1 = api.socket(a, TransportKind::Direct).unwrap();
        let s2 = api.socket(a, TransportKind::Direct).unwrap();
        assert_ne!(s1, s2);
        assert_eq!(api.state(s1).unwrap(), SocketState::Closed);
        let ghost = GPid::new(NodeId(1), 9);
        assert!(matches!(
            api.socket(ghost, TransportKind::Relay),
            Err(Error::NoSuchProcess(_))
        ));
    }

    #[test]
    fn bind_and_listen_rules() {
        let (mut api, a, _) = api(2);
        let s = api.socket(a, TransportKind::Direct).unwrap();
        assert!(matches!(api.listen(s), Err(Error::BadState { .. })));
        api.bind(s, 5000).unwrap();
        assert_eq!(api.state(s).unwrap(), SocketState::Bound);
        let t = api.socket(a, TransportKind::Direct).unwrap();
        assert!(matches!(api.bind(t, 5000), Err(Error::AddrInUse { .. })));
        api.listen(s).unwrap();
        assert_eq!(api.state(s).unwrap(), SocketState::Listening);
    }

    #[test]
    fn handshake_establishes_both_ends_after_round_trip() {
        let (mut api, a, b) = api(2);
        let (c, child) = established(&mut api, a, b, TransportKind::Relay);
        assert_eq!(api.state(c).unwrap(), SocketState::Established);
        assert_eq!(api.state(child).unwrap(), SocketState::Established);
        let model = &api.sim().config().model;
        let one_way = model.hop(NodeId(0), NodeId(1), api.sim().config().control_frame_bytes);
        let rtt = api.get(c).unwrap().connect_latency().unwrap();
        assert!((rtt - 2.0 * one_way).abs() < 1e-12);
    }

    #[test]
    fn connect_to_closed_port_is_refused() {
        let (mut api, a, b) = api(2);
        let c = api.socket(a, TransportKind::Direct).unwrap();
        api.connect(c, (b, 80)).unwrap();
        api.run_to_idle().unwrap();
        assert_eq!(api.state(c).unwrap(), SocketState::Closed);
        assert!(matches!(
            api.take_error(c).unwrap(),
            Some(Error::ConnRefused(_, 80))
        ));
    }

    #[test]
    fn accept_errors() {
        let (mut api, a, _) = api(2);
        let s = api.socket(a, TransportKind::Direct).unwrap();
        assert!(matches!(api.accept(s), Err(Error::BadState { .. })));
        api.bind(s, 1).unwrap();
        api.listen(s).unwrap();
        assert!(matches!(api.accept(s), Err(Error::WouldBlock)));
    }

    #[test]
    fn ordered_delivery_over_hundred_sends() {
        let (mut api, a, b) = api(3);
        let (c, child) = established(&mut api, a, b, TransportKind::Direct);
        for _ in 0..100 {
            api.send(c, 1024).unwrap();
        }
        for want in 0..100 {
            let chunk = api.recv_chunk(child).unwrap().unwrap();
            assert_eq!(
                chunk,
                Chunk {
                    seq: want,
                    len: 1024
                }
            );
        }
        assert_eq!(api.recv(child, 10).unwrap(), Received::Bytes(0));
    }

    #[test]
    fn partial_reads() {
        let (mut api, a, b) = api(2);
        let (c, child) = established(&mut api, a, b, TransportKind::Relay);
        api.send(c, 1024).unwrap();
        assert_eq!(api.recv(child, 1000).unwrap(), Received::Bytes(1000));
        assert_eq!(api.recv(child, 1000).unwrap(), Received::Bytes(24));
    }

    #[test]
    fn send_survives_migration_of_both_ends() {
        let (mut api, a, b) = api(6);
        let (c, child) = established(&mut api, a, b, TransportKind::Direct);
        api.migrate(a, NodeId(4)).unwrap();
        api.migrate(b, NodeId(5)).unwrap();
        let r = api.send(c, 4096).unwrap();
        assert!(r.is_delivered());
        assert_eq!(api.state(c).unwrap(), SocketState::Established);
        assert_eq!(api.recv(child, 1 << 20).unwrap(), Received::Bytes(4096));
    }

    #[test]
    fn select_and_close() {
        let (mut api, a, b) = api(2);
        let (c, child) = established(&mut api, a, b, TransportKind::Relay);
        let now = api.sim().now();
        assert!(api.select(&[c, child], now).unwrap().is_empty());
        let msg = api.send_nowait(c, 100).unwrap();
        let before = api.sim().now();
        assert!(api.select(&[child], before).unwrap().is_empty());
        api.run_until_complete(msg).unwrap();
        let t = api.sim().now();
        assert_eq!(api.select(&[c, child], t).unwrap(), BTreeSet::from([child]));
        api.close(c).unwrap();
        api.close(c).unwrap();
        api.run_to_idle().unwrap();
        assert_eq!(api.recv(child, 1000).unwrap(), Received::Bytes(100));
        assert_eq!(api.recv(child, 1000).unwrap(), Received::EndOfStream);
        assert!(matches!(api.send(c, 1), Err(Error::BadState { .. })));
    }

    #[test]
    fn transition_table_is_total() {
        for state in SocketState::ALL {
            for event in SocketEvent::ALL {
                match transition(state, event) {
                    Ok(next) => assert!(SocketState::ALL.contains(&next)),
                    Err(Error::BadState { .. }) => {}
                    Err(e) => panic!("unexpected error {e}"),
                }
            }
        }
    }
}
