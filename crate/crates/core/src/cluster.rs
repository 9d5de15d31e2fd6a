//! Ground truth of the simulated cluster: nodes, topology, where every
//! process lives, and the per-home registries that always know the answer.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gossip::Bulletin;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Cluster-wide process identity. The home node is part of the id and never
/// changes, however many times the process migrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GPid {
    home: NodeId,
    seq: u32,
}

impl GPid {
    pub(crate) fn new(home: NodeId, seq: u32) -> Self {
        Self { home, seq }
    }

    pub fn home(self) -> NodeId {
        self.home
    }

    pub fn seq(self) -> u32 {
        self.seq
    }
}

impl fmt::Display for GPid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.home.0, self.seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u32);

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessRecord {
    pub pid: GPid,
    pub current: NodeId,
    pub job: JobId,
    pub work: f64,
    /// Number of completed migrations.
    pub epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    /// All-to-all.
    Mesh {
        nodes: u32,
    },
    /// Node 0 is the center, nodes 1..n form the outer ring, each outer node
    /// also has a spoke to the center.
    RingWithCenter {
        nodes: u32,
    },
    Edges {
        nodes: u32,
        edges: Vec<(u32, u32)>,
    },
}

impl Topology {
    pub fn node_count(&self) -> usize {
        match self {
            Topology::Mesh { nodes }
            | Topology::RingWithCenter { nodes }
            | Topology::Edges { nodes, .. } => *nodes as usize,
        }
    }

    /// The center node of a ring-with-center topology.
    pub fn center(&self) -> Option<NodeId> {
        match self {
            Topology::RingWithCenter { .. } => Some(NodeId(0)),
            _ => None,
        }
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        match self {
            Topology::Mesh { nodes } => (0..*nodes)
                .flat_map(|a| (a + 1..*nodes).map(move |b| (NodeId(a), NodeId(b))))
                .collect(),
            Topology::RingWithCenter { nodes } => {
                let outer = nodes.saturating_sub(1);
                let mut edges: Vec<_> = (1..*nodes).map(|n| (NodeId(0), NodeId(n))).collect();
                if outer >= 2 {
                    for i in 0..outer {
                        let a = 1 + i;
                        let b = 1 + (i + 1) % outer;
                        edges.push((NodeId(a.min(b)), NodeId(a.max(b))));
                    }
                    edges.sort();
                    edges.dedup();
                }
                edges
            }
            Topology::Edges { edges, .. } => {
                edges.iter().map(|&(a, b)| (NodeId(a), NodeId(b))).collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if n == 0 {
            return Err(Error::InvalidTopology(
                "cluster needs at least one node".into(),
            ));
        }
        let mut adj = vec![Vec::new(); n];
        for (a, b) in self.edges() {
            if a.index() >= n || b.index() >= n {
                return Err(Error::InvalidTopology(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            adj[a.index()].push(b.index());
            adj[b.index()].push(a.index());
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(lost) => Err(Error::InvalidTopology(format!(
                "node {lost} is not connected to node 0"
            ))),
            None => Ok(()),
        }
    }
}

/// Result of a successful (non-trivial) migration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MigrationEvent {
    pub pid: GPid,
    pub from: NodeId,
    pub to: NodeId,
}

/// Node sequence a relayed frame traverses, with consecutive duplicates
/// removed. A single-node path means shared-memory delivery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path(Vec<NodeId>);

impl Path {
    /// Builds a path, collapsing consecutive repeats.
    pub fn collapsed(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        let mut out: Vec<NodeId> = Vec::new();
        for n in nodes {
            if out.last() != Some(&n) {
                out.push(n);
            }
        }
        assert!(!out.is_empty(), "path needs at least one node");
        Path(out)
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    pub fn network_hops(&self) -> usize {
        self.0.len() - 1
    }

    pub fn is_shared_memory(&self) -> bool {
        self.0.len() == 1
    }

    pub fn links(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }

    /// Nodes that carried the frame without originating or terminating it.
    pub fn interior(&self) -> &[NodeId] {
        if self.0.len() <= 2 {
            &[]
        } else {
            &self.0[1..self.0.len() - 1]
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    topology: Topology,
    processes: BTreeMap<GPid, ProcessRecord>,
    resident: Vec<BTreeSet<GPid>>,
    registry: Vec<BTreeMap<GPid, NodeId>>,
    next_seq: Vec<u32>,
    bulletins: Vec<Bulletin>,
}

impl ClusterState {
    pub fn new(topology: Topology) -> Result<Self> {
        topology.validate()?;
        let n = topology.node_count();
        let mut state = Self {
            topology,
            processes: BTreeMap::new(),
            resident: vec![BTreeSet::new(); n],
            registry: vec![BTreeMap::new(); n],
            next_seq: vec![0; n],
            bulletins: (0..n as u32).map(|i| Bulletin::new(NodeId(i))).collect(),
        };
        for i in 0..n as u32 {
            state.publish_own_load(NodeId(i));
        }
        Ok(state)
    }

    pub fn mesh(nodes: u32) -> Result<Self> {
        Self::new(Topology::Mesh { nodes })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn node_count(&self) -> usize {
        self.resident.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.node_count() as u32).map(NodeId)
    }

    pub fn check_node(&self, n: NodeId) -> Result<()> {
        if n.index() < self.node_count() {
            Ok(())
        } else {
            Err(Error::BadNode(n))
        }
    }

    pub fn process(&self, pid: GPid) -> Result<&ProcessRecord> {
        self.processes.get(&pid).ok_or(Error::NoSuchProcess(pid))
    }

    pub fn processes(&self) -> impl Iterator<Item = &ProcessRecord> {
        self.processes.values()
    }

    pub fn process_count(&self) -> usize {
        self.processes.len()
    }

    pub fn resident(&self, n: NodeId) -> &BTreeSet<GPid> {
        &self.resident[n.index()]
    }

    pub fn is_resident(&self, pid: GPid, n: NodeId) -> bool {
        self.resident
            .get(n.index())
            .is_some_and(|set| set.contains(&pid))
    }

    /// The registry kept by home node `home`: every process started there and
    /// where it currently runs.
    pub fn registry(&self, home: NodeId) -> &BTreeMap<GPid, NodeId> {
        &self.registry[home.index()]
    }

    pub fn bulletin(&self, n: NodeId) -> &Bulletin {
        &self.bulletins[n.index()]
    }

    pub fn bulletin_mut(&mut self, n: NodeId) -> &mut Bulletin {
        &mut self.bulletins[n.index()]
    }

    pub fn bulletins(&self) -> &[Bulletin] {
        &self.bulletins
    }

    pub(crate) fn bulletins_mut(&mut self) -> &mut [Bulletin] {
        &mut self.bulletins
    }

    pub fn spawn(&mut self, home: NodeId, job: JobId, work: f64) -> Result<GPid> {
        self.check_node(home)?;
        let seq = self.next_seq[home.index()];
        self.next_seq[home.index()] += 1;
        let pid = GPid::new(home, seq);
        self.processes.insert(
            pid,
            ProcessRecord {
                pid,
                current: home,
                job,
                work: work.max(0.0),
                epoch: 0,
            },
        );
        self.resident[home.index()].insert(pid);
        self.registry[home.index()].insert(pid, home);
        self.bulletins[home.index()].publish_location(pid, home, 0);
        self.publish_own_load(home);
        Ok(pid)
    }

    /// Moves `pid` to `to`. The home registry is updated in the same step, so
    /// [`locate_authoritative`](Self::locate_authoritative) is never stale.
    /// Returns `None` when `to` is already the current node.
    pub fn migrate(&mut self, pid: GPid, to: NodeId) -> Result<Option<MigrationEvent>> {
        self.check_node(to)?;
        let record = self
            .processes
            .get_mut(&pid)
            .ok_or(Error::NoSuchProcess(pid))?;
        let from = record.current;
        if from == to {
            return Ok(None);
        }
        record.current = to;
        record.epoch += 1;
        let epoch = record.epoch;
        self.resident[from.index()].remove(&pid);
        self.resident[to.index()].insert(pid);
        self.registry[pid.home().index()].insert(pid, to);
        self.bulletins[to.index()].publish_location(pid, to, epoch);
        self.publish_own_load(from);
        self.publish_own_load(to);
        Ok(Some(MigrationEvent { pid, from, to }))
    }

    pub fn locate_authoritative(&self, pid: GPid) -> Result<NodeId> {
        self.registry
            .get(pid.home().index())
            .and_then(|reg| reg.get(&pid))
            .copied()
            .ok_or(Error::NoSuchProcess(pid))
    }

    /// Route of the home-relay baseline: R1 -> H1 -> H2 -> R2.
    pub fn relay_path(&self, src: GPid, dst: GPid) -> Result<Path> {
        let r1 = self.process(src)?.current;
        let r2 = self.process(dst)?.current;
        Ok(Path::collapsed([r1, src.home(), dst.home(), r2]))
    }

    pub fn node_load(&self, n: NodeId) -> Result<f64> {
        self.check_node(n)?;
        Ok(self.resident[n.index()]
            .iter()
            .map(|pid| self.processes[pid].work)
            .sum())
    }

    pub(crate) fn publish_own_load(&mut self, n: NodeId) {
        let load: f64 = self.resident[n.index()]
            .iter()
            .map(|pid| self.processes[pid].work)
            .sum();
        self.bulletins[n.index()].publish_load(n, load);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job() -> JobId {
        JobId(0)
    }

    #[test]
    fn first_spawn_gets_seq_zero() {
        let mut c = ClusterState::mesh(1).unwrap();
        let p = c.spawn(NodeId(0), job(), 1.0).unwrap();
        assert_eq!(p, GPid::new(NodeId(0), 0));
        assert!(c.is_resident(p, NodeId(0)));
        assert_eq!(
            c.bulletin(NodeId(0)).lookup_location(p),
            Some((NodeId(0), 0))
        );
    }

    #[test]
    fn spawn_seq_is_per_home_and_monotone() {
        let mut c = ClusterState::mesh(6).unwrap();
        let a = c.spawn(NodeId(3), job(), 1.0).unwrap();
        let b = c.spawn(NodeId(3), job(), 1.0).unwrap();
        let other = c.spawn(NodeId(2), job(), 1.0).unwrap();
        assert_eq!((a.seq(), b.seq(), other.seq()), (0, 1, 0));
    }

    #[test]
    fn spawn_on_missing_node_fails() {
        let mut c = ClusterState::mesh(6).unwrap();
        assert!(matches!(
            c.spawn(NodeId(99), job(), 1.0),
            Err(Error::BadNode(NodeId(99)))
        ));
    }

    #[test]
    fn migrate_updates_home_registry() {
        let mut c = ClusterState::mesh(6).unwrap();
        let p = c.spawn(NodeId(0), job(), 1.0).unwrap();
        let ev = c.migrate(p, NodeId(4)).unwrap().unwrap();
        assert_eq!((ev.from, ev.to), (NodeId(0), NodeId(4)));
        assert_eq!(c.registry(NodeId(0))[&p], NodeId(4));
        assert!(c.resident(NodeId(4)).contains(&p));
        assert!(!c.resident(NodeId(0)).contains(&p));
        assert_eq!(
            c.bulletin(NodeId(4)).lookup_location(p),
            Some((NodeId(4), 0))
        );
    }

    #[test]
    fn self_migration_is_noop() {
        let mut c = ClusterState::mesh(3).unwrap();
        let p = c.spawn(NodeId(1), job(), 1.0).unwrap();
        let before = format!("{:?}", c);
        assert_eq!(c.migrate(p, NodeId(1)).unwrap(), None);
        assert_eq!(before, format!("{:?}", c));
    }

    #[test]
    fn migrate_errors() {
        let mut c = ClusterState::mesh(3).unwrap();
        let p = c.spawn(NodeId(1), job(), 1.0).unwrap();
        let ghost = GPid::new(NodeId(2), 7);
        assert!(matches!(
            c.migrate(ghost, NodeId(0)),
            Err(Error::NoSuchProcess(_))
        ));
        assert!(matches!(c.migrate(p, NodeId(9)), Err(Error::BadNode(_))));
        assert!(matches!(
            c.locate_authoritative(ghost),
            Err(Error::NoSuchProcess(_))
        ));
    }

    #[test]
    fn locate_follows_migrations() {
        let mut c = ClusterState::mesh(6).unwrap();
        let p = c.spawn(NodeId(2), job(), 1.0).unwrap();
        assert_eq!(c.locate_authoritative(p).unwrap(), NodeId(2));
        c.migrate(p, NodeId(5)).unwrap();
        assert_eq!(c.locate_authoritative(p).unwrap(), NodeId(5));
    }

    #[test]
    fn relay_path_cases() {
        let mut c = ClusterState::mesh(6).unwrap();
        let x = c.spawn(NodeId(0), job(), 1.0).unwrap();
        let y = c.spawn(NodeId(1), job(), 1.0).unwrap();
        let p = c.relay_path(x, y).unwrap();
        assert_eq!(p.nodes(), &[NodeId(0), NodeId(1)]);
        assert_eq!(p.network_hops(), 1);

        c.migrate(x, NodeId(2)).unwrap();
        c.migrate(y, NodeId(3)).unwrap();
        let p = c.relay_path(x, y).unwrap();
        assert_eq!(p.nodes(), &[NodeId(2), NodeId(0), NodeId(1), NodeId(3)]);
        assert_eq!(p.interior(), &[NodeId(0), NodeId(1)]);

        c.migrate(y, NodeId(2)).unwrap();
        let z = c.spawn(NodeId(4), job(), 1.0).unwrap();
        let w = c.spawn(NodeId(4), job(), 1.0).unwrap();
        let p = c.relay_path(z, w).unwrap();
        assert!(p.is_shared_memory());
        assert_eq!(p.network_hops(), 0);
    }

    #[test]
    fn node_load_sums_work() {
        let mut c = ClusterState::mesh(2).unwrap();
        assert_eq!(c.node_load(NodeId(0)).unwrap(), 0.0);
        c.spawn(NodeId(0), job(), 1.0).unwrap();
        c.spawn(NodeId(0), job(), 1.0).unwrap();
        assert_eq!(c.node_load(NodeId(0)).unwrap(), 2.0);
        assert!(c.node_load(NodeId(2)).is_err());
    }

    #[test]
    fn topologies_validate() {
        assert!(Topology::Mesh { nodes: 0 }.validate().is_err());
        assert!(Topology::RingWithCenter { nodes: 7 }.validate().is_ok());
        assert_eq!(
            Topology::RingWithCenter { nodes: 5 }.edges().len(),
            4 + 4,
            "spokes plus ring"
        );
        assert!(Topology::Edges {
            nodes: 3,
            edges: vec![(0, 1)]
        }
        .validate()
        .is_err());
        assert!(Topology::Edges {
            nodes: 3,
            edges: vec![(0, 1), (1, 2)]
        }
        .validate()
        .is_ok());
        assert!(Topology::Edges {
            nodes: 2,
            edges: vec![(0, 5)]
        }
        .validate()
        .is_err());
    }
}
