//! Bounded-load rumor mongering of process locations and node loads.
//!
//! Every round, all entries age by one, each node refreshes the facts it owns,
//! then every node (in index order) picks a uniformly random peer and the two
//! swap bounded digests. Lower age wins on merge.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterState, GPid, NodeId};

pub const DEFAULT_DIGEST_BOUND: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocationEntry {
    pub pid: GPid,
    pub node: NodeId,
    pub age: u32,
    /// Migration count of the process when the fact was produced. Breaks
    /// equal-age ties, which arise when a process moves twice between rounds.
    pub epoch: u32,
}

impl LocationEntry {
    fn supersedes(&self, resident: &LocationEntry) -> bool {
        self.age < resident.age || (self.age == resident.age && self.epoch > resident.epoch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadEntry {
    pub node: NodeId,
    pub load: f64,
    pub age: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GossipDigest {
    pub locations: Vec<LocationEntry>,
    pub loads: Vec<LoadEntry>,
}

impl GossipDigest {
    pub fn len(&self) -> usize {
        self.locations.len() + self.loads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sort key for digest selection: younger first, then locations before
/// loads, then by key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EntryKey {
    Location(u32, GPid),
    Load(u32, NodeId),
}

impl EntryKey {
    fn age(self) -> u32 {
        match self {
            EntryKey::Location(age, _) | EntryKey::Load(age, _) => age,
        }
    }

    fn cmp_for_digest(&self, other: &Self) -> Ordering {
        self.age().cmp(&other.age()).then_with(|| self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bulletin {
    owner: NodeId,
    locations: BTreeMap<GPid, LocationEntry>,
    loads: BTreeMap<NodeId, LoadEntry>,
}

impl Bulletin {
    pub fn new(owner: NodeId) -> Self {
        Self {
            owner,
            locations: BTreeMap::new(),
            loads: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.locations.len() + self.loads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn publish_location(&mut self, pid: GPid, node: NodeId, epoch: u32) {
        self.locations.insert(
            pid,
            LocationEntry {
                pid,
                node,
                age: 0,
                epoch,
            },
        );
    }

    pub fn publish_load(&mut self, node: NodeId, load: f64) {
        self.loads.insert(node, LoadEntry { node, load, age: 0 });
    }

    /// Forgets what this bulletin believes about `pid`, e.g. after a peer
    /// reported it does not host the process.
    pub fn invalidate_location(&mut self, pid: GPid) -> Option<LocationEntry> {
        self.locations.remove(&pid)
    }

    pub fn lookup_location(&self, pid: GPid) -> Option<(NodeId, u32)> {
        self.locations.get(&pid).map(|e| (e.node, e.age))
    }

    pub fn locations(&self) -> impl Iterator<Item = &LocationEntry> {
        self.locations.values()
    }

    pub fn load_view(&self) -> BTreeMap<NodeId, (f64, u32)> {
        self.loads
            .iter()
            .map(|(&n, e)| (n, (e.load, e.age)))
            .collect()
    }

    pub fn advance_round(&mut self) {
        for e in self.locations.values_mut() {
            e.age = e.age.saturating_add(1);
        }
        for e in self.loads.values_mut() {
            e.age = e.age.saturating_add(1);
        }
    }

    /// The `bound` youngest entries. Ties are broken by kind then key, so the
    /// result does not depend on any randomness.
    pub fn make_digest(&self, bound: usize) -> GossipDigest {
        let mut keys: Vec<EntryKey> = self
            .locations
            .values()
            .map(|e| EntryKey::Location(e.age, e.pid))
            .chain(self.loads.values().map(|e| EntryKey::Load(e.age, e.node)))
            .collect();
        if keys.len() > bound {
            keys.select_nth_unstable_by(bound, EntryKey::cmp_for_digest);
            keys.truncate(bound);
        }
        keys.sort_by(EntryKey::cmp_for_digest);
        let mut digest = GossipDigest::default();
        for key in keys {
            match key {
                EntryKey::Location(_, pid) => digest.locations.push(self.locations[&pid]),
                EntryKey::Load(_, node) => digest.loads.push(self.loads[&node]),
            }
        }
        digest
    }

    /// Applies every incoming entry that is strictly younger than the one we
    /// hold (or equally old but from a later migration). Returns how many
    /// entries changed.
    pub fn merge(&mut self, digest: &GossipDigest) -> usize {
        let mut changed = 0;
        for incoming in &digest.locations {
            let newer = self
                .locations
                .get(&incoming.pid)
                .is_none_or(|resident| incoming.supersedes(resident));
            if newer {
                self.locations.insert(incoming.pid, *incoming);
                changed += 1;
            }
        }
        for incoming in &digest.loads {
            if incoming.node == self.owner {
                continue;
            }
            let newer = self
                .loads
                .get(&incoming.node)
                .is_none_or(|resident| incoming.age < resident.age);
            if newer {
                self.loads.insert(incoming.node, *incoming);
                changed += 1;
            }
        }
        changed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GossipConfig {
    /// Maximum entries per digest.
    pub bound: usize,
    /// Probability that a whole exchange is lost.
    pub drop_probability: f64,
    /// Rounds per simulated second, used when gossip runs alongside traffic.
    pub rounds_per_second: f64,
}

impl Default for GossipConfig {
    fn default() -> Self {
        Self {
            bound: DEFAULT_DIGEST_BOUND,
            drop_probability: 0.0,
            rounds_per_second: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RoundReport {
    pub pairs: usize,
    pub frames: usize,
    pub entries_moved: usize,
    pub dropped: usize,
    pub max_digest: usize,
}

/// One synchronous gossip round over the whole cluster.
pub fn gossip_round<R: Rng + ?Sized>(
    state: &mut ClusterState,
    config: &GossipConfig,
    rng: &mut R,
) -> RoundReport {
    let n = state.node_count();
    for b in state.bulletins_mut() {
        b.advance_round();
    }
    for node in 0..n as u32 {
        state.publish_own_load(NodeId(node));
    }
    let mut report = RoundReport::default();
    if n < 2 {
        return report;
    }
    let bound = config.bound.max(1);
    for initiator in 0..n {
        let mut peer = rng.gen_range(0..n - 1);
        if peer >= initiator {
            peer += 1;
        }
        let lost = config.drop_probability > 0.0 && rng.gen_bool(config.drop_probability.min(1.0));
        report.frames += 1;
        if lost {
            report.dropped += 1;
            continue;
        }
        report.frames += 1;
        report.pairs += 1;
        let bulletins = state.bulletins_mut();
        let push = bulletins[initiator].make_digest(bound);
        let pull = bulletins[peer].make_digest(bound);
        report.max_digest = report.max_digest.max(push.len()).max(pull.len());
        report.entries_moved += bulletins[peer].merge(&push);
        report.entries_moved += bulletins[initiator].merge(&pull);
    }
    report
}

/// Number of bulletins that currently map `pid` to `node`.
pub fn informed_count(state: &ClusterState, pid: GPid, node: NodeId) -> usize {
    state
        .bulletins()
        .iter()
        .filter(|b| b.lookup_location(pid).map(|(n, _)| n) == Some(node))
        .count()
}

/// True when every bulletin knows the true location of every process and the
/// true load of every node.
pub fn is_converged(state: &ClusterState) -> bool {
    state.bulletins().iter().all(|b| {
        state
            .processes()
            .all(|p| b.lookup_location(p.pid).map(|(n, _)| n) == Some(p.current))
            && state.nodes().all(|n| {
                let truth = state.node_load(n).unwrap_or(f64::NAN);
                b.load_view().get(&n).map(|&(l, _)| l) == Some(truth)
            })
    })
}

/// Runs rounds until [`is_converged`] holds. Returns the number of rounds
/// used, or `None` if `max_rounds` was not enough.
pub fn converge<R: Rng + ?Sized>(
    state: &mut ClusterState,
    config: &GossipConfig,
    rng: &mut R,
    max_rounds: usize,
) -> Option<usize> {
    for round in 0..=max_rounds {
        if is_converged(state) {
            return Some(round);
        }
        if round < max_rounds {
            gossip_round(state, config, rng);
        }
    }
    None
}
