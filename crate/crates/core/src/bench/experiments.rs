//! Built-in experiment templates.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{GossipRow, LatencyRow, Report};
use super::RunOptions;
use crate::balancer::{self, BalancePolicy, JobSpec};
use crate::cluster::{ClusterState, GPid, JobId, NodeId, Topology};
use crate::error::{Error, FieldError, Result};
use crate::gossip::{self, GossipConfig};
use crate::par;
use crate::simcore::{SimConfig, Simulation, TransportKind};

/// Gossip rounds allowed before a template gives up on convergence.
const WARMUP_ROUNDS: usize = 10_000;

/// Powers of two from 1 KiB to 64 MiB.
pub fn default_sweep_sizes() -> Vec<u64> {
    (10..=26).map(|k| 1u64 << k).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Both processes run on their home nodes.
    Local,
    /// Both processes run away from home, on four distinct nodes.
    Migrated,
}

impl Placement {
    pub fn as_str(self) -> &'static str {
        match self {
            Placement::Local => "local",
            Placement::Migrated => "migrated",
        }
    }
}

/// Two processes homed at nodes 0 and 1, moved to 2 and 3 when migrated,
/// with converged bulletins.
fn pair(config: &SimConfig, placement: Placement, seed: u64) -> Result<(Simulation, GPid, GPid)> {
    let mut sim = Simulation::new(ClusterState::mesh(4)?, config.clone(), seed);
    let a = sim.cluster_mut().spawn(NodeId(0), JobId(0), 1.0)?;
    let b = sim.cluster_mut().spawn(NodeId(1), JobId(0), 1.0)?;
    if placement == Placement::Migrated {
        sim.migrate(a, NodeId(2))?;
        sim.migrate(b, NodeId(3))?;
    }
    sim.converge(WARMUP_ROUNDS)
        .ok_or_else(|| Error::NoSolution("gossip did not converge".into()))?;
    Ok((sim, a, b))
}

/// Send/reply round-trip latency between the pair.
pub fn round_trip(
    config: &SimConfig,
    placement: Placement,
    kind: TransportKind,
    size: u64,
    seed: u64,
) -> Result<f64> {
    let (mut sim, a, b) = pair(config, placement, seed)?;
    let there = sim.send(kind, a, b, size)?;
    let back = sim.send(kind, b, a, size)?;
    if !there.is_delivered() || !back.is_delivered() {
        return Err(Error::NoSolution(format!(
            "{size}-byte exchange was not delivered"
        )));
    }
    Ok(there.latency + back.latency)
}

/// The four curves of the latency comparison for one size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub size: u64,
    pub relay_local: f64,
    pub relay_migrated: f64,
    pub direct_local: f64,
    pub direct_migrated: f64,
}

impl SweepPoint {
    pub fn slowdown(&self) -> f64 {
        self.direct_local / self.relay_local - 1.0
    }

    pub fn improvement(&self) -> f64 {
        1.0 - self.direct_migrated / self.relay_migrated
    }
}

pub fn sweep_points(sizes: &[u64], opts: &RunOptions) -> Result<Vec<SweepPoint>> {
    let seed = opts.seed.unwrap_or(0);
    let config = &opts.config;
    par::map_slice(opts.exec, sizes, |&size| {
        let rt = |p, k| round_trip(config, p, k, size, seed);
        Ok(SweepPoint {
            size,
            relay_local: rt(Placement::Local, TransportKind::Relay)?,
            relay_migrated: rt(Placement::Migrated, TransportKind::Relay)?,
            direct_local: rt(Placement::Local, TransportKind::Direct)?,
            direct_migrated: rt(Placement::Migrated, TransportKind::Direct)?,
        })
    })
    .into_iter()
    .collect()
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Smallest size from which Direct beats migrated Relay at every larger
/// size in the sweep.
pub fn crossover(points: &[SweepPoint]) -> Option<u64> {
    let mut best = None;
    for p in points.iter().rev() {
        if p.direct_migrated < p.relay_migrated {
            best = Some(p.size);
        } else {
            break;
        }
    }
    best
}

/// Round-trip latency per size, transport and placement.
pub fn latency_sweep(sizes: &[u64], placements: &[Placement], opts: &RunOptions) -> Result<Report> {
    if sizes.is_empty() {
        return Err(Error::InvalidScenario(vec![FieldError::new(
            "sizes",
            "need at least one message size",
        )]));
    }
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let points = sweep_points(&sizes, opts)?;
    let mut report = Report::new("sweep", opts.seed.unwrap_or(0));
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    for &placement in placements {
        for kind in [TransportKind::Relay, TransportKind::Direct] {
            let name = format!("{}_{}", kind.as_str(), placement.as_str());
            let values: Vec<f64> = points
                .iter()
                .map(|p| match (kind, placement) {
                    (TransportKind::Relay, Placement::Local) => p.relay_local,
                    (TransportKind::Relay, Placement::Migrated) => p.relay_migrated,
                    (_, Placement::Local) => p.direct_local,
                    (_, Placement::Migrated) => p.direct_migrated,
                })
                .collect();
            for (p, &v) in points.iter().zip(&values) {
                report.latency.push(LatencyRow {
                    series: name.clone(),
                    size: p.size,
                    latency: v,
                });
            }
            series.push((name, values));
        }
    }
    for (name, values) in &series {
        let monotone = values.windows(2).all(|w| w[0] <= w[1]);
        report.check(
            format!("monotone_{name}"),
            monotone,
            "latency non-decreasing in size",
        );
    }
    let both = placements.contains(&Placement::Local) && placements.contains(&Placement::Migrated);
    if both {
        let slowdown = mean(points.iter().map(SweepPoint::slowdown));
        let improvement = mean(points.iter().map(SweepPoint::improvement));
        report.stat("mean_slowdown", slowdown);
        report.stat("mean_improvement", improvement);
        let identical = points
            .iter()
            .all(|p| p.direct_local.to_bits() == p.direct_migrated.to_bits());
        report.check(
            "direct_location_independent",
            identical,
            "direct latency bit-identical for local and migrated placements",
        );
        match crossover(&points) {
            Some(size) => {
                report.stat("crossover_bytes", size as f64);
                let ordered = points
                    .iter()
                    .filter(|p| p.size >= size)
                    .all(|p| p.relay_local < p.direct_local && p.direct_local < p.relay_migrated);
                report.check(
                    "ordering_above_crossover",
                    ordered,
                    format!("relay_local < direct < relay_migrated for sizes >= {size}"),
                );
            }
            None => report.check(
                "ordering_above_crossover",
                false,
                "direct never beats migrated relay in this sweep",
            ),
        }
    }
    Ok(report)
}

/// Largest size `kind` delivers, by binary search over [0, 2^48].
pub fn max_deliverable(config: &SimConfig, kind: TransportKind, seed: u64) -> Result<u64> {
    let (mut sim, a, b) = pair(config, Placement::Migrated, seed)?;
    let mut ok = |size: u64| -> Result<bool> {
        match sim.send(kind, a, b, size) {
            Ok(r) => Ok(r.is_delivered()),
            Err(Error::MsgTooLarge { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    };
    if !ok(0)? {
        return Ok(0);
    }
    let (mut lo, mut hi) = (0u64, 1u64 << 48);
    if ok(hi)? {
        return Ok(hi);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

pub fn limit_test(opts: &RunOptions) -> Result<Report> {
    let seed = opts.seed.unwrap_or(0);
    let config = &opts.config;
    let mut report = Report::new("limit", seed);
    let relay = max_deliverable(config, TransportKind::Relay, seed)?;
    let direct = max_deliverable(config, TransportKind::Direct, seed)?;
    report.stat("relay_max_bytes", relay as f64);
    report.stat("direct_max_bytes", direct as f64);
    report.check(
        "relay_max_is_cap",
        relay == config.caps.relay,
        format!("measured {relay}, cap {}", config.caps.relay),
    );
    report.check(
        "direct_max_twice_relay",
        direct == 2 * relay,
        format!("direct {direct} vs 2 x relay {}", 2 * relay),
    );
    let (mut sim, a, b) = pair(config, Placement::Migrated, seed)?;
    let over = sim.send(TransportKind::Relay, a, b, relay + 1);
    report.check(
        "relay_over_cap_rejected",
        matches!(over, Err(Error::MsgTooLarge { .. })),
        format!("relay send of {} bytes", relay + 1),
    );
    let at_cap = [TransportKind::Relay, TransportKind::Direct].map(|k| {
        sim.send(k, a, b, config.caps.relay)
            .map(|r| r.is_delivered())
            .unwrap_or(false)
    });
    report.check(
        "relay_cap_fits_both",
        at_cap == [true, true],
        format!("{} bytes over relay and direct", config.caps.relay),
    );
    Ok(report)
}

/// Center-homed processes, one per outer node, exchanging `size` bytes
/// between every ordered pair.
pub fn ring_load(k: u32, size: u64, opts: &RunOptions) -> Result<Report> {
    if k < 2 {
        return Err(Error::InvalidScenario(vec![FieldError::new(
            "k",
            "need at least two processes",
        )]));
    }
    let seed = opts.seed.unwrap_or(0);
    let mut report = Report::new("ring", seed);
    let pairs = (k * (k - 1)) as u64;
    let total = pairs * size;
    report.stat("processes", k as f64);
    report.stat("total_payload_bytes", total as f64);
    let phases = [
        ("relay", TransportKind::Relay, true),
        ("direct_converged", TransportKind::Direct, true),
        ("direct_cold", TransportKind::Direct, false),
    ];
    let center = NodeId(0);
    for (label, kind, warm) in phases {
        let cluster = ClusterState::new(Topology::RingWithCenter { nodes: k + 1 })?;
        let mut sim = Simulation::new(cluster, opts.config.clone(), seed);
        if opts.trace {
            sim.enable_trace();
        }
        let mut pids = Vec::new();
        for i in 0..k {
            let pid = sim.cluster_mut().spawn(center, JobId(0), 1.0)?;
            sim.migrate(pid, NodeId(i + 1))?;
            pids.push(pid);
        }
        if warm {
            sim.converge(WARMUP_ROUNDS)
                .ok_or_else(|| Error::NoSolution("gossip did not converge".into()))?;
        }
        let mut latencies = Vec::new();
        for &src in &pids {
            for &dst in &pids {
                if src != dst {
                    let r = sim.send(kind, src, dst, size)?;
                    latencies.push(r.latency);
                    sim.forget(r.msg);
                }
            }
        }
        let m = sim.metrics_snapshot();
        let c = m.node(center);
        report.stat(
            format!("{label}_center_relayed_bytes"),
            c.relayed_bytes as f64,
        );
        report.stat(
            format!("{label}_center_relayed_frames"),
            c.relayed_frames as f64,
        );
        report.stat(
            format!("{label}_mean_latency"),
            mean(latencies.iter().copied()),
        );
        match label {
            "relay" => report.check(
                "relay_center_carries_everything",
                c.relayed_bytes == total,
                format!("center relayed {} of {total} bytes", c.relayed_bytes),
            ),
            "direct_converged" => report.check(
                "direct_bypasses_center",
                c.relayed_bytes == 0,
                format!("center relayed {} bytes", c.relayed_bytes),
            ),
            _ => report.check(
                "cold_direct_one_forward_per_pair",
                c.relayed_frames <= pairs,
                format!(
                    "center forwarded {} frames for {pairs} pairs",
                    c.relayed_frames
                ),
            ),
        }
        if opts.trace && label == "direct_cold" {
            report.trace = Some(sim.trace().to_vec());
        }
        report.metrics.push((label.to_string(), m));
    }
    Ok(report)
}

/// Six nodes: 0 and 1 hold a process of each job, 2 holds one of job 0,
/// 3 one of job 1, 4 and 5 are idle.
pub fn imbalanced_cluster() -> Result<ClusterState> {
    let mut c = ClusterState::mesh(6)?;
    for (node, job) in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (3, 1)] {
        c.spawn(NodeId(node), JobId(job), 1.0)?;
    }
    Ok(c)
}

pub fn balanced_cluster() -> Result<ClusterState> {
    let mut c = ClusterState::mesh(6)?;
    for node in 0..6 {
        c.spawn(NodeId(node), JobId(node % 2), 1.0)?;
    }
    Ok(c)
}

/// Repeats gossip-then-balance until no node moves anything. Returns the
/// number of migrations.
pub fn balance_to_fixpoint(
    state: &mut ClusterState,
    policy: &BalancePolicy,
    gossip: &GossipConfig,
    rng: &mut ChaCha8Rng,
    max_steps: usize,
) -> Result<usize> {
    let mut moved = 0;
    for _ in 0..max_steps {
        gossip::converge(state, gossip, rng, WARMUP_ROUNDS)
            .ok_or_else(|| Error::NoSolution("gossip did not converge".into()))?;
        let moves = balancer::balance_step(state, policy);
        if moves.is_empty() {
            return Ok(moved);
        }
        moved += moves.len();
    }
    Err(Error::NoSolution(format!(
        "no fixpoint within {max_steps} steps"
    )))
}

fn worst_makespan(state: &ClusterState, jobs: &[JobSpec]) -> Result<f64> {
    jobs.iter()
        .map(|j| balancer::job_makespan(state, j))
        .try_fold(0.0, |acc, m| m.map(|m| f64::max(acc, m)))
}

pub fn imbalance_test(opts: &RunOptions) -> Result<Report> {
    let seed = opts.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::new("imbalance", seed);
    let policy = BalancePolicy::default();
    let gossip = opts.config.gossip;

    let mut state = imbalanced_cluster()?;
    let jobs: Vec<JobSpec> = [JobId(0), JobId(1)]
        .map(|j| JobSpec::from_cluster(&state, j, 1))
        .into();
    let before: Vec<f64> = jobs
        .iter()
        .map(|j| balancer::job_makespan(&state, j))
        .collect::<Result<_>>()?;
    report.stat("max_load_before", balancer::max_load(&state));
    let moved = balance_to_fixpoint(&mut state, &policy, &gossip, &mut rng, 100)?;
    let after: Vec<f64> = jobs
        .iter()
        .map(|j| balancer::job_makespan(&state, j))
        .collect::<Result<_>>()?;
    report.stat("max_load_after", balancer::max_load(&state));
    report.stat("migrations", moved as f64);

    let procs: Vec<(JobId, f64)> = state.processes().map(|p| (p.job, p.work)).collect();
    let phases: BTreeMap<JobId, u32> = jobs.iter().map(|j| (j.id, j.phases)).collect();
    let optimum = balancer::optimal_makespan(&procs, &phases, state.node_count(), opts.exec);
    report.stat("optimal_makespan", optimum);
    for (j, (b, a)) in jobs.iter().zip(before.iter().zip(&after)) {
        report.stat(format!("job{}_makespan_before", j.id.0), *b);
        report.stat(format!("job{}_makespan_after", j.id.0), *a);
        report.check(
            format!("job{}_faster", j.id.0),
            a < b,
            format!("makespan {b} -> {a}"),
        );
    }
    let worst = worst_makespan(&state, &jobs)?;
    report.check(
        "within_twice_optimum",
        worst <= 2.0 * optimum,
        format!("worst makespan {worst}, optimum {optimum}"),
    );

    let mut calm = balanced_cluster()?;
    let calm_moves = balance_to_fixpoint(&mut calm, &policy, &gossip, &mut rng, 100)?;
    report.check(
        "balanced_input_untouched",
        calm_moves == 0,
        format!("{calm_moves} migrations on an already balanced cluster"),
    );
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GossipStudy {
    pub nodes: u32,
    pub trials: usize,
    pub config: GossipConfig,
    /// Rounds after which a trial counts as failed.
    pub max_rounds: usize,
    /// Rounds within which a trial counts as fast.
    pub target_rounds: usize,
}

impl Default for GossipStudy {
    fn default() -> Self {
        Self {
            nodes: 32,
            trials: 1000,
            config: GossipConfig::default(),
            max_rounds: 150,
            target_rounds: 15,
        }
    }
}

/// Outcome of one dissemination trial.
#[derive(Debug, Clone, PartialEq)]
pub struct GossipTrial {
    pub rounds: Option<usize>,
    pub rows: Vec<GossipRow>,
    pub frames_ok: bool,
    pub digest_ok: bool,
    pub monotone: bool,
}

/// Number of (bulletin, fact) pairs that match ground truth.
pub fn informed_facts(state: &ClusterState) -> usize {
    state
        .bulletins()
        .iter()
        .map(|b| {
            let locs = state
                .processes()
                .filter(|p| b.lookup_location(p.pid).map(|(n, _)| n) == Some(p.current))
                .count();
            let view = b.load_view();
            let loads = state
                .nodes()
                .filter(|&n| view.get(&n).map(|&(l, _)| l) == state.node_load(n).ok())
                .count();
            locs + loads
        })
        .sum()
}

/// One process per node, each moved to the next node, then gossip until
/// every bulletin matches the truth.
pub fn gossip_trial(study: &GossipStudy, trial: usize, seed: u64) -> Result<GossipTrial> {
    let n = study.nodes;
    let mut state = ClusterState::mesh(n)?;
    for i in 0..n {
        let pid = state.spawn(NodeId(i), JobId(0), 1.0)?;
        state.migrate(pid, NodeId((i + 1) % n))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
    let mut out = GossipTrial {
        rounds: None,
        rows: Vec::new(),
        frames_ok: true,
        digest_ok: true,
        monotone: true,
    };
    let mut informed = informed_facts(&state);
    for round in 1..=study.max_rounds {
        let r = gossip::gossip_round(&mut state, &study.config, &mut rng);
        let now = informed_facts(&state);
        out.frames_ok &= r.frames <= 2 * n as usize;
        out.digest_ok &= r.max_digest <= study.config.bound;
        out.monotone &= now >= informed;
        informed = now;
        out.rows.push(GossipRow {
            trial,
            round,
            frames: r.frames,
            entries_moved: r.entries_moved,
            dropped: r.dropped,
            max_digest: r.max_digest,
            informed: now,
        });
        if gossip::is_converged(&state) {
            out.rounds = Some(round);
            break;
        }
    }
    Ok(out)
}

pub fn gossip_stats(study: &GossipStudy, opts: &RunOptions) -> Result<Report> {
    if study.nodes < 2 || study.trials == 0 {
        return Err(Error::InvalidScenario(vec![FieldError::new(
            "study",
            "need at least two nodes and one trial",
        )]));
    }
    let seed = opts.seed.unwrap_or(0);
    let trials: Vec<GossipTrial> =
        par::map_range(opts.exec, study.trials, |t| gossip_trial(study, t, seed))
            .into_iter()
            .collect::<Result<_>>()?;
    let mut report = Report::new("gossip", seed);
    let done: Vec<usize> = trials.iter().filter_map(|t| t.rounds).collect();
    let fast = done.iter().filter(|&&r| r <= study.target_rounds).count();
    let total = study.trials as f64;
    report.stat("nodes", study.nodes as f64);
    report.stat("trials", total);
    report.stat("drop_probability", study.config.drop_probability);
    report.stat("converged_fraction", done.len() as f64 / total);
    report.stat(
        format!("within_{}_rounds_fraction", study.target_rounds),
        fast as f64 / total,
    );
    if !done.is_empty() {
        report.stat("mean_rounds", mean(done.iter().map(|&r| r as f64)));
        report.stat("max_rounds", *done.iter().max().expect("non-empty") as f64);
    }
    report.check(
        "frames_per_round_at_most_2n",
        trials.iter().all(|t| t.frames_ok),
        format!("n = {}", study.nodes),
    );
    report.check(
        "digest_within_bound",
        trials.iter().all(|t| t.digest_ok),
        format!("B = {}", study.config.bound),
    );
    report.check(
        "informed_set_monotone",
        trials.iter().all(|t| t.monotone),
        "facts matching truth never decrease",
    );
    for t in trials {
        report.gossip.extend(t.rows);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_curves_are_monotone_and_direct_ignores_placement() {
        let r = latency_sweep(
            &[1024, 65536, 1 << 20],
            &[Placement::Local, Placement::Migrated],
            &RunOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{}", r.summary());
        assert_eq!(r.series("direct_migrated").len(), 3);
    }

    #[test]
    fn empty_sweep_is_invalid() {
        assert!(matches!(
            latency_sweep(&[], &[Placement::Local], &RunOptions::default()),
            Err(Error::InvalidScenario(_))
        ));
    }

    #[test]
    fn crossover_is_first_size_of_the_winning_tail() {
        let p = |size, d, r| SweepPoint {
            size,
            relay_local: 0.0,
            relay_migrated: r,
            direct_local: d,
            direct_migrated: d,
        };
        let pts = [
            p(1, 2.0, 1.0),
            p(2, 1.0, 2.0),
            p(3, 3.0, 2.0),
            p(4, 1.0, 2.0),
            p(5, 1.0, 3.0),
        ];
        assert_eq!(crossover(&pts), Some(4));
        assert_eq!(crossover(&pts[..3]), None);
    }

    #[test]
    fn limit_report_passes_with_defaults() {
        let r = limit_test(&RunOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.summary());
    }

    #[test]
    fn ring_center_load() {
        let r = ring_load(4, 1000, &RunOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.summary());
        assert_eq!(r.stats["relay_center_relayed_bytes"], 12_000.0);
        assert_eq!(r.stats["direct_cold_center_relayed_frames"], 12.0);
    }

    #[test]
    fn imbalance_report_passes() {
        let r = imbalance_test(&RunOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.summary());
        assert_eq!(r.stats["max_load_after"], 1.0);
    }

    #[test]
    fn small_gossip_study() {
        let study = GossipStudy {
            nodes: 8,
            trials: 20,
            ..GossipStudy::default()
        };
        let r = gossip_stats(&study, &RunOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.summary());
        assert_eq!(r.stats["converged_fraction"], 1.0);
    }
}
