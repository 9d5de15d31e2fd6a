//! Greedy sender-initiated load balancing over gossiped load views, and the
//! synchronous-phase job model used to measure its effect.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterState, GPid, JobId, MigrationEvent, NodeId};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancePolicy {
    /// Minimum gap between own load and the least loaded known node.
    pub threshold: f64,
    pub max_moves: usize,
}

impl Default for BalancePolicy {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            max_moves: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub id: JobId,
    /// Members and their work per phase.
    pub members: Vec<(GPid, f64)>,
    pub phases: u32,
}

impl JobSpec {
    /// All processes of `job` in `state`, with their recorded work.
    pub fn from_cluster(state: &ClusterState, job: JobId, phases: u32) -> Self {
        Self {
            id: job,
            members: state
                .processes()
                .filter(|p| p.job == job)
                .map(|p| (p.pid, p.work))
                .collect(),
            phases,
        }
    }
}

/// One balancing pass. Nodes act in index order; each may move its
/// smallest process to the least loaded node its own bulletin knows of.
///
/// The receiving node admits a process only if its true load afterwards is
/// still below the sender's load before the move, so stale views can make a
/// move useless but never raise the maximum load.
pub fn balance_step(state: &mut ClusterState, policy: &BalancePolicy) -> Vec<MigrationEvent> {
    let mut moves = Vec::new();
    let nodes: Vec<NodeId> = state.nodes().collect();
    for node in nodes {
        if moves.len() >= policy.max_moves {
            break;
        }
        let own = state.node_load(node).expect("node from cluster");
        let Some((pid, work)) = smallest_process(state, node) else {
            continue;
        };
        let mut candidates: Vec<(f64, NodeId)> = state
            .bulletin(node)
            .load_view()
            .into_iter()
            .filter(|&(n, (load, _))| n != node && own - load > policy.threshold)
            .map(|(n, (load, _))| (load, n))
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, target) in candidates {
            let target_load = state.node_load(target).expect("node from view");
            if target_load + work < own {
                if let Ok(Some(ev)) = state.migrate(pid, target) {
                    moves.push(ev);
                }
                break;
            }
        }
    }
    moves
}

fn smallest_process(state: &ClusterState, node: NodeId) -> Option<(GPid, f64)> {
    state
        .resident(node)
        .iter()
        .map(|&pid| (pid, state.process(pid).expect("resident").work))
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(a.0.seq().cmp(&b.0.seq()))
                .then(a.0.home().cmp(&b.0.home()))
        })
}

/// Sum over phases of the slowest member, where a member's phase time is its
/// work times the number of processes sharing its node.
pub fn job_makespan(state: &ClusterState, job: &JobSpec) -> Result<f64> {
    let mut slowest: f64 = 0.0;
    for &(pid, work) in &job.members {
        let node = state.process(pid)?.current;
        let sharing = state.resident(node).len() as f64;
        slowest = slowest.max(work * sharing);
    }
    Ok(slowest * job.phases as f64)
}

pub fn max_load(state: &ClusterState) -> f64 {
    state
        .nodes()
        .map(|n| state.node_load(n).expect("node from cluster"))
        .fold(0.0, f64::max)
}

pub fn min_load(state: &ClusterState) -> f64 {
    state
        .nodes()
        .map(|n| state.node_load(n).expect("node from cluster"))
        .fold(f64::INFINITY, f64::min)
}

/// Exhaustive search for the smallest achievable maximum node load when
/// `works` are placed on `nodes` nodes.
pub fn optimal_max_load(works: &[f64], nodes: usize, exec: Exec) -> f64 {
    let assignments = enumerate(works.len(), nodes, exec, |assignment| {
        let mut loads = vec![0.0; nodes];
        for (w, &n) in works.iter().zip(assignment) {
            loads[n] += w;
        }
        loads.into_iter().fold(0.0, f64::max)
    });
    assignments.into_iter().fold(f64::INFINITY, f64::min)
}

/// Exhaustive search for the placement minimizing the largest job makespan.
/// `procs` lists (job, work per phase); `phases` maps each job to its phase
/// count.
pub fn optimal_makespan(
    procs: &[(JobId, f64)],
    phases: &BTreeMap<JobId, u32>,
    nodes: usize,
    exec: Exec,
) -> f64 {
    let values = enumerate(procs.len(), nodes, exec, |assignment| {
        let mut sharing = vec![0usize; nodes];
        for &n in assignment {
            sharing[n] += 1;
        }
        let mut per_job: BTreeMap<JobId, f64> = BTreeMap::new();
        for (&(job, work), &n) in procs.iter().zip(assignment) {
            let t = work * sharing[n] as f64;
            let e = per_job.entry(job).or_insert(0.0);
            *e = e.max(t);
        }
        per_job
            .into_iter()
            .map(|(job, t)| t * phases.get(&job).copied().unwrap_or(1) as f64)
            .fold(0.0, f64::max)
    });
    values.into_iter().fold(f64::INFINITY, f64::min)
}

/// Evaluates `score` on every assignment of `items` to `nodes`, returning the
/// best score per first-item choice (the unit of parallel work).
fn enumerate<F>(items: usize, nodes: usize, exec: Exec, score: F) -> Vec<f64>
where
    F: Fn(&[usize]) -> f64 + Sync + Send,
{
    if items == 0 || nodes == 0 {
        return vec![score(&[])];
    }
    par::map_range(exec, nodes, |first| {
        let mut assignment = vec![0usize; items];
        assignment[0] = first;
        let mut best = f64::INFINITY;
        loop {
            best = best.min(score(&assignment));
            // Odometer over positions 1..items.
            let mut i = 1;
            while i < items {
                assignment[i] += 1;
                if assignment[i] < nodes {
                    break;
                }
                assignment[i] = 0;
                i += 1;
            }
            if i == items {
                break;
            }
        }
        best
    })
}

/// Checks that every job member exists.
pub fn validate_job(state: &ClusterState, job: &JobSpec) -> Result<()> {
    for &(pid, work) in &job.members {
        state.process(pid)?;
        if work.is_nan() || work <= 0.0 {
            return Err(Error::InvalidScenario(vec![crate::FieldError::new(
                format!("job {}.members", job.id.0),
                format!("work of {pid} must be positive"),
            )]));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gossip::{converge, GossipConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Nodes 0 and 1 carry two processes each, 2 and 3 one, 4 and 5 none.
    /// Job A and job B each have a member on node 0 and on node 1.
    fn imbalanced() -> ClusterState {
        let mut c = ClusterState::mesh(6).unwrap();
        for (node, job) in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (3, 1)] {
            c.spawn(NodeId(node), JobId(job), 1.0).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        converge(&mut c, &GossipConfig::default(), &mut rng, 100).unwrap();
        c
    }

    #[test]
    fn balanced_cluster_is_a_fixpoint() {
        let mut c = ClusterState::mesh(3).unwrap();
        for n in 0..3 {
            c.spawn(NodeId(n), JobId(0), 1.0).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        converge(&mut c, &GossipConfig::default(), &mut rng, 100).unwrap();
        assert!(balance_step(&mut c, &BalancePolicy::default()).is_empty());
    }

    #[test]
    fn imbalance_moves_to_empty_nodes() {
        let mut c = imbalanced();
        assert_eq!(max_load(&c), 2.0);
        let moves = balance_step(&mut c, &BalancePolicy::default());
        let pairs: Vec<_> = moves.iter().map(|m| (m.from, m.to)).collect();
        assert_eq!(pairs, [(NodeId(0), NodeId(4)), (NodeId(1), NodeId(5))]);
        assert_eq!(max_load(&c), 1.0);
    }

    #[test]
    fn max_moves_caps_the_step() {
        let mut c = imbalanced();
        let policy = BalancePolicy {
            threshold: 0.0,
            max_moves: 1,
        };
        assert_eq!(balance_step(&mut c, &policy).len(), 1);
    }

    #[test]
    fn makespan_examples() {
        let mut c = ClusterState::mesh(4).unwrap();
        let p = c.spawn(NodeId(0), JobId(0), 1.0).unwrap();
        let job = JobSpec {
            id: JobId(0),
            members: vec![(p, 1.0)],
            phases: 1,
        };
        assert_eq!(job_makespan(&c, &job).unwrap(), 1.0);

        let mut packed = ClusterState::mesh(4).unwrap();
        let mut spread = ClusterState::mesh(4).unwrap();
        let mut pj = Vec::new();
        let mut sj = Vec::new();
        for i in 0..4 {
            pj.push((packed.spawn(NodeId(i / 2), JobId(0), 1.0).unwrap(), 1.0));
            sj.push((spread.spawn(NodeId(i), JobId(0), 1.0).unwrap(), 1.0));
        }
        let job = |members| JobSpec {
            id: JobId(0),
            members,
            phases: 1,
        };
        assert_eq!(job_makespan(&packed, &job(pj)).unwrap(), 2.0);
        assert_eq!(job_makespan(&spread, &job(sj)).unwrap(), 1.0);
    }

    #[test]
    fn balancing_shrinks_makespan() {
        let mut c = imbalanced();
        let a = JobSpec::from_cluster(&c, JobId(0), 1);
        let before = job_makespan(&c, &a).unwrap();
        balance_step(&mut c, &BalancePolicy::default());
        let after = job_makespan(&c, &a).unwrap();
        assert!(after < before, "{after} < {before}");
    }

    #[test]
    fn missing_member_is_an_error() {
        let c = ClusterState::mesh(2).unwrap();
        let job = JobSpec {
            id: JobId(0),
            members: vec![(GPid::new(NodeId(0), 3), 1.0)],
            phases: 1,
        };
        assert!(matches!(
            job_makespan(&c, &job),
            Err(Error::NoSuchProcess(_))
        ));
    }

    #[test]
    fn brute_force_small_cases() {
        assert_eq!(
            optimal_max_load(&[1.0, 1.0, 1.0, 1.0], 4, Exec::Sequential),
            1.0
        );
        assert_eq!(
            optimal_max_load(&[3.0, 1.0, 1.0, 1.0], 2, Exec::Parallel),
            3.0
        );
        let procs = [(JobId(0), 1.0); 4];
        let phases = BTreeMap::from([(JobId(0), 1)]);
        assert_eq!(optimal_makespan(&procs, &phases, 4, Exec::Parallel), 1.0);
        assert_eq!(optimal_makespan(&procs, &phases, 2, Exec::Sequential), 2.0);
    }
}
