//! Scenario files: a cluster, a migration schedule and a traffic program,
//! run as one deterministic simulation.

use serde::{Deserialize, Serialize};

use super::report::{LatencyRow, Report};
use super::RunOptions;
use crate::cluster::{ClusterState, GPid, JobId, NodeId, Topology};
use crate::error::{Error, FieldError, Result};
use crate::gossip::GossipConfig;
use crate::simcore::{SimConfig, Simulation, TransportKind};
use crate::transport::{MsgId, Outcome, Payload};

pub const SCENARIO_VERSION: u32 = 1;

/// Rounds allowed when a scenario asks for converged bulletins up front.
const CONVERGE_BUDGET: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub topology: Topology,
    #[serde(default)]
    pub processes: Vec<ProcessSpec>,
    #[serde(default)]
    pub migrations: Vec<MigrationSpec>,
    #[serde(default)]
    pub traffic: Vec<SendSpec>,
    #[serde(default)]
    pub gossip: GossipConfig,
    /// Skip gossiping to convergence before the clock starts.
    #[serde(default)]
    pub cold_start: bool,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub home: u32,
    /// Where the process runs at time zero; defaults to its home.
    #[serde(default)]
    pub node: Option<u32>,
    #[serde(default)]
    pub job: u32,
    #[serde(default = "one")]
    pub work: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MigrationSpec {
    pub time: f64,
    /// Index into `processes`.
    pub process: usize,
    pub node: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SendSpec {
    pub time: f64,
    pub transport: TransportKind,
    pub src: usize,
    pub dst: usize,
    pub sizes: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub alpha_net: Option<f64>,
    pub beta_net: Option<f64>,
    pub alpha_sm: Option<f64>,
    pub beta_sm: Option<f64>,
    pub delta_dicom: Option<f64>,
    pub relay_cap: Option<u64>,
    pub direct_cap: Option<u64>,
    pub control_frame_bytes: Option<u64>,
}

impl ModelOverrides {
    pub fn apply(&self, base: &SimConfig) -> SimConfig {
        let mut c = base.clone();
        let m = &mut c.model;
        m.alpha_net = self.alpha_net.unwrap_or(m.alpha_net);
        m.beta_net = self.beta_net.unwrap_or(m.beta_net);
        m.alpha_sm = self.alpha_sm.unwrap_or(m.alpha_sm);
        m.beta_sm = self.beta_sm.unwrap_or(m.beta_sm);
        m.delta_dicom = self.delta_dicom.unwrap_or(m.delta_dicom);
        c.caps.relay = self.relay_cap.unwrap_or(c.caps.relay);
        c.caps.direct = self.direct_cap.unwrap_or(c.caps.direct);
        c.control_frame_bytes = self.control_frame_bytes.unwrap_or(c.control_frame_bytes);
        c
    }
}

/// Scenario-local checks, evaluated after the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    AllDelivered,
    Conserved,
    RelayedBytes { node: u32, equals: u64 },
    MaxLatency { seconds: f64 },
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| {
            Error::InvalidScenario(vec![FieldError::new(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )])
        })?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    /// Every problem with the scenario, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut bad = |field: String, msg: String| errs.push(FieldError::new(field, msg));
        if self.version != SCENARIO_VERSION {
            bad(
                "version".into(),
                format!("expected {SCENARIO_VERSION}, found {}", self.version),
            );
        }
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            bad(
                "name".into(),
                "must be non-empty and use only letters, digits, '-' and '_'".into(),
            );
        }
        if let Err(e) = self.topology.validate() {
            bad("topology".into(), e.to_string());
        }
        let n = self.topology.node_count() as u32;
        let procs = self.processes.len();
        for (i, p) in self.processes.iter().enumerate() {
            if p.home >= n {
                bad(
                    format!("processes[{i}].home"),
                    format!("node {} outside 0..{n}", p.home),
                );
            }
            if let Some(node) = p.node.filter(|&x| x >= n) {
                bad(
                    format!("processes[{i}].node"),
                    format!("node {node} outside 0..{n}"),
                );
            }
            if !(p.work > 0.0 && p.work.is_finite()) {
                bad(format!("processes[{i}].work"), "must be positive".into());
            }
        }
        let mut last = 0.0;
        for (i, m) in self.migrations.iter().enumerate() {
            if !(m.time >= 0.0 && m.time.is_finite()) {
                bad(
                    format!("migrations[{i}].time"),
                    "must be a finite time ≥ 0".into(),
                );
            } else if m.time < last {
                bad(
                    format!("migrations[{i}].time"),
                    format!("{} is earlier than the previous entry ({last})", m.time),
                );
            } else {
                last = m.time;
            }
            if m.process >= procs {
                bad(
                    format!("migrations[{i}].process"),
                    format!("no process {} (scenario has {procs})", m.process),
                );
            }
            if m.node >= n {
                bad(
                    format!("migrations[{i}].node"),
                    format!("node {} outside 0..{n}", m.node),
                );
            }
        }
        let mut last = 0.0;
        for (i, t) in self.traffic.iter().enumerate() {
            if !(t.time >= 0.0 && t.time.is_finite()) {
                bad(
                    format!("traffic[{i}].time"),
                    "must be a finite time ≥ 0".into(),
                );
            } else if t.time < last {
                bad(
                    format!("traffic[{i}].time"),
                    format!("{} is earlier than the previous entry ({last})", t.time),
                );
            } else {
                last = t.time;
            }
            for (field, idx) in [("src", t.src), ("dst", t.dst)] {
                if idx >= procs {
                    bad(
                        format!("traffic[{i}].{field}"),
                        format!("no process {idx} (scenario has {procs})"),
                    );
                }
            }
            if t.sizes.is_empty() {
                bad(
                    format!("traffic[{i}].sizes"),
                    "must list at least one size".into(),
                );
            }
        }
        let q = self.gossip.drop_probability;
        if !(0.0..=1.0).contains(&q) {
            bad(
                "gossip.drop_probability".into(),
                format!("{q} outside [0, 1]"),
            );
        }
        if self.gossip.bound == 0 {
            bad("gossip.bound".into(), "must be at least 1".into());
        }
        let rps = self.gossip.rounds_per_second;
        if !(rps >= 0.0 && rps.is_finite()) {
            bad(
                "gossip.rounds_per_second".into(),
                "must be finite and ≥ 0".into(),
            );
        }
        let model = self.model.apply(&SimConfig::default()).model;
        if let Err(m) = model.validate() {
            bad("model".into(), m);
        }
        for (i, a) in self.assertions.iter().enumerate() {
            if let Assertion::RelayedBytes { node, .. } = a {
                if *node >= n {
                    bad(
                        format!("assertions[{i}].node"),
                        format!("node {node} outside 0..{n}"),
                    );
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidScenario(errs))
        }
    }
}

/// Runs `s` and evaluates its assertions.
pub fn run_scenario(s: &Scenario, opts: &RunOptions) -> Result<Report> {
    s.validate()?;
    let seed = opts.seed.unwrap_or(s.seed);
    let mut config = s.model.apply(&opts.config);
    config.gossip = s.gossip;
    let mut cluster = ClusterState::new(s.topology.clone())?;
    let mut pids: Vec<GPid> = Vec::with_capacity(s.processes.len());
    for p in &s.processes {
        let pid = cluster.spawn(NodeId(p.home), JobId(p.job), p.work)?;
        if let Some(node) = p.node {
            cluster.migrate(pid, NodeId(node))?;
        }
        pids.push(pid);
    }
    let mut sim = Simulation::new(cluster, config, seed);
    if opts.trace {
        sim.enable_trace();
    }
    let mut report = Report::new(&s.name, seed);
    if !s.cold_start {
        let rounds = sim.converge(CONVERGE_BUDGET);
        report.stat("warmup_rounds", rounds.map_or(f64::NAN, |r| r as f64));
    }

    for m in &s.migrations {
        sim.schedule_migration(m.time, pids[m.process], NodeId(m.node))?;
    }
    let horizon = s
        .traffic
        .iter()
        .map(|t| t.time)
        .chain(s.migrations.iter().map(|m| m.time))
        .fold(0.0, f64::max);
    if s.gossip.rounds_per_second > 0.0 {
        let rps = s.gossip.rounds_per_second;
        let rounds = (horizon * rps + 1e-9).floor() as u64;
        for k in 1..=rounds {
            sim.schedule_gossip(k as f64 / rps)?;
        }
    }

    let mut sent: Vec<(MsgId, TransportKind)> = Vec::new();
    let mut refused = 0usize;
    for t in &s.traffic {
        sim.run_until(t.time);
        for &size in &t.sizes {
            match sim.submit(t.transport, pids[t.src], pids[t.dst], size, Payload::Opaque) {
                Ok(id) => sent.push((id, t.transport)),
                Err(Error::MsgTooLarge { .. }) => refused += 1,
                Err(e) => return Err(e),
            }
        }
    }
    sim.run_to_idle();

    let mut failed = 0usize;
    let mut worst: f64 = 0.0;
    for (id, requested) in sent {
        let r = sim
            .report(id)
            .cloned()
            .unwrap_or_else(|| sim.run_until_complete(id));
        match r.outcome {
            Outcome::Delivered => {
                worst = worst.max(r.latency);
                let series = if requested == TransportKind::Auto {
                    format!("auto_{}", r.transport.as_str())
                } else {
                    r.transport.as_str().to_string()
                };
                report.latency.push(LatencyRow {
                    series,
                    size: sim.payload_size(id),
                    latency: r.latency,
                });
            }
            Outcome::Failed(_) => failed += 1,
        }
    }
    let metrics = sim.metrics_snapshot();
    report.stat("messages_refused", refused as f64);
    report.stat("messages_failed", failed as f64);
    report.stat("gossip_rounds", sim.gossip_log().len() as f64);
    report.stat("migrations", sim.migrations().len() as f64);

    report.check(
        "conservation",
        metrics.is_conserved(),
        format!(
            "delivered {} of {} sent bytes",
            metrics.total_delivered_bytes(),
            metrics.sent_bytes_delivered
        ),
    );
    for a in &s.assertions {
        match *a {
            Assertion::AllDelivered => report.check(
                "all_delivered",
                failed == 0 && refused == 0,
                format!("{failed} failed, {refused} refused"),
            ),
            Assertion::Conserved => {}
            Assertion::RelayedBytes { node, equals } => {
                let got = metrics.node(NodeId(node)).relayed_bytes;
                report.check(
                    format!("relayed_bytes_n{node}"),
                    got == equals,
                    format!("{got} relayed, expected {equals}"),
                );
            }
            Assertion::MaxLatency { seconds } => report.check(
                "max_latency",
                worst <= seconds,
                format!("worst {worst:e} s, bound {seconds:e} s"),
            ),
        }
    }
    if opts.trace {
        report.trace = Some(sim.trace().to_vec());
    }
    report.metrics.push((String::new(), metrics));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Scenario {
        Scenario {
            version: SCENARIO_VERSION,
            name: "t".into(),
            seed: 5,
            topology: Topology::Mesh { nodes: 4 },
            processes: vec![
                ProcessSpec {
                    home: 0,
                    node: Some(2),
                    job: 0,
                    work: 1.0,
                },
                ProcessSpec {
                    home: 1,
                    node: Some(3),
                    job: 0,
                    work: 1.0,
                },
            ],
            migrations: vec![],
            traffic: vec![],
            gossip: GossipConfig::default(),
            cold_start: false,
            model: ModelOverrides::default(),
            assertions: vec![Assertion::AllDelivered],
        }
    }

    #[test]
    fn empty_traffic_gives_empty_table() {
        let r = run_scenario(&base(), &RunOptions::default()).unwrap();
        assert!(r.latency.is_empty());
        let m = &r.metrics[0].1;
        assert_eq!(m.messages_delivered, 0);
        assert_eq!(m.total_relayed_bytes(), 0);
        assert!(r.checks.iter().all(|c| c.passed));
    }

    #[test]
    fn invalid_pid_in_schedule_is_reported_per_field() {
        let mut s = base();
        s.migrations.push(MigrationSpec {
            time: 0.0,
            process: 7,
            node: 9,
        });
        s.traffic.push(SendSpec {
            time: 0.0,
            transport: TransportKind::Relay,
            src: 0,
            dst: 4,
            sizes: vec![],
        });
        let Err(Error::InvalidScenario(errs)) = s.validate() else {
            panic!("expected diagnostics");
        };
        let fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(
            fields,
            [
                "migrations[0].process",
                "migrations[0].node",
                "traffic[0].dst",
                "traffic[0].sizes"
            ]
        );
    }

    #[test]
    fn decreasing_times_are_rejected() {
        let mut s = base();
        for t in [0.5, 0.1] {
            s.migrations.push(MigrationSpec {
                time: t,
                process: 0,
                node: 1,
            });
        }
        assert!(matches!(s.validate(), Err(Error::InvalidScenario(_))));
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let s = base();
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
        let bad = s.to_json().replacen("\"seed\"", "\"sede\"", 1);
        assert!(matches!(
            Scenario::from_json(&bad),
            Err(Error::InvalidScenario(_))
        ));
    }

    #[test]
    fn traffic_and_migration_run_to_completion() {
        let mut s = base();
        s.traffic = vec![
            SendSpec {
                time: 0.0,
                transport: TransportKind::Direct,
                src: 0,
                dst: 1,
                sizes: vec![1024, 4096],
            },
            SendSpec {
                time: 0.01,
                transport: TransportKind::Relay,
                src: 1,
                dst: 0,
                sizes: vec![512],
            },
        ];
        s.migrations.push(MigrationSpec {
            time: 0.005,
            process: 1,
            node: 0,
        });
        let r = run_scenario(&s, &RunOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.summary());
        assert_eq!(r.latency.len(), 3);
        assert_eq!(r.stats["migrations"], 1.0);
    }

    #[test]
    fn same_seed_same_report() {
        let mut s = base();
        s.gossip.rounds_per_second = 1000.0;
        s.cold_start = true;
        s.traffic.push(SendSpec {
            time: 0.02,
            transport: TransportKind::Auto,
            src: 0,
            dst: 1,
            sizes: vec![1, 1 << 20],
        });
        let opts = RunOptions {
            trace: true,
            ..RunOptions::default()
        };
        let a = run_scenario(&s, &opts).unwrap();
        let b = run_scenario(&s, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.stats["gossip_rounds"], 20.0);
    }
}
