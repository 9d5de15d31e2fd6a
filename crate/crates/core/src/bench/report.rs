use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::simcore::{Metrics, TraceRecord};

/// One point of a latency curve.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub series: String,
    pub size: u64,
    pub latency: f64,
}

/// Per-round gossip record.
#[derive(Debug, Clone, PartialEq)]
pub struct GossipRow {
    pub trial: usize,
    pub round: usize,
    pub frames: usize,
    pub entries_moved: usize,
    pub dropped: usize,
    pub max_digest: usize,
    /// Bulletin facts that already match ground truth after this round.
    pub informed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub latency: Vec<LatencyRow>,
    /// Metrics snapshots, labelled by phase when a report covers several
    /// simulations.
    pub metrics: Vec<(String, Metrics)>,
    pub gossip: Vec<GossipRow>,
    /// Scalar results, printed in the summary in key order.
    pub stats: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub trace: Option<Vec<TraceRecord>>,
}

impl Report {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        Self {
            name: name.into(),
            seed,
            ..Self::default()
        }
    }

    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn stat(&mut self, key: impl Into<String>, value: f64) {
        self.stats.insert(key.into(), value);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Rows of one latency series, in insertion order.
    pub fn series(&self, name: &str) -> Vec<&LatencyRow> {
        self.latency.iter().filter(|r| r.series == name).collect()
    }

    pub fn latency_csv(&self) -> String {
        let mut out = String::from("size,latency,series\n");
        for r in &self.latency {
            let _ = writeln!(out, "{},{:e},{}", r.size, r.latency, r.series);
        }
        out
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(Metrics::CSV_HEADER);
        out.push('\n');
        for (label, m) in &self.metrics {
            let scenario = if label.is_empty() {
                self.name.clone()
            } else {
                format!("{}/{label}", self.name)
            };
            for line in m.to_csv(&scenario, self.seed).lines().skip(1) {
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }

    pub fn gossip_csv(&self) -> String {
        let mut out =
            String::from("trial,round,frames,entries_moved,dropped,max_digest,informed\n");
        for g in &self.gossip {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                g.trial, g.round, g.frames, g.entries_moved, g.dropped, g.max_digest, g.informed
            );
        }
        out
    }

    pub fn trace_csv(&self) -> Option<String> {
        let trace = self.trace.as_ref()?;
        let mut out = String::from(TraceRecord::CSV_HEADER);
        out.push('\n');
        for t in trace {
            out.push_str(&t.csv_row());
            out.push('\n');
        }
        Some(out)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario: {}", self.name);
        let _ = writeln!(out, "seed: {}", self.seed);
        if !self.stats.is_empty() {
            let _ = writeln!(out, "\nresults:");
            for (k, v) in &self.stats {
                let _ = writeln!(out, "  {k} = {v}");
            }
        }
        for (label, m) in &self.metrics {
            let tag = if label.is_empty() {
                String::new()
            } else {
                format!(" [{label}]")
            };
            let _ = writeln!(out, "\nmessages delivered{tag}: {}", m.messages_delivered);
            let _ = writeln!(out, "relayed bytes{tag}: {}", m.total_relayed_bytes());
        }
        let _ = writeln!(out, "\nchecks:");
        if self.checks.is_empty() {
            let _ = writeln!(out, "  (none)");
        }
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "  [{mark}] {}: {}", c.name, c.detail);
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "\nverdict: {verdict}");
        out
    }

    /// Writes the report files into `dir`, each through a temporary file and
    /// a rename. Returns the paths written.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut files = vec![
            ("latency.csv", self.latency_csv()),
            ("summary.txt", self.summary()),
        ];
        if !self.metrics.is_empty() {
            files.push(("metrics.csv", self.metrics_csv()));
        }
        if !self.gossip.is_empty() {
            files.push(("gossip.csv", self.gossip_csv()));
        }
        if let Some(trace) = self.trace_csv() {
            files.push(("trace.csv", trace));
        }
        let mut written = Vec::new();
        for (suffix, body) in files {
            let path = dir.join(format!("{}.{suffix}", self.name));
            write_atomic(&path, body.as_bytes())?;
            written.push(path);
        }
        Ok(written)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_follows_checks() {
        let mut r = Report::new("x", 1);
        assert!(r.passed());
        r.check("a", true, "");
        assert!(r.passed());
        r.check("b", false, "bad");
        assert!(!r.passed());
        assert_eq!(r.failed_checks().count(), 1);
        assert!(r.summary().contains("[FAIL] b: bad"));
    }

    #[test]
    fn files_land_in_the_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Report::new("demo", 3);
        r.latency.push(LatencyRow {
            series: "relay_local".into(),
            size: 1024,
            latency: 1e-4,
        });
        let paths = r.write_to(dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let csv = fs::read_to_string(dir.path().join("demo.latency.csv")).unwrap();
        assert_eq!(csv, "size,latency,series\n1024,1e-4,relay_local\n");
        assert!(!dir.path().join("demo.latency.csv.tmp").exists());
    }
}
