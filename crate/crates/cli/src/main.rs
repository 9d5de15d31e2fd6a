use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use migratenet::bench::{self, GossipStudy, Placement, Report, RunOptions, Scenario};
use migratenet::gossip::GossipConfig;
use migratenet::par::Exec;
use migratenet::simcore::DefaultsFile;
use migratenet::Error;

/// Exit status when every check passed.
const EXIT_OK: u8 = 0;
/// Exit status when a report check (or calibration target) failed.
const EXIT_ASSERTION: u8 = 1;
/// Exit status for bad arguments, unreadable or invalid input files.
const EXIT_USAGE: u8 = 2;

/// Simulate direct communication between migrated processes and compare it
/// with relaying through home nodes.
///
/// Every subcommand writes `<name>.summary.txt`, `<name>.latency.csv` and,
/// where relevant, metrics, gossip and trace CSV files into the output
/// directory. Exit status: 0 when all checks pass, 1 when a check fails,
/// 2 on usage or configuration errors.
#[derive(Debug, Parser)]
#[command(name = "migratenet", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Random seed. Falls back to MIGRATENET_SEED, then to the scenario's own
    /// seed (`run`) or 0 (built-in experiments).
    #[arg(long, global = true, env = "MIGRATENET_SEED")]
    seed: Option<u64>,
    /// Directory for report files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Also write the frame/event trace as CSV.
    #[arg(long, global = true)]
    trace: bool,
    /// Model defaults file (JSON, as written by `calibrate`). Defaults to the
    /// built-in calibrated values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run data-parallel work on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        /// Scenario JSON file.
        scenario: PathBuf,
    },
    /// Latency against message size for relay and direct transfer.
    Sweep {
        /// Comma-separated message sizes in bytes. Default: powers of two
        /// from 1 KiB to 64 MiB.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<u64>,
    },
    /// Largest deliverable message per transport.
    Limit,
    /// Center-node load when center-homed processes talk from the outer ring.
    Ring {
        /// Number of processes (one per outer node).
        #[arg(long, default_value_t = 8)]
        k: u32,
        /// Bytes per message.
        #[arg(long, default_value_t = 65536)]
        size: u64,
    },
    /// Load balancing on a skewed six-node cluster.
    Imbalance,
    /// Monte-Carlo dissemination statistics for the gossip layer.
    GossipStats {
        #[arg(long, default_value_t = 32)]
        nodes: u32,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Probability that a whole exchange is lost.
        #[arg(long, default_value_t = 0.0)]
        drop: f64,
        /// Maximum entries per digest.
        #[arg(long, default_value_t = migratenet::gossip::DEFAULT_DIGEST_BOUND)]
        bound: usize,
        /// Rounds after which a trial is counted as not converged.
        #[arg(long, default_value_t = 150)]
        max_rounds: usize,
        /// Rounds within which a trial is counted as fast.
        #[arg(long, default_value_t = 15)]
        target_rounds: usize,
        /// Required fraction of fast trials.
        #[arg(long, default_value_t = 0.95)]
        require_fast: f64,
    },
    /// Fit the latency model to the target averages and write
    /// `defaults.json` into the output directory.
    Calibrate {
        /// Comma-separated sweep sizes. Default: as for `sweep`.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            report_error(&e);
            ExitCode::from(match e {
                Error::NoSolution(_) => EXIT_ASSERTION,
                _ => EXIT_USAGE,
            })
        }
    }
}

fn report_error(e: &Error) {
    match e {
        Error::InvalidScenario(fields) => {
            eprintln!("error[{}]: invalid input", e.code());
            for f in fields {
                eprintln!("  {}: {}", f.field, f.message);
            }
        }
        _ => eprintln!("error[{}]: {e}", e.code()),
    }
}

fn load_options(common: &Common) -> Result<RunOptions, Error> {
    let defaults = match &common.config {
        Some(path) => {
            let text = read(path)?;
            DefaultsFile::from_json(&text).map_err(|e| in_file(path, e))?
        }
        None => DefaultsFile::shipped(),
    };
    Ok(RunOptions {
        config: defaults.sim_config(),
        seed: common.seed,
        trace: common.trace,
        exec: if common.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        },
    })
}

fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::InvalidScenario(vec![migratenet::FieldError::new(
            path.display().to_string(),
            e.to_string(),
        )])
    })
}

/// Prefixes field diagnostics with the file they came from.
fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::InvalidScenario(fields) => Error::InvalidScenario(
            fields
                .into_iter()
                .map(|f| {
                    migratenet::FieldError::new(
                        format!("{}: {}", path.display(), f.field),
                        f.message,
                    )
                })
                .collect(),
        ),
        Error::Json(j) => Error::InvalidScenario(vec![migratenet::FieldError::new(
            path.display().to_string(),
            j.to_string(),
        )]),
        other => other,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    let opts = load_options(&cli.common)?;
    let with_seed = |opts: &RunOptions| RunOptions {
        seed: Some(opts.seed.unwrap_or(0)),
        ..opts.clone()
    };
    let report = match cli.command {
        Command::Run { scenario } => {
            let text = read(&scenario)?;
            let s = Scenario::from_json(&text).map_err(|e| in_file(&scenario, e))?;
            s.validate().map_err(|e| in_file(&scenario, e))?;
            bench::run_scenario(&s, &opts)?
        }
        Command::Sweep { sizes } => {
            let sizes = if sizes.is_empty() {
                bench::default_sweep_sizes()
            } else {
                sizes
            };
            bench::latency_sweep(
                &sizes,
                &[Placement::Local, Placement::Migrated],
                &with_seed(&opts),
            )?
        }
        Command::Limit => bench::limit_test(&with_seed(&opts))?,
        Command::Ring { k, size } => bench::ring_load(k, size, &with_seed(&opts))?,
        Command::Imbalance => bench::imbalance_test(&with_seed(&opts))?,
        Command::GossipStats {
            nodes,
            trials,
            drop,
            bound,
            max_rounds,
            target_rounds,
            require_fast,
        } => {
            if !(0.0..=1.0).contains(&drop) || bound == 0 || !(0.0..=1.0).contains(&require_fast) {
                return Err(Error::InvalidScenario(vec![migratenet::FieldError::new(
                    "gossip-stats",
                    "--drop and --require-fast must lie in [0, 1] and --bound must be at least 1",
                )]));
            }
            let study = GossipStudy {
                nodes,
                trials,
                config: GossipConfig {
                    bound,
                    drop_probability: drop,
                    ..GossipConfig::default()
                },
                max_rounds,
                target_rounds,
            };
            let mut r = bench::gossip_stats(&study, &with_seed(&opts))?;
            let key = format!("within_{target_rounds}_rounds_fraction");
            let fast = r.stats[&key];
            r.check(
                "fast_dissemination",
                fast >= require_fast,
                format!("{fast} of trials within {target_rounds} rounds, need {require_fast}"),
            );
            r
        }
        Command::Calibrate { sizes } => {
            let sizes = if sizes.is_empty() {
                bench::default_sweep_sizes()
            } else {
                sizes
            };
            return calibrate(&sizes, &with_seed(&opts), &cli.common.out);
        }
    };
    finish(&report, &cli.common.out)
}

fn finish(report: &Report, out: &Path) -> Result<u8, Error> {
    report.write_to(out)?;
    print!("{}", report.summary());
    Ok(if report.passed() {
        EXIT_OK
    } else {
        EXIT_ASSERTION
    })
}

fn calibrate(sizes: &[u64], opts: &RunOptions, out: &Path) -> Result<u8, Error> {
    let cal = bench::calibrate(sizes, opts)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("defaults.json");
    let tmp = out.join("defaults.json.tmp");
    std::fs::write(&tmp, cal.defaults.to_json())?;
    std::fs::rename(&tmp, &path)?;
    println!("wrote {}", path.display());
    println!("delta_dicom = {:e} s", cal.defaults.model.delta_dicom);
    println!(
        "mean slowdown = {:.4} (target {} ± {})",
        cal.slowdown,
        bench::TARGET_SLOWDOWN,
        bench::TOLERANCE
    );
    println!(
        "mean improvement = {:.4} (target {} ± {})",
        cal.improvement,
        bench::TARGET_IMPROVEMENT,
        bench::TOLERANCE
    );
    println!("status: {}", cal.status.as_str());
    cal.into_result()?;
    Ok(EXIT_OK)
}
