//! Command-line front end: seeded experiment runs, the two outer searches,
//! benchmark controllers, and scenario inspection.

use beamtrack::harness::{
    run_experiment, Controller, ExperimentConfig, HarnessError, LinkSetup,
};
use beamtrack::optimize::{
    max_tolerable_radius, optimize_threshold, probes_to_csv, Evaluator, OptimizeError, Probe,
    ThresholdPolicy,
};
use beamtrack::scenario::{self, Scenario};
use beamtrack::skeleton::SkeletonDatabase;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "beamtrack",
    version,
    about = "Location-aided mmWave beam tracking simulator"
)]
struct Cli {
    /// Worker threads for trial execution (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    PerGrid,
    FixedDistance,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured controller over every error radius and write CSVs.
    Run {
        /// Experiment TOML; omitted fields take defaults and a missing file
        /// entry means the built-in map.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed (mandatory; reruns with the same seed are identical).
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Golden-section search for the drift threshold under the query budget.
    TuneTd {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        /// Error radius the tuning runs at.
        #[arg(long, default_value_t = 0.0)]
        radius: f64,
        #[arg(long, default_value_t = 0.0)]
        bracket_lo: f64,
        #[arg(long, default_value_t = 1.0)]
        bracket_hi: f64,
        /// Bracket width to stop at (defaults to 1/50 of the bracket).
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Largest tolerable localization radius over the configured candidates.
    TuneR {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        bracket_lo: f64,
        #[arg(long, default_value_t = 1.0)]
        bracket_hi: f64,
        #[arg(long)]
        tol: Option<f64>,
        /// Fix the threshold instead of retuning it per radius.
        #[arg(long)]
        threshold: Option<f64>,
        /// Tune once at r = 0 and reuse that threshold for every radius.
        #[arg(long)]
        single_tune: bool,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run a benchmark controller (overrides the configured controller).
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        kind: BenchKind,
        /// Refresh spacing for the fixed-distance benchmark, metres.
        #[arg(long, default_value_t = 7.0)]
        distance: f64,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Dump grid centres, per-grid paths, and the skeleton database.
    TraceScenario {
        /// Scenario TOML (omit for the built-in map).
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Obstacle seed; omit for a blocker-free trace.
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict the dump to one grid.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig {
            scenario: None,
            antennas: beamtrack::AntennaPreset::Narrow,
            error_radii_m: vec![0.0, 10.0, 11.0, 12.0],
            controller: Controller::SkeletonTracking {
                distance_threshold: 0.98,
            },
            u_max: 20,
            delta: 0.05,
            rate_threshold_bps: 200.0e6,
            trials: 200,
            seed: None,
            sim: Default::default(),
        }),
    }
}

fn load_scenario(path: &Option<PathBuf>) -> Result<Scenario, HarnessError> {
    match path {
        Some(p) => Ok(scenario::load_scenario(p)?),
        None => Ok(scenario::build_scenario(&scenario::default_map())?),
    }
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

fn classify(err: &AppError) -> u8 {
    match err {
        AppError::Harness(HarnessError::Config(_))
        | AppError::Harness(HarnessError::Scenario(_))
        | AppError::Harness(HarnessError::Parse(_)) => EXIT_CONFIG,
        AppError::Harness(HarnessError::Io(_)) => 1,
        AppError::Optimize(OptimizeError::Invalid(_)) => EXIT_CONFIG,
        AppError::Optimize(OptimizeError::Infeasible { .. }) => EXIT_INFEASIBLE,
    }
}

#[derive(Debug)]
enum AppError {
    Harness(HarnessError),
    Optimize(OptimizeError),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Harness(e) => write!(f, "{e}"),
            AppError::Optimize(e) => write!(f, "{e}"),
        }
    }
}

impl From<HarnessError> for AppError {
    fn from(e: HarnessError) -> Self {
        AppError::Harness(e)
    }
}

impl From<OptimizeError> for AppError {
    fn from(e: OptimizeError) -> Self {
        AppError::Optimize(e)
    }
}

fn prepare(
    config: &Option<PathBuf>,
    trials_override: Option<usize>,
) -> Result<(ExperimentConfig, Scenario, SkeletonDatabase), AppError> {
    let mut cfg = load_config(config)?;
    if let Some(trials) = trials_override {
        cfg.trials = trials;
    }
    cfg.validate()?;
    let scn = cfg.resolve_scenario()?;
    let db = SkeletonDatabase::populate(&scn, cfg.sim.skeleton_size, cfg.sim.trace_max_paths);
    Ok((cfg, scn, db))
}

fn print_probe_table(probes: &[Probe]) {
    for p in probes {
        println!(
            "  T={:<12.4e} objective={:>10.4} Gbps  violation={:.3}  feasible={}",
            p.param,
            p.objective / 1e9,
            p.violation_prob,
            p.feasible
        );
    }
}

fn real_main() -> Result<(), AppError> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }

    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load_config(&config)?;
            let output = run_experiment(&cfg, seed, &out)?;
            println!("wrote {}", out.display());
            for agg in &output.aggregates {
                println!(
                    "r={:>5.1} m  trajectory rate {:.3} Gbps  min grid rate {:.3} Gbps  mean U {:.1}  Pr[U>U_max] {:.3}",
                    agg.error_radius_m,
                    agg.mean_trajectory_rate_bps / 1e9,
                    agg.min_grid_mean_rate_bps / 1e9,
                    agg.mean_query_count,
                    agg.budget_violation_prob
                );
            }
            Ok(())
        }
        Command::TuneTd {
            config,
            seed,
            radius,
            bracket_lo,
            bracket_hi,
            tol,
            out,
        } => {
            let (cfg, scn, db) = prepare(&config, None)?;
            let setup = LinkSetup::new(&scn, cfg.antennas, &cfg.sim);
            let ev = Evaluator::new(
                &scn,
                &db,
                setup,
                cfg.trials,
                seed,
                cfg.sim.resample_obstacles_per_grid,
                cfg.u_max,
            );
            let tol = tol.unwrap_or((bracket_hi - bracket_lo) / 50.0);
            let search =
                optimize_threshold(&ev, radius, cfg.delta, (bracket_lo, bracket_hi), tol)?;
            write_out(&out, "optimizer_trace.csv", &probes_to_csv(&search.probes))?;
            write_out(&out, "grid_scan.csv", &probes_to_csv(&search.grid_probes))?;
            println!(
                "T_D* = {:.6e} (mean trajectory rate {:.3} Gbps, violation {:.3}, {} iterations)",
                search.threshold,
                search.estimate.mean_trajectory_rate_bps / 1e9,
                search.estimate.budget_violation_prob,
                search.iterations
            );
            if search.grid_disagrees {
                eprintln!(
                    "warning: 11-point grid scan argmax disagrees with the golden-section result by more than one cell; the objective may not be unimodal here"
                );
            }
            print_probe_table(&search.grid_probes);
            Ok(())
        }
        Command::TuneR {
            config,
            seed,
            bracket_lo,
            bracket_hi,
            tol,
            threshold,
            single_tune,
            out,
        } => {
            let (cfg, scn, db) = prepare(&config, None)?;
            let setup = LinkSetup::new(&scn, cfg.antennas, &cfg.sim);
            let ev = Evaluator::new(
                &scn,
                &db,
                setup,
                cfg.trials,
                seed,
                cfg.sim.resample_obstacles_per_grid,
                cfg.u_max,
            );
            let tol = tol.unwrap_or((bracket_hi - bracket_lo) / 200.0);
            let policy = match (threshold, single_tune) {
                (Some(t), _) => ThresholdPolicy::Fixed(t),
                (None, true) => ThresholdPolicy::TuneAtZero {
                    bracket: (bracket_lo, bracket_hi),
                    tol,
                },
                (None, false) => ThresholdPolicy::TunePerRadius {
                    bracket: (bracket_lo, bracket_hi),
                    tol,
                },
            };
            let search = max_tolerable_radius(
                &ev,
                &cfg.error_radii_m,
                cfg.delta,
                cfg.rate_threshold_bps,
                policy,
            )?;
            write_out(
                &out,
                "radius_search.json",
                &serde_json::to_string_pretty(&search)
                    .expect("serializable"),
            )?;
            println!(
                "r* = {} m (argmax of min-rate at {} m)",
                search.r_star, search.argmax_min_rate_radius
            );
            for c in &search.candidates {
                println!(
                    "  r={:>5.1} m  T_D={:.4e}  min rate {:.3} Gbps  violation {:.3}  {}",
                    c.radius_m,
                    c.threshold,
                    c.estimate.min_grid_rate_bps / 1e9,
                    c.estimate.budget_violation_prob,
                    c.failure.as_deref().unwrap_or("feasible")
                );
            }
            Ok(())
        }
        Command::Bench {
            config,
            seed,
            kind,
            distance,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            cfg.controller = match kind {
                BenchKind::PerGrid => Controller::PerGrid,
                BenchKind::FixedDistance => Controller::FixedDistance {
                    update_distance_m: distance,
                },
            };
            let output = run_experiment(&cfg, seed, &out)?;
            println!("wrote {}", out.display());
            for agg in &output.aggregates {
                println!(
                    "r={:>5.1} m  trajectory rate {:.3} Gbps  mean U {:.1}",
                    agg.error_radius_m,
                    agg.mean_trajectory_rate_bps / 1e9,
                    agg.mean_query_count
                );
            }
            Ok(())
        }
        Command::TraceScenario {
            scenario: scenario_path,
            seed,
            grid,
            out,
        } => {
            let scn = load_scenario(&scenario_path)?;
            let db = SkeletonDatabase::populate(&scn, 5, 10);
            write_out(&out, "skeleton_db.json", &db.export_json())?;
            let obstacles = match seed {
                Some(s) => scenario::sample_obstacles(&scn, s),
                None => scenario::ObstacleSet::empty(),
            };
            let mut dump = String::from(
                "grid_index,center_x,center_y,center_z,path_index,kind,aod_phi_deg,aod_theta_deg,aoa_phi_deg,aoa_theta_deg,length_m,penetration_db,received_dbm\n",
            );
            let grids: Vec<usize> = match grid {
                Some(g) => vec![g],
                None => (0..scn.grid_count).collect(),
            };
            for gid in grids {
                if gid >= scn.grid_count {
                    return Err(AppError::Harness(HarnessError::Config(format!(
                        "grid {gid} out of range (grid count {})",
                        scn.grid_count
                    ))));
                }
                let center = scn.grid_centers[gid];
                let paths = beamtrack::trace::trace_paths(
                    &scn,
                    &obstacles,
                    center,
                    10,
                    scn.link.angular_resolution_deg,
                );
                let powers = beamtrack::trace::received_powers_dbm(&scn, &paths);
                for (i, (p, dbm)) in paths.iter().zip(&powers).enumerate() {
                    dump.push_str(&format!(
                        "{gid},{:.3},{:.3},{:.3},{i},{},{:.2},{:.2},{:.2},{:.2},{:.3},{:.1},{:.2}\n",
                        center.x,
                        center.y,
                        center.z,
                        if p.is_los { "los" } else { "reflection" },
                        p.aod.0.to_degrees(),
                        p.aod.1.to_degrees(),
                        p.aoa.0.to_degrees(),
                        p.aoa.1.to_degrees(),
                        p.length_m,
                        p.penetration_loss_db,
                        dbm
                    ));
                }
            }
            write_out(&out, "scenario_paths.csv", &dump)?;
            println!(
                "wrote {} ({} grids, {} skeletons)",
                out.display(),
                scn.grid_count,
                db.len()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}
