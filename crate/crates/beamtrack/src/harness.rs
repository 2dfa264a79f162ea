//! Experiment orchestration: antenna presets, per-trial observation contexts,
//! the tracking controller and the two benchmark controllers, Monte-Carlo
//! execution, and CSV/JSON result emission.

use crate::channel::{self, sample_fading, ArrayGeometry, PhaseConvention};
use crate::localization::{perceived_grid, sample_unit_disk};
use crate::rng::{self, lane};
use crate::scenario::{self, Scenario, ScenarioError};
use crate::skeleton::{
    tracking_step, CodebookPair, DbSession, DistanceMetric, DistanceMode, DriftStatistic,
    GridObservation, LinkContext, MeasurementModel, SkeletonDatabase, TrackingParams,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path as FsPath;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("failed to parse experiment file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The two antenna regimes: narrow beams (8x8 / 4x4) and wide beams
/// (8x4 / 4x2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AntennaPreset {
    Narrow,
    Wide,
}

impl AntennaPreset {
    pub fn arrays(self) -> (ArrayGeometry, ArrayGeometry) {
        match self {
            AntennaPreset::Narrow => (ArrayGeometry::new(8, 8), ArrayGeometry::new(4, 4)),
            AntennaPreset::Wide => (ArrayGeometry::new(8, 4), ArrayGeometry::new(4, 2)),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AntennaPreset::Narrow => "narrow",
            AntennaPreset::Wide => "wide",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Controller {
    SkeletonTracking { distance_threshold: f64 },
    PerGrid,
    FixedDistance { update_distance_m: f64 },
}

fn default_skeleton_size() -> usize {
    5
}
fn default_trace_max_paths() -> usize {
    10
}
fn default_capture_floor() -> f64 {
    1e-2
}
fn default_speed_kmh() -> f64 {
    5.0
}

/// Simulation knobs beyond the scenario file.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimOptions {
    #[serde(default = "default_skeleton_size")]
    pub skeleton_size: usize,
    #[serde(default = "default_trace_max_paths")]
    pub trace_max_paths: usize,
    /// Minimum two-sided pattern response for a pilot to register.
    #[serde(default = "default_capture_floor")]
    pub capture_floor: f64,
    #[serde(default)]
    pub convention: PhaseConvention,
    /// Redraw blockers at every grid instead of once per trial.
    #[serde(default)]
    pub resample_obstacles_per_grid: bool,
    /// Compare drifts normalized by the reference norm (default) or raw.
    #[serde(default = "default_relative_distance")]
    pub relative_distance: bool,
    /// Snap selected beams to the nearest codeword instead of exact steering.
    #[serde(default)]
    pub quantize_to_codebook: bool,
    /// Build the drift matrices from complex estimates instead of measured
    /// signal strengths.
    #[serde(default)]
    pub coherent_drift: bool,
    #[serde(default)]
    pub spectral_distance: bool,
    #[serde(default = "default_speed_kmh")]
    pub speed_kmh: f64,
}

fn default_relative_distance() -> bool {
    true
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            skeleton_size: default_skeleton_size(),
            trace_max_paths: default_trace_max_paths(),
            capture_floor: default_capture_floor(),
            convention: PhaseConvention::default(),
            resample_obstacles_per_grid: false,
            relative_distance: default_relative_distance(),
            quantize_to_codebook: false,
            coherent_drift: false,
            spectral_distance: false,
            speed_kmh: default_speed_kmh(),
        }
    }
}

fn default_r_list() -> Vec<f64> {
    vec![0.0, 10.0, 11.0, 12.0]
}
fn default_u_max() -> u32 {
    20
}
fn default_delta() -> f64 {
    0.05
}
fn default_rate_threshold() -> f64 {
    200.0e6
}
fn default_trials() -> usize {
    200
}

/// Experiment description (TOML). `scenario` is a path to a scenario file;
/// when absent the built-in default map is used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub scenario: Option<String>,
    pub antennas: AntennaPreset,
    #[serde(default = "default_r_list")]
    pub error_radii_m: Vec<f64>,
    pub controller: Controller,
    #[serde(default = "default_u_max")]
    pub u_max: u32,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_rate_threshold")]
    pub rate_threshold_bps: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub sim: SimOptions,
}

impl ExperimentConfig {
    pub fn load(path: &FsPath) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.trials == 0 {
            return Err(HarnessError::Config("trials must be >= 1".into()));
        }
        if self.rate_threshold_bps <= 0.0 {
            return Err(HarnessError::Config("rate_threshold_bps must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(HarnessError::Config("delta must lie in [0, 1]".into()));
        }
        if let Controller::FixedDistance { update_distance_m } = self.controller {
            if update_distance_m <= 0.0 {
                return Err(HarnessError::Config(
                    "fixed-distance controller needs update_distance_m > 0".into(),
                ));
            }
        }
        if self.error_radii_m.iter().any(|r| *r < 0.0) {
            return Err(HarnessError::Config("error radii must be >= 0".into()));
        }
        Ok(())
    }

    pub fn resolve_scenario(&self) -> Result<Scenario, HarnessError> {
        match &self.scenario {
            Some(path) => Ok(scenario::load_scenario(FsPath::new(path))?),
            None => Ok(scenario::build_scenario(&scenario::default_map())?),
        }
    }
}

/// Array pair plus derived link constants for one antenna regime.
#[derive(Debug, Clone)]
pub struct LinkSetup {
    pub tx_geometry: ArrayGeometry,
    pub rx_geometry: ArrayGeometry,
    pub convention: PhaseConvention,
    pub sigma2: f64,
    pub bandwidth_hz: f64,
    pub capture_floor: f64,
    /// Linear channel-gain floor equivalent to the received-power floor.
    pub power_floor_gain: f64,
    pub skeleton_size: usize,
    pub trace_max_paths: usize,
    pub distance_mode: DistanceMode,
    pub codebooks: Option<std::sync::Arc<CodebookPair>>,
}

impl LinkSetup {
    pub fn new(scenario: &Scenario, preset: AntennaPreset, sim: &SimOptions) -> Self {
        let (tx_geometry, rx_geometry) = preset.arrays();
        Self {
            tx_geometry,
            rx_geometry,
            convention: sim.convention,
            sigma2: channel::sigma2_linear(
                scenario.link.tx_power_dbm,
                scenario.link.noise_density_dbm_per_hz,
                scenario.link.bandwidth_hz,
            ),
            bandwidth_hz: scenario.link.bandwidth_hz,
            capture_floor: sim.capture_floor,
            power_floor_gain: channel::db_to_linear(
                scenario.link.power_floor_dbm - scenario.link.tx_power_dbm,
            ),
            skeleton_size: sim.skeleton_size,
            trace_max_paths: sim.trace_max_paths,
            distance_mode: DistanceMode {
                metric: if sim.spectral_distance {
                    DistanceMetric::Spectral
                } else {
                    DistanceMetric::Frobenius
                },
                relative: sim.relative_distance,
                statistic: if sim.coherent_drift {
                    DriftStatistic::Coherent
                } else {
                    DriftStatistic::Envelope
                },
            },
            codebooks: if sim.quantize_to_codebook {
                let sector = crate::beamforming::Sector::front(0.35);
                Some(std::sync::Arc::new(CodebookPair {
                    tx: crate::beamforming::build_codebook(
                        tx_geometry,
                        sector,
                        crate::beamforming::Side::Tx,
                        sim.convention,
                        crate::beamforming::DEFAULT_OVERLAP_FACTOR,
                    ),
                    rx: crate::beamforming::build_codebook(
                        rx_geometry,
                        sector,
                        crate::beamforming::Side::Rx,
                        sim.convention,
                        crate::beamforming::DEFAULT_OVERLAP_FACTOR,
                    ),
                }))
            } else {
                None
            },
        }
    }

    pub fn link_context(&self) -> LinkContext {
        LinkContext {
            model: MeasurementModel {
                tx_geometry: self.tx_geometry,
                rx_geometry: self.rx_geometry,
                convention: self.convention,
                capture_floor: self.capture_floor,
            },
            sigma2: self.sigma2,
            bandwidth_hz: self.bandwidth_hz,
            power_floor_gain: self.power_floor_gain,
            quantize: self.codebooks.clone(),
        }
    }
}

/// All randomness of one Monte-Carlo trial, drawn up front. Observations are
/// independent of the controller and of the sweep parameters (threshold,
/// error radius), which makes sweeps share draws by construction.
#[derive(Debug, Clone)]
pub struct TrialContext {
    pub trial: u64,
    pub observations: Vec<GridObservation>,
}

pub fn build_trial_context(
    scenario: &Scenario,
    master_seed: u64,
    trial: u64,
    setup: &LinkSetup,
    resample_obstacles_per_grid: bool,
) -> TrialContext {
    let base_obstacles = scenario::sample_obstacles(
        scenario,
        rng::derive_seed(master_seed, &[lane::OBSTACLES, trial]),
    );
    let observations = scenario
        .grid_centers
        .iter()
        .enumerate()
        .map(|(gid, center)| {
            let per_grid;
            let obstacles = if resample_obstacles_per_grid {
                per_grid = scenario::sample_obstacles(
                    scenario,
                    rng::derive_seed(master_seed, &[lane::OBSTACLES, trial, gid as u64 + 1]),
                );
                &per_grid
            } else {
                &base_obstacles
            };
            let paths = crate::trace::trace_paths(
                scenario,
                obstacles,
                *center,
                setup.trace_max_paths,
                scenario.link.angular_resolution_deg,
            );
            let betas: Vec<f64> = paths
                .iter()
                .map(|p| {
                    channel::large_scale_gain(
                        p,
                        scenario.link.frequency_hz,
                        scenario.link.los_exponent,
                        scenario.link.nlos_exponent,
                    )
                    .unwrap_or(0.0)
                })
                .collect();
            let mut fading_rng = rng::stream(master_seed, &[lane::FADING, trial, gid as u64]);
            let fading = betas
                .iter()
                .map(|&beta| sample_fading(beta, &mut fading_rng))
                .collect();
            let mut error_rng =
                rng::stream(master_seed, &[lane::LOCALIZATION, trial, gid as u64]);
            let unit_error = sample_unit_disk(&mut error_rng);
            GridObservation {
                grid_id: gid,
                paths,
                betas,
                fading,
                unit_error,
            }
        })
        .collect();
    TrialContext { trial, observations }
}

/// Outcome of one trajectory traversal.
#[derive(Debug, Clone)]
pub struct TrajectoryResult {
    pub trial: u64,
    pub per_grid_rate_bps: Vec<f64>,
    pub per_grid_snr_db: Vec<f64>,
    /// Grids where a drift- or schedule-triggered refresh happened (the
    /// initial query at the first grid is not listed).
    pub update_events: Vec<usize>,
    pub query_count: u32,
    pub pilot_slots: u32,
    pub budget_exceeded: bool,
    pub out_of_trajectory_events: u32,
    pub outage_grids: u32,
}

fn snr_db(snr_linear: f64) -> f64 {
    if snr_linear > 0.0 {
        10.0 * snr_linear.log10()
    } else {
        f64::NEG_INFINITY
    }
}

/// Number of scheduled refresh marks (multiples of `spacing`) inside each
/// grid's arc-length interval; the first mark sits at the trajectory start.
fn fixed_distance_marks(scenario: &Scenario, spacing: f64) -> Vec<u32> {
    let g = scenario.grid_size_m;
    (0..scenario.grid_count)
        .map(|i| {
            let start = i as f64 * g;
            let end = ((i + 1) as f64 * g).min(scenario.trajectory_length_m);
            if !spacing.is_finite() {
                return u32::from(i == 0);
            }
            // Marks k with start <= k * spacing < end; a mark exactly on the
            // boundary belongs to the next grid.
            let first = (start / spacing).ceil() as i64;
            let mut last = (end / spacing).ceil() as i64 - 1;
            if (last as f64) * spacing >= end {
                last -= 1;
            }
            (last - first + 1).max(0) as u32
        })
        .collect()
}

/// Run one trial under the given controller and localization radius.
pub fn run_trial(
    scenario: &Scenario,
    db: &SkeletonDatabase,
    context: &TrialContext,
    setup: &LinkSetup,
    controller: Controller,
    error_radius_m: f64,
    u_max: u32,
) -> TrajectoryResult {
    let ctx = setup.link_context();
    let mut session = DbSession::new(db, Some(u_max));
    let mut per_grid_rate = Vec::with_capacity(context.observations.len());
    let mut per_grid_snr = Vec::with_capacity(context.observations.len());
    let mut update_events = Vec::new();
    let mut pilot_slots = 0u32;
    let mut out_of_trajectory = 0u32;
    let mut outage_grids = 0u32;

    match controller {
        Controller::SkeletonTracking { .. } | Controller::PerGrid => {
            let params = match controller {
                Controller::SkeletonTracking { distance_threshold } => TrackingParams {
                    distance_threshold,
                    force_update: false,
                    distance_mode: setup.distance_mode,
                },
                _ => TrackingParams {
                    distance_threshold: 0.0,
                    force_update: true,
                    distance_mode: setup.distance_mode,
                },
            };
            let mut state = None;
            for obs in &context.observations {
                let error = [
                    obs.unit_error[0] * error_radius_m,
                    obs.unit_error[1] * error_radius_m,
                ];
                let perceived =
                    perceived_grid(scenario, &scenario.grid_centers[obs.grid_id], error);
                if perceived.out_of_trajectory {
                    out_of_trajectory += 1;
                }
                let out = tracking_step(
                    &mut state,
                    obs,
                    perceived.grid_id,
                    &mut session,
                    &params,
                    &ctx,
                )
                .expect("database covers every grid");
                per_grid_rate.push(out.rate_bps);
                per_grid_snr.push(snr_db(out.snr_linear));
                pilot_slots += out.pilot_slots;
                if out.updated {
                    update_events.push(obs.grid_id);
                }
                if out.outage {
                    outage_grids += 1;
                }
            }
        }
        Controller::FixedDistance { update_distance_m } => {
            let marks = fixed_distance_marks(scenario, update_distance_m);
            let mut beams: Option<(
                crate::beamforming::BeamVector,
                crate::beamforming::BeamVector,
            )> = None;
            for obs in &context.observations {
                let error = [
                    obs.unit_error[0] * error_radius_m,
                    obs.unit_error[1] * error_radius_m,
                ];
                let perceived =
                    perceived_grid(scenario, &scenario.grid_centers[obs.grid_id], error);
                if perceived.out_of_trajectory {
                    out_of_trajectory += 1;
                }
                let mark_count = marks[obs.grid_id];
                if mark_count > 0 {
                    // Each scheduled mark costs one query; re-selection uses
                    // the perceived grid's fresh skeleton.
                    let mut ps = None;
                    for _ in 0..mark_count {
                        ps = Some(
                            session
                                .query(perceived.grid_id)
                                .expect("database covers every grid")
                                .clone(),
                        );
                    }
                    let ps = ps.expect("at least one mark");
                    let measurements =
                        crate::skeleton::measure_on_skeleton(obs, &ps, &ctx.model);
                    pilot_slots += ps.len() as u32;
                    let powers: Vec<f64> =
                        measurements.iter().map(|m| m.norm_sqr()).collect();
                    beams = crate::beamforming::select_beams_skeleton(
                        &powers,
                        ctx.power_floor_gain,
                    )
                    .map(|k| {
                        let mut f = crate::beamforming::steering_beam(
                            setup.tx_geometry,
                            ps.paths[k].aod,
                            crate::beamforming::Side::Tx,
                            setup.convention,
                        );
                        let mut w = crate::beamforming::steering_beam(
                            setup.rx_geometry,
                            ps.paths[k].aoa,
                            crate::beamforming::Side::Rx,
                            setup.convention,
                        );
                        if let Some(pair) = &ctx.quantize {
                            f = crate::beamforming::nearest_codeword(&pair.tx, &f).clone();
                            w = crate::beamforming::nearest_codeword(&pair.rx, &w).clone();
                        }
                        (f, w)
                    });
                    if obs.grid_id > 0 {
                        update_events.push(obs.grid_id);
                    }
                }
                let h_true = crate::skeleton::true_channel(obs, &ctx.model);
                match &beams {
                    Some((f, w)) => {
                        let snr = crate::beamforming::snr(&h_true, f, w, ctx.sigma2);
                        per_grid_rate.push(crate::beamforming::rate(snr, ctx.bandwidth_hz));
                        per_grid_snr.push(snr_db(snr));
                    }
                    None => {
                        per_grid_rate.push(0.0);
                        per_grid_snr.push(f64::NEG_INFINITY);
                        outage_grids += 1;
                    }
                }
            }
        }
    }

    TrajectoryResult {
        trial: context.trial,
        per_grid_rate_bps: per_grid_rate,
        per_grid_snr_db: per_grid_snr,
        update_events,
        query_count: session.query_count(),
        pilot_slots,
        budget_exceeded: session.budget_exceeded(),
        out_of_trajectory_events: out_of_trajectory,
        outage_grids,
    }
}

/// Aggregate over trials for one (controller, radius) cell.
#[derive(Debug, Clone, Serialize)]
pub struct RadiusAggregate {
    pub error_radius_m: f64,
    pub per_grid_mean_rate_bps: Vec<f64>,
    pub per_grid_stderr_bps: Vec<f64>,
    pub mean_trajectory_rate_bps: f64,
    pub stderr_trajectory_rate_bps: f64,
    pub min_grid_mean_rate_bps: f64,
    pub mean_query_count: f64,
    pub stderr_query_count: f64,
    pub budget_violation_prob: f64,
    pub mean_pilot_slots: f64,
    pub grids_below_threshold: Vec<usize>,
}

fn mean_and_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn aggregate_results(
    results: &[TrajectoryResult],
    error_radius_m: f64,
    rate_threshold_bps: f64,
) -> RadiusAggregate {
    let trials = results.len();
    let grids = results.first().map_or(0, |r| r.per_grid_rate_bps.len());
    let mut per_grid_mean = Vec::with_capacity(grids);
    let mut per_grid_stderr = Vec::with_capacity(grids);
    for g in 0..grids {
        let samples: Vec<f64> = results.iter().map(|r| r.per_grid_rate_bps[g]).collect();
        let (m, s) = mean_and_stderr(&samples);
        per_grid_mean.push(m);
        per_grid_stderr.push(s);
    }
    let trajectory: Vec<f64> = results
        .iter()
        .map(|r| r.per_grid_rate_bps.iter().sum::<f64>())
        .collect();
    let (traj_mean, traj_stderr) = mean_and_stderr(&trajectory);
    let queries: Vec<f64> = results.iter().map(|r| r.query_count as f64).collect();
    let (q_mean, q_stderr) = mean_and_stderr(&queries);
    let violation = results.iter().filter(|r| r.budget_exceeded).count() as f64
        / trials.max(1) as f64;
    let pilots: Vec<f64> = results.iter().map(|r| r.pilot_slots as f64).collect();
    let (p_mean, _) = mean_and_stderr(&pilots);
    let min_grid = per_grid_mean
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let below = per_grid_mean
        .iter()
        .enumerate()
        .filter(|(_, &m)| m < rate_threshold_bps)
        .map(|(g, _)| g)
        .collect();
    RadiusAggregate {
        error_radius_m,
        per_grid_mean_rate_bps: per_grid_mean,
        per_grid_stderr_bps: per_grid_stderr,
        mean_trajectory_rate_bps: traj_mean,
        stderr_trajectory_rate_bps: traj_stderr,
        min_grid_mean_rate_bps: if min_grid.is_finite() { min_grid } else { 0.0 },
        mean_query_count: q_mean,
        stderr_query_count: q_stderr,
        budget_violation_prob: violation,
        mean_pilot_slots: p_mean,
        grids_below_threshold: below,
    }
}

/// Everything `run` produces, before file emission.
#[derive(Debug)]
pub struct RunOutput {
    pub aggregates: Vec<RadiusAggregate>,
    pub results: Vec<(f64, Vec<TrajectoryResult>)>,
}

/// Execute the configured controller over every error radius. Contexts are
/// built once and shared across radii (common random numbers).
pub fn run_trials(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    db: &SkeletonDatabase,
    master_seed: u64,
) -> RunOutput {
    let setup = LinkSetup::new(scenario, cfg.antennas, &cfg.sim);
    let contexts: Vec<TrialContext> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|trial| {
            build_trial_context(
                scenario,
                master_seed,
                trial,
                &setup,
                cfg.sim.resample_obstacles_per_grid,
            )
        })
        .collect();
    let mut aggregates = Vec::new();
    let mut results = Vec::new();
    for &r in &cfg.error_radii_m {
        let per_trial: Vec<TrajectoryResult> = contexts
            .par_iter()
            .map(|ctx| run_trial(scenario, db, ctx, &setup, cfg.controller, r, cfg.u_max))
            .collect();
        aggregates.push(aggregate_results(&per_trial, r, cfg.rate_threshold_bps));
        results.push((r, per_trial));
    }
    RunOutput { aggregates, results }
}

const GBPS: f64 = 1.0e9;

fn write_file(path: &FsPath, contents: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = q * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let w = idx - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Run the experiment and write the result bundle under `out_dir`:
/// `rates_per_grid.csv`, `rate_distribution.csv`, `updates_table.csv`, and
/// `manifest.json`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    master_seed: u64,
    out_dir: &FsPath,
) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let scenario = cfg.resolve_scenario()?;
    let db = SkeletonDatabase::populate(&scenario, cfg.sim.skeleton_size, cfg.sim.trace_max_paths);
    let output = run_trials(cfg, &scenario, &db, master_seed);

    let mut rates_csv = String::from("grid_index,r_m,mean_rate_gbps,stderr_gbps,below_threshold\n");
    for agg in &output.aggregates {
        for (g, (&mean, &stderr)) in agg
            .per_grid_mean_rate_bps
            .iter()
            .zip(&agg.per_grid_stderr_bps)
            .enumerate()
        {
            let below = u8::from(agg.grids_below_threshold.contains(&g));
            rates_csv.push_str(&format!(
                "{g},{r},{mean:.6},{stderr:.6},{below}\n",
                r = agg.error_radius_m,
                mean = mean / GBPS,
                stderr = stderr / GBPS,
            ));
        }
    }
    write_file(&out_dir.join("rates_per_grid.csv"), &rates_csv)?;

    let mut dist_csv = String::from("r_m,quantile,rate_gbps\n");
    for (r, per_trial) in &output.results {
        let mut samples: Vec<f64> = per_trial
            .iter()
            .flat_map(|t| t.per_grid_rate_bps.iter().copied())
            .collect();
        samples.sort_by(f64::total_cmp);
        for q in 0..=100 {
            let value = quantile(&samples, q as f64 / 100.0);
            dist_csv.push_str(&format!("{r},{q},{:.6}\n", value / GBPS));
        }
    }
    write_file(&out_dir.join("rate_distribution.csv"), &dist_csv)?;

    let mut updates_csv = String::from(
        "r_m,mean_updates,stderr_updates,violation_prob,mean_pilot_slots,min_grid_rate_gbps\n",
    );
    for agg in &output.aggregates {
        updates_csv.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.2},{:.6}\n",
            agg.error_radius_m,
            agg.mean_query_count,
            agg.stderr_query_count,
            agg.budget_violation_prob,
            agg.mean_pilot_slots,
            agg.min_grid_mean_rate_bps / GBPS,
        ));
    }
    write_file(&out_dir.join("updates_table.csv"), &updates_csv)?;

    let scenario_cfg_echo = match &cfg.scenario {
        Some(path) => std::fs::read_to_string(path).ok(),
        None => None,
    };
    let visit_times: Vec<f64> = {
        let v = cfg.sim.speed_kmh / 3.6;
        scenario
            .grid_centers
            .iter()
            .enumerate()
            .map(|(i, _)| ((i as f64 + 0.5) * scenario.grid_size_m).min(scenario.trajectory_length_m) / v)
            .collect()
    };
    let manifest = serde_json::json!({
        "tool": "beamtrack",
        "version": env!("CARGO_PKG_VERSION"),
        "master_seed": master_seed,
        "config": cfg,
        "scenario_file_contents": scenario_cfg_echo,
        "grid_count": scenario.grid_count,
        "grid_visit_times_s": visit_times,
    });
    write_file(
        &out_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("serializable"),
    )?;

    Ok(output)
}
