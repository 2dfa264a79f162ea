//! Path-skeleton extraction, the per-grid skeleton database with query
//! accounting, pilot measurements restricted to skeleton directions, and the
//! drift-triggered tracking controller.
//!
//! A skeleton stores the strongest few paths of a grid as (departure angles,
//! arrival angles, gain). Pilots are only ever sent through those directions:
//! the measurement of one direction reads the current complex gain of the
//! physical path its beam pair captures, scaled by the two-sided pattern
//! response at the angular offset. A direction whose best coupling falls
//! below the capture floor reads silence. When the reference skeleton and the
//! live paths coincide exactly the reconstruction equals the true channel.

use crate::beamforming::{select_beams_skeleton, steering_beam, Side};
use crate::channel::{
    self, array_response, assemble_from_directions, ArrayGeometry, ChannelError, ChannelMatrix,
    DirectionPair, PhaseConvention,
};
use crate::trace::Path;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DbError {
    #[error("unknown grid id {0}")]
    UnknownGrid(usize),
}

/// One skeleton entry: departure/arrival angles in radians plus linear gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkeletonPath {
    pub aod: (f64, f64),
    pub aoa: (f64, f64),
    pub beta: f64,
}

/// The strongest available paths for one grid, sorted by descending gain.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSkeleton {
    pub grid_id: usize,
    pub paths: Vec<SkeletonPath>,
}

impl PathSkeleton {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Top `max_paths` by gain, descending. Fewer survive if fewer exist; an
/// empty input yields an empty (outage) skeleton.
pub fn extract_skeleton(
    paths: &[Path],
    gains: &[f64],
    max_paths: usize,
    grid_id: usize,
) -> PathSkeleton {
    let mut entries: Vec<SkeletonPath> = paths
        .iter()
        .zip(gains)
        .map(|(p, &beta)| SkeletonPath {
            aod: p.aod,
            aoa: p.aoa,
            beta,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.beta
            .total_cmp(&a.beta)
            .then(a.aod.0.total_cmp(&b.aod.0))
            .then(a.aod.1.total_cmp(&b.aod.1))
    });
    entries.truncate(max_paths);
    PathSkeleton {
        grid_id,
        paths: entries,
    }
}

/// Read-only skeleton store, one entry per grid ID.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkeletonDatabase {
    entries: BTreeMap<usize, PathSkeleton>,
}

impl SkeletonDatabase {
    pub fn new(entries: BTreeMap<usize, PathSkeleton>) -> Self {
        Self { entries }
    }

    /// Trace every grid centre with no temporary blockers and keep the top
    /// `skeleton_size` paths each.
    pub fn populate(
        scenario: &crate::scenario::Scenario,
        skeleton_size: usize,
        trace_max_paths: usize,
    ) -> Self {
        let empty = crate::scenario::ObstacleSet::empty();
        let mut entries = BTreeMap::new();
        for (grid_id, center) in scenario.grid_centers.iter().enumerate() {
            let paths = crate::trace::trace_paths(
                scenario,
                &empty,
                *center,
                trace_max_paths,
                scenario.link.angular_resolution_deg,
            );
            let gains: Vec<f64> = paths
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
            entries.insert(
                grid_id,
                extract_skeleton(&paths, &gains, skeleton_size, grid_id),
            );
        }
        Self { entries }
    }

    pub fn get(&self, grid_id: usize) -> Option<&PathSkeleton> {
        self.entries.get(&grid_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn grid_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }
}

// Structured-text export: angles in degrees, gains in dB.
#[derive(Debug, Serialize, Deserialize)]
struct DbFilePath {
    aod_deg: [f64; 2],
    aoa_deg: [f64; 2],
    gain_db: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DbFileGrid {
    grid_id: usize,
    paths: Vec<DbFilePath>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DbFile {
    grids: Vec<DbFileGrid>,
}

impl SkeletonDatabase {
    pub fn export_json(&self) -> String {
        let grids = self
            .entries
            .values()
            .map(|ps| DbFileGrid {
                grid_id: ps.grid_id,
                paths: ps
                    .paths
                    .iter()
                    .map(|p| DbFilePath {
                        aod_deg: [p.aod.0.to_degrees(), p.aod.1.to_degrees()],
                        aoa_deg: [p.aoa.0.to_degrees(), p.aoa.1.to_degrees()],
                        gain_db: channel::linear_to_db(p.beta),
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_string_pretty(&DbFile { grids }).expect("serializable")
    }

    pub fn import_json(text: &str) -> Result<Self, serde_json::Error> {
        let file: DbFile = serde_json::from_str(text)?;
        let mut entries = BTreeMap::new();
        for g in file.grids {
            entries.insert(
                g.grid_id,
                PathSkeleton {
                    grid_id: g.grid_id,
                    paths: g
                        .paths
                        .iter()
                        .map(|p| SkeletonPath {
                            aod: (p.aod_deg[0].to_radians(), p.aod_deg[1].to_radians()),
                            aoa: (p.aoa_deg[0].to_radians(), p.aoa_deg[1].to_radians()),
                            beta: channel::db_to_linear(p.gain_db),
                        })
                        .collect(),
                },
            );
        }
        Ok(Self { entries })
    }
}

/// Per-trial view of the database that counts successful queries. The budget
/// is never enforced as a hard refusal; exceeding it is flagged and the
/// chance constraint is evaluated statistically by the outer optimizer.
#[derive(Debug)]
pub struct DbSession<'a> {
    db: &'a SkeletonDatabase,
    queries: u32,
    budget: Option<u32>,
}

impl<'a> DbSession<'a> {
    pub fn new(db: &'a SkeletonDatabase, budget: Option<u32>) -> Self {
        Self {
            db,
            queries: 0,
            budget,
        }
    }

    pub fn query(&mut self, grid_id: usize) -> Result<&'a PathSkeleton, DbError> {
        let ps = self.db.get(grid_id).ok_or(DbError::UnknownGrid(grid_id))?;
        self.queries += 1;
        Ok(ps)
    }

    pub fn query_count(&self) -> u32 {
        self.queries
    }

    pub fn budget_exceeded(&self) -> bool {
        self.budget.is_some_and(|b| self.queries > b)
    }
}

/// Everything observed at one grid visit: the live paths with their gains and
/// this coherence interval's fading draws, plus the unit-disk localization
/// draw (scaled by the error radius at use time so sweeps over the radius
/// share draws).
#[derive(Debug, Clone, PartialEq)]
pub struct GridObservation {
    pub grid_id: usize,
    pub paths: Vec<Path>,
    pub betas: Vec<f64>,
    pub fading: Vec<Complex64>,
    pub unit_error: [f64; 2],
}

/// Parameters of the pilot measurement through skeleton directions.
#[derive(Debug, Clone, Copy)]
pub struct MeasurementModel {
    pub tx_geometry: ArrayGeometry,
    pub rx_geometry: ArrayGeometry,
    pub convention: PhaseConvention,
    /// Minimum two-sided pattern response `|g_rx g_tx|^2` for a physical path
    /// to register on a skeleton direction.
    pub capture_floor: f64,
}

/// Measure the current complex gain along each skeleton direction: the gain
/// of the best-coupled live path times the (complex) two-sided pattern
/// response at the offset. Directions without a captured path read zero.
pub fn measure_on_skeleton(
    observation: &GridObservation,
    ps: &PathSkeleton,
    model: &MeasurementModel,
) -> Vec<Complex64> {
    let live_tx: Vec<_> = observation
        .paths
        .iter()
        .map(|p| array_response(model.tx_geometry, p.aod.0, p.aod.1, model.convention))
        .collect();
    let live_rx: Vec<_> = observation
        .paths
        .iter()
        .map(|p| array_response(model.rx_geometry, p.aoa.0, p.aoa.1, model.convention))
        .collect();

    ps.paths
        .iter()
        .map(|sp| {
            let probe_tx =
                array_response(model.tx_geometry, sp.aod.0, sp.aod.1, model.convention);
            let probe_rx =
                array_response(model.rx_geometry, sp.aoa.0, sp.aoa.1, model.convention);
            let mut best: Option<(f64, Complex64)> = None;
            for (l, _) in observation.paths.iter().enumerate() {
                let g_rx = probe_rx.dotc(&live_rx[l]);
                let g_tx = live_tx[l].dotc(&probe_tx);
                let coupling = g_rx * g_tx;
                let strength = coupling.norm_sqr();
                if best.is_none_or(|(s, _)| strength > s) {
                    best = Some((strength, observation.fading[l] * coupling));
                }
            }
            match best {
                Some((strength, value)) if strength >= model.capture_floor => value,
                _ => Complex64::new(0.0, 0.0),
            }
        })
        .collect()
}

/// Channel reconstruction restricted to the skeleton directions.
pub fn estimate_on_skeleton(
    measurements: &[Complex64],
    ps: &PathSkeleton,
    model: &MeasurementModel,
) -> ChannelMatrix {
    let directions: Vec<DirectionPair> = ps.paths.iter().map(|p| (p.aod, p.aoa)).collect();
    assemble_from_directions(
        &directions,
        measurements,
        model.tx_geometry,
        model.rx_geometry,
        model.convention,
    )
    .with_grid(ps.grid_id)
}

/// The true channel of a grid visit, assembled from every live path.
pub fn true_channel(observation: &GridObservation, model: &MeasurementModel) -> ChannelMatrix {
    let directions: Vec<DirectionPair> =
        observation.paths.iter().map(|p| (p.aod, p.aoa)).collect();
    assemble_from_directions(
        &directions,
        &observation.fading,
        model.tx_geometry,
        model.rx_geometry,
        model.convention,
    )
    .with_grid(observation.grid_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Frobenius,
    Spectral,
}

/// How the drift statistic is built from pilot measurements.
///
/// `Envelope` reconstructs the compared matrices from measured signal
/// strengths (amplitudes), which makes the statistic insensitive to the
/// per-interval fading phase churn: a stale or dead reference then reads
/// *above* the live-noise floor and triggers a refresh. `Coherent` compares
/// the complex estimates directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftStatistic {
    #[default]
    Envelope,
    Coherent,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DistanceMode {
    #[serde(default)]
    pub metric: DistanceMetric,
    /// Normalize by the reference norm. Keeps one threshold meaningful across
    /// trajectory sections whose gains differ by tens of dB.
    #[serde(default = "default_true")]
    pub relative: bool,
    #[serde(default)]
    pub statistic: DriftStatistic,
}

fn default_true() -> bool {
    true
}

impl Default for DistanceMode {
    fn default() -> Self {
        Self {
            metric: DistanceMetric::Frobenius,
            relative: true,
            statistic: DriftStatistic::Envelope,
        }
    }
}

/// Frobenius distance between two equally-shaped channel estimates.
pub fn skeleton_distance(a: &ChannelMatrix, b: &ChannelMatrix) -> Result<f64, ChannelError> {
    if a.entries.nrows() != b.entries.nrows() || a.entries.ncols() != b.entries.ncols() {
        return Err(ChannelError::DimensionMismatch(
            a.entries.nrows(),
            a.entries.ncols(),
            b.entries.nrows(),
            b.entries.ncols(),
        ));
    }
    Ok((&a.entries - &b.entries).norm())
}

/// Largest singular value via power iteration on the Gram matrix.
pub fn spectral_norm(m: &nalgebra::DMatrix<Complex64>) -> f64 {
    let gram = m.adjoint() * m;
    let n = gram.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = nalgebra::DVector::from_fn(n, |i, _| Complex64::new(1.0 + 0.01 * i as f64, 0.0));
    v /= Complex64::new(v.norm(), 0.0);
    let mut eig = 0.0;
    for _ in 0..200 {
        let w = &gram * &v;
        let norm = w.norm();
        if norm < 1e-300 {
            return 0.0;
        }
        let next = norm;
        v = w / Complex64::new(norm, 0.0);
        if (next - eig).abs() <= 1e-14 * next.max(1.0) {
            eig = next;
            break;
        }
        eig = next;
    }
    eig.sqrt()
}

pub fn skeleton_distance_with(
    a: &ChannelMatrix,
    b: &ChannelMatrix,
    mode: DistanceMode,
) -> Result<f64, ChannelError> {
    if a.entries.nrows() != b.entries.nrows() || a.entries.ncols() != b.entries.ncols() {
        return Err(ChannelError::DimensionMismatch(
            a.entries.nrows(),
            a.entries.ncols(),
            b.entries.nrows(),
            b.entries.ncols(),
        ));
    }
    let raw = match mode.metric {
        DistanceMetric::Frobenius => (&a.entries - &b.entries).norm(),
        DistanceMetric::Spectral => spectral_norm(&(&a.entries - &b.entries)),
    };
    if mode.relative {
        let denom = match mode.metric {
            DistanceMetric::Frobenius => b.entries.norm(),
            DistanceMetric::Spectral => spectral_norm(&b.entries),
        };
        if denom > 0.0 {
            Ok(raw / denom)
        } else {
            // A silent reference cannot validate anything.
            Ok(f64::INFINITY)
        }
    } else {
        Ok(raw)
    }
}

/// Matrix compared by the drift test, reconstructed from the measurements on
/// the skeleton support under the configured statistic.
pub fn drift_matrix(
    measurements: &[Complex64],
    ps: &PathSkeleton,
    model: &MeasurementModel,
    statistic: DriftStatistic,
) -> ChannelMatrix {
    match statistic {
        DriftStatistic::Coherent => estimate_on_skeleton(measurements, ps, model),
        DriftStatistic::Envelope => {
            let envelopes: Vec<Complex64> = measurements
                .iter()
                .map(|m| Complex64::new(m.norm(), 0.0))
                .collect();
            estimate_on_skeleton(&envelopes, ps, model)
        }
    }
}

/// Tracking reference: the last skeleton handed to the user and the channel
/// estimated on it (in drift-statistic space) when it became the reference.
#[derive(Debug, Clone)]
pub struct TrackingState {
    pub reference: PathSkeleton,
    pub reference_channel: ChannelMatrix,
}

#[derive(Debug, Clone, Copy)]
pub struct TrackingParams {
    pub distance_threshold: f64,
    pub force_update: bool,
    pub distance_mode: DistanceMode,
}

/// Transmit and combine codebooks for quantized beam selection.
#[derive(Debug, Clone)]
pub struct CodebookPair {
    pub tx: crate::beamforming::Codebook,
    pub rx: crate::beamforming::Codebook,
}

/// Link-level constants the controller needs at every grid.
#[derive(Debug, Clone)]
pub struct LinkContext {
    pub model: MeasurementModel,
    pub sigma2: f64,
    pub bandwidth_hz: f64,
    /// Linear channel-gain floor for a measurement to count as alive.
    pub power_floor_gain: f64,
    /// When set, the selected steering pair snaps to the nearest codewords
    /// instead of using the exact path directions.
    pub quantize: Option<std::sync::Arc<CodebookPair>>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub rate_bps: f64,
    pub snr_linear: f64,
    /// Drift-triggered re-query happened at this grid (the initial query at
    /// the trajectory start is not an update).
    pub updated: bool,
    pub initialized: bool,
    pub outage: bool,
    pub pilot_slots: u32,
    pub drift: Option<f64>,
    pub beam_pointing: Option<DirectionPair>,
}

use crate::beamforming::nearest_codeword;

fn beamform_and_rate(
    measurements: &[Complex64],
    ps: &PathSkeleton,
    h_true: &ChannelMatrix,
    ctx: &LinkContext,
) -> (f64, f64, bool, Option<DirectionPair>) {
    let powers: Vec<f64> = measurements.iter().map(|m| m.norm_sqr()).collect();
    match select_beams_skeleton(&powers, ctx.power_floor_gain) {
        None => (0.0, 0.0, true, None),
        Some(k) => {
            let entry = &ps.paths[k];
            let mut f = steering_beam(
                ctx.model.tx_geometry,
                entry.aod,
                Side::Tx,
                ctx.model.convention,
            );
            let mut w = steering_beam(
                ctx.model.rx_geometry,
                entry.aoa,
                Side::Rx,
                ctx.model.convention,
            );
            if let Some(pair) = &ctx.quantize {
                f = nearest_codeword(&pair.tx, &f).clone();
                w = nearest_codeword(&pair.rx, &w).clone();
            }
            let snr = crate::beamforming::snr(h_true, &f, &w, ctx.sigma2);
            let rate = crate::beamforming::rate(snr, ctx.bandwidth_hz);
            (rate, snr, false, Some((f.pointing, w.pointing)))
        }
    }
}

/// One grid visit of the tracking controller.
///
/// The channel is first estimated through the reference skeleton directions.
/// If the drift from the reference estimate stays within the threshold the
/// reference is kept and beams are re-selected from the fresh measurements;
/// otherwise the database is queried for the perceived grid's skeleton, which
/// becomes the new reference, and beams are selected on it. The achieved rate
/// is always evaluated on the true channel of the visit.
pub fn tracking_step(
    state: &mut Option<TrackingState>,
    observation: &GridObservation,
    perceived_grid: usize,
    session: &mut DbSession,
    params: &TrackingParams,
    ctx: &LinkContext,
) -> Result<StepOutcome, DbError> {
    let h_true = true_channel(observation, &ctx.model);
    let mut pilot_slots = 0u32;

    match state {
        None => {
            let ps = session.query(perceived_grid)?.clone();
            let measurements = measure_on_skeleton(observation, &ps, &ctx.model);
            pilot_slots += ps.len() as u32;
            let reference_channel =
                drift_matrix(&measurements, &ps, &ctx.model, params.distance_mode.statistic);
            let (rate_bps, snr_linear, outage, beam_pointing) =
                beamform_and_rate(&measurements, &ps, &h_true, ctx);
            *state = Some(TrackingState {
                reference: ps,
                reference_channel,
            });
            Ok(StepOutcome {
                rate_bps,
                snr_linear,
                updated: false,
                initialized: true,
                outage,
                pilot_slots,
                drift: None,
                beam_pointing,
            })
        }
        Some(tracking) => {
            let measurements =
                measure_on_skeleton(observation, &tracking.reference, &ctx.model);
            pilot_slots += tracking.reference.len() as u32;
            let estimate = drift_matrix(
                &measurements,
                &tracking.reference,
                &ctx.model,
                params.distance_mode.statistic,
            );
            let drift =
                skeleton_distance_with(&estimate, &tracking.reference_channel, params.distance_mode)
                    .expect("reference estimates share a shape");
            let trigger = params.force_update || drift > params.distance_threshold;
            if trigger {
                let ps = session.query(perceived_grid)?.clone();
                let fresh = measure_on_skeleton(observation, &ps, &ctx.model);
                pilot_slots += ps.len() as u32;
                let reference_channel =
                    drift_matrix(&fresh, &ps, &ctx.model, params.distance_mode.statistic);
                let (rate_bps, snr_linear, outage, beam_pointing) =
                    beamform_and_rate(&fresh, &ps, &h_true, ctx);
                *tracking = TrackingState {
                    reference: ps,
                    reference_channel,
                };
                Ok(StepOutcome {
                    rate_bps,
                    snr_linear,
                    updated: true,
                    initialized: false,
                    outage,
                    pilot_slots,
                    drift: Some(drift),
                    beam_pointing,
                })
            } else {
                let (rate_bps, snr_linear, outage, beam_pointing) =
                    beamform_and_rate(&measurements, &tracking.reference, &h_true, ctx);
                Ok(StepOutcome {
                    rate_bps,
                    snr_linear,
                    updated: false,
                    initialized: false,
                    outage,
                    pilot_slots,
                    drift: Some(drift),
                    beam_pointing,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_fading, PathGain};
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    const CONV: PhaseConvention = PhaseConvention::AsPrinted;

    fn model() -> MeasurementModel {
        MeasurementModel {
            tx_geometry: ArrayGeometry::new(4, 2),
            rx_geometry: ArrayGeometry::new(2, 2),
            convention: CONV,
            capture_floor: 1e-3,
        }
    }

    fn path(aod: (f64, f64), aoa: (f64, f64)) -> Path {
        Path {
            aod,
            aoa,
            length_m: 30.0,
            is_los: true,
            penetration_loss_db: 0.0,
            reflection_count: 0,
        }
    }

    #[test]
    fn extract_keeps_strongest_in_order() {
        let paths: Vec<Path> = (0..5)
            .map(|i| path((0.1 * i as f64, 1.5), (0.2, 1.5)))
            .collect();
        let gains = [0.5, 2.0, 1.0, 0.1, 1.5];
        let ps = extract_skeleton(&paths, &gains, 2, 7);
        assert_eq!(ps.grid_id, 7);
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.paths[0].beta, 2.0);
        assert_eq!(ps.paths[1].beta, 1.5);
    }

    #[test]
    fn extract_short_input_and_empty() {
        let p = [path((0.0, 1.5), (0.0, 1.5))];
        let ps = extract_skeleton(&p, &[1.0], 3, 0);
        assert_eq!(ps.len(), 1);
        let empty = extract_skeleton(&[], &[], 3, 0);
        assert!(empty.is_empty());
    }

    proptest! {
        #[test]
        fn extract_matches_sort_then_truncate(gains in proptest::collection::vec(0.0f64..10.0, 1..20)) {
            let paths: Vec<Path> = gains
                .iter()
                .enumerate()
                .map(|(i, _)| path((i as f64 * 0.01, 1.5), (0.0, 1.5)))
                .collect();
            let ps = extract_skeleton(&paths, &gains, 4, 0);
            let mut sorted = gains.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            sorted.truncate(4);
            let got: Vec<f64> = ps.paths.iter().map(|p| p.beta).collect();
            prop_assert_eq!(got, sorted);
        }
    }

    fn tiny_db() -> SkeletonDatabase {
        let mut entries = BTreeMap::new();
        for gid in 0..50 {
            entries.insert(
                gid,
                PathSkeleton {
                    grid_id: gid,
                    paths: vec![SkeletonPath {
                        aod: (0.01 * gid as f64, 1.5),
                        aoa: (0.0, 1.5),
                        beta: 1e-9,
                    }],
                },
            );
        }
        SkeletonDatabase::new(entries)
    }

    #[test]
    fn queries_count_without_caching() {
        let db = tiny_db();
        let mut session = DbSession::new(&db, Some(20));
        session.query(3).unwrap();
        session.query(3).unwrap();
        assert_eq!(session.query_count(), 2);
        let ps = session.query(7).unwrap();
        assert_eq!(ps.grid_id, 7);
        assert!(session.query(99).is_err());
        // Failed lookups do not count.
        assert_eq!(session.query_count(), 3);
    }

    #[test]
    fn budget_flag_raises_after_the_limit() {
        let db = tiny_db();
        let mut session = DbSession::new(&db, Some(20));
        for i in 0..20 {
            session.query(i % 50).unwrap();
        }
        assert!(!session.budget_exceeded());
        session.query(0).unwrap();
        assert!(session.budget_exceeded());
        assert_eq!(session.query_count(), 21);
    }

    #[test]
    fn db_export_import_round_trip() {
        let db = tiny_db();
        let text = db.export_json();
        let back = SkeletonDatabase::import_json(&text).unwrap();
        assert_eq!(back.len(), db.len());
        let a = db.get(13).unwrap();
        let b = back.get(13).unwrap();
        assert_relative_eq!(a.paths[0].aod.0, b.paths[0].aod.0, epsilon = 1e-12);
        assert_relative_eq!(a.paths[0].beta, b.paths[0].beta, max_relative = 1e-12);
    }

    fn observation_with(paths: Vec<Path>, betas: Vec<f64>, seed: u64) -> GridObservation {
        let mut rng = stream(seed, &[1]);
        let fading: Vec<Complex64> = betas.iter().map(|&b| sample_fading(b, &mut rng)).collect();
        GridObservation {
            grid_id: 0,
            paths,
            betas,
            fading,
            unit_error: [0.0, 0.0],
        }
    }

    #[test]
    fn estimate_is_exact_when_skeleton_equals_truth() {
        let m = model();
        let paths = vec![
            path((0.4, 1.5), (-0.8, 1.6)),
            path((-1.2, 1.4), (0.9, 1.5)),
            path((2.0, 1.6), (-2.4, 1.5)),
        ];
        let betas = vec![1e-9, 5e-10, 2e-10];
        let obs = observation_with(paths.clone(), betas.clone(), 3);
        let ps = PathSkeleton {
            grid_id: 0,
            paths: paths
                .iter()
                .zip(&betas)
                .map(|(p, &beta)| SkeletonPath {
                    aod: p.aod,
                    aoa: p.aoa,
                    beta,
                })
                .collect(),
        };
        let measured = measure_on_skeleton(&obs, &ps, &m);
        let estimate = estimate_on_skeleton(&measured, &ps, &m);
        let gains: Vec<PathGain> = obs
            .betas
            .iter()
            .zip(&obs.fading)
            .map(|(&beta, &h)| PathGain { beta, h })
            .collect();
        let truth = crate::channel::assemble_channel(
            &paths,
            &gains,
            m.tx_geometry,
            m.rx_geometry,
            CONV,
        );
        assert!((&estimate.entries - &truth.entries).norm() < 1e-14);
    }

    #[test]
    fn blocked_direction_scales_by_its_attenuation() {
        let m = model();
        let p = path((0.4, 1.5), (-0.8, 1.6));
        let beta = 1e-9;
        let obs_clear = observation_with(vec![p.clone()], vec![beta], 5);
        // Same draws, gain knocked down 28.3 dB.
        let attenuated = beta * channel::db_to_linear(-28.3);
        let obs_blocked = observation_with(vec![p.clone()], vec![attenuated], 5);
        let ps = PathSkeleton {
            grid_id: 0,
            paths: vec![SkeletonPath {
                aod: p.aod,
                aoa: p.aoa,
                beta,
            }],
        };
        let m_clear = measure_on_skeleton(&obs_clear, &ps, &m);
        let m_blocked = measure_on_skeleton(&obs_blocked, &ps, &m);
        let drop_db =
            10.0 * (m_clear[0].norm_sqr() / m_blocked[0].norm_sqr()).log10();
        assert_relative_eq!(drop_db, 28.3, epsilon = 1e-9);
    }

    #[test]
    fn direction_without_capture_reads_zero() {
        let m = model();
        let obs = observation_with(vec![path((0.4, 1.5), (-0.8, 1.6))], vec![1e-9], 7);
        // Probe far away on both sides.
        let ps = PathSkeleton {
            grid_id: 0,
            paths: vec![SkeletonPath {
                aod: (-2.2, 1.5),
                aoa: (2.0, 1.6),
                beta: 1e-9,
            }],
        };
        let measured = measure_on_skeleton(&obs, &ps, &m);
        assert_eq!(measured[0], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn distance_identities_and_oracle() {
        let m = model();
        let obs = observation_with(
            vec![path((0.4, 1.5), (-0.8, 1.6)), path((-1.0, 1.5), (0.3, 1.5))],
            vec![1e-9, 2e-9],
            9,
        );
        let h = true_channel(&obs, &m);
        assert_eq!(skeleton_distance(&h, &h).unwrap(), 0.0);
        let zero = ChannelMatrix::zero(h.entries.nrows(), h.entries.ncols(), 0);
        assert_relative_eq!(
            skeleton_distance(&h, &zero).unwrap(),
            h.frobenius_norm(),
            epsilon = 1e-12
        );
        // Element-wise oracle.
        let obs2 = observation_with(
            vec![path((0.2, 1.4), (-0.5, 1.5)), path((-1.3, 1.6), (0.6, 1.4))],
            vec![2e-9, 1e-9],
            10,
        );
        let h2 = true_channel(&obs2, &m);
        let mut acc = 0.0;
        for r in 0..h.entries.nrows() {
            for c in 0..h.entries.ncols() {
                acc += (h.entries[(r, c)] - h2.entries[(r, c)]).norm_sqr();
            }
        }
        assert_relative_eq!(
            skeleton_distance(&h, &h2).unwrap(),
            acc.sqrt(),
            epsilon = 1e-12
        );
        // Shape mismatch is a domain error.
        let narrow = ChannelMatrix::zero(1, 2, 0);
        assert!(skeleton_distance(&h, &narrow).is_err());
    }

    #[test]
    fn spectral_norm_matches_rank_one_case() {
        let a = nalgebra::DMatrix::from_fn(3, 2, |r, c| {
            Complex64::new((r + 1) as f64 * (c + 1) as f64, 0.0)
        });
        // Rank-one real matrix [1;2;3][1,2]: largest singular value is
        // sqrt(14) * sqrt(5).
        let expected = (14.0f64 * 5.0).sqrt();
        assert_relative_eq!(spectral_norm(&a), expected, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn frobenius_distance_is_a_metric(seed_a in 0u64..500, seed_b in 0u64..500, seed_c in 0u64..500) {
            let m = model();
            let mk = |seed: u64| {
                let obs = observation_with(
                    vec![path((0.4, 1.5), (-0.8, 1.6)), path((-1.0, 1.5), (0.3, 1.5))],
                    vec![1e-9, 2e-9],
                    seed,
                );
                true_channel(&obs, &m)
            };
            let (a, b, c) = (mk(seed_a), mk(seed_b), mk(seed_c));
            let dab = skeleton_distance(&a, &b).unwrap();
            let dba = skeleton_distance(&b, &a).unwrap();
            let dac = skeleton_distance(&a, &c).unwrap();
            let dcb = skeleton_distance(&c, &b).unwrap();
            prop_assert!(dab >= 0.0);
            prop_assert!((dab - dba).abs() < 1e-12);
            prop_assert!(dab <= dac + dcb + 1e-12);
        }
    }

    fn controller_fixture() -> (SkeletonDatabase, LinkContext, Vec<GridObservation>) {
        let m = model();
        let ctx = LinkContext {
            model: m,
            sigma2: channel::sigma2_linear(30.0, -174.0, 100.0e6),
            bandwidth_hz: 100.0e6,
            power_floor_gain: channel::db_to_linear(-140.0 - 30.0),
            quantize: None,
        };
        let mut entries = BTreeMap::new();
        let mut observations = Vec::new();
        for gid in 0..3usize {
            let p = path((0.3 + 0.001 * gid as f64, 1.5), (-0.7, 1.6));
            let beta = 1e-9;
            entries.insert(
                gid,
                PathSkeleton {
                    grid_id: gid,
                    paths: vec![SkeletonPath {
                        aod: p.aod,
                        aoa: p.aoa,
                        beta,
                    }],
                },
            );
            observations.push(GridObservation {
                grid_id: gid,
                paths: vec![p],
                betas: vec![beta],
                fading: vec![Complex64::new(3.0e-5, -1.0e-5)],
                unit_error: [0.0, 0.0],
            });
        }
        (SkeletonDatabase::new(entries), ctx, observations)
    }

    #[test]
    fn static_channel_never_updates() {
        let (db, ctx, _) = controller_fixture();
        // Identical observation at every grid: zero drift.
        let obs = GridObservation {
            grid_id: 0,
            paths: vec![path((0.3, 1.5), (-0.7, 1.6))],
            betas: vec![1e-9],
            fading: vec![Complex64::new(3.0e-5, -1.0e-5)],
            unit_error: [0.0, 0.0],
        };
        let params = TrackingParams {
            distance_threshold: 1e-7,
            force_update: false,
            distance_mode: DistanceMode::default(),
        };
        let mut session = DbSession::new(&db, None);
        let mut state = None;
        let mut pointings = Vec::new();
        for _ in 0..3 {
            let out = tracking_step(&mut state, &obs, 0, &mut session, &params, &ctx).unwrap();
            assert!(!out.updated);
            pointings.push(out.beam_pointing);
        }
        assert_eq!(session.query_count(), 1);
        assert!(pointings.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn zero_threshold_updates_every_grid() {
        let (db, ctx, observations) = controller_fixture();
        let params = TrackingParams {
            distance_threshold: 0.0,
            force_update: false,
            distance_mode: DistanceMode::default(),
        };
        let mut session = DbSession::new(&db, None);
        let mut state = None;
        let mut rng = stream(77, &[0]);
        for (gid, base) in observations.iter().enumerate() {
            // Fresh fading per grid so the drift is almost surely nonzero.
            let mut obs = base.clone();
            obs.fading = obs
                .betas
                .iter()
                .map(|&b| sample_fading(b, &mut rng))
                .collect();
            let out = tracking_step(&mut state, &obs, gid, &mut session, &params, &ctx).unwrap();
            assert_eq!(out.updated, gid > 0);
            assert!(out.pilot_slots <= 2 * ctx_skeleton_cap(&db));
        }
        assert_eq!(session.query_count(), 3);
    }

    fn ctx_skeleton_cap(db: &SkeletonDatabase) -> u32 {
        db.grid_ids()
            .filter_map(|g| db.get(g))
            .map(|ps| ps.len() as u32)
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn infinite_threshold_queries_once() {
        let (db, ctx, observations) = controller_fixture();
        let params = TrackingParams {
            distance_threshold: f64::INFINITY,
            force_update: false,
            distance_mode: DistanceMode::default(),
        };
        let mut session = DbSession::new(&db, None);
        let mut state = None;
        let mut rng = stream(78, &[0]);
        for (gid, base) in observations.iter().enumerate() {
            let mut obs = base.clone();
            obs.fading = obs
                .betas
                .iter()
                .map(|&b| sample_fading(b, &mut rng))
                .collect();
            let out = tracking_step(&mut state, &obs, gid, &mut session, &params, &ctx).unwrap();
            assert!(!out.updated);
        }
        assert_eq!(session.query_count(), 1);
    }

    #[test]
    fn pilot_slots_bounded_by_skeleton_size() {
        let (db, ctx, observations) = controller_fixture();
        let cap = ctx_skeleton_cap(&db);
        let params = TrackingParams {
            distance_threshold: 0.0,
            force_update: true,
            distance_mode: DistanceMode::default(),
        };
        let mut session = DbSession::new(&db, None);
        let mut state = None;
        for (gid, obs) in observations.iter().enumerate() {
            let out =
                tracking_step(&mut state, obs, gid, &mut session, &params, &ctx).unwrap();
            // Each measurement round sweeps at most one skeleton; an update
            // grid measures twice.
            let rounds = if out.updated { 2 } else { 1 };
            assert!(out.pilot_slots <= rounds * cap);
        }
    }

    #[test]
    fn populate_builds_one_skeleton_per_grid() {
        let scn = crate::scenario::build_scenario(&crate::scenario::default_map()).unwrap();
        let db = SkeletonDatabase::populate(&scn, 5, 10);
        assert_eq!(db.len(), scn.grid_count);
        for gid in 0..scn.grid_count {
            let ps = db.get(gid).expect("entry per grid");
            assert!(ps.len() <= 5);
            for w in ps.paths.windows(2) {
                assert!(w[0].beta >= w[1].beta);
            }
        }
    }

    #[test]
    fn measurement_strength_decays_with_offset() {
        // A misaligned probe reads a weaker (but not zero) gain, and the decay
        // is steeper for larger arrays.
        let wide = MeasurementModel {
            tx_geometry: ArrayGeometry::new(4, 2),
            rx_geometry: ArrayGeometry::new(2, 1),
            convention: CONV,
            capture_floor: 0.0,
        };
        let narrow = MeasurementModel {
            tx_geometry: ArrayGeometry::new(16, 2),
            rx_geometry: ArrayGeometry::new(2, 1),
            convention: CONV,
            capture_floor: 0.0,
        };
        let p = path((0.9, 1.55), (-0.8, 1.6));
        let obs = GridObservation {
            grid_id: 0,
            paths: vec![p.clone()],
            betas: vec![1e-9],
            fading: vec![Complex64::new(1.0e-5, 0.0)],
            unit_error: [0.0, 0.0],
        };
        let offset = PI * 5.0 / 180.0;
        let probe = PathSkeleton {
            grid_id: 0,
            paths: vec![SkeletonPath {
                aod: (p.aod.0 + offset, p.aod.1),
                aoa: p.aoa,
                beta: 1e-9,
            }],
        };
        let aligned = PathSkeleton {
            grid_id: 0,
            paths: vec![SkeletonPath {
                aod: p.aod,
                aoa: p.aoa,
                beta: 1e-9,
            }],
        };
        for m in [&wide, &narrow] {
            let on = measure_on_skeleton(&obs, &aligned, m)[0].norm_sqr();
            let off = measure_on_skeleton(&obs, &probe, m)[0].norm_sqr();
            assert!(off < on);
        }
        let wide_ratio = measure_on_skeleton(&obs, &probe, &wide)[0].norm_sqr()
            / measure_on_skeleton(&obs, &aligned, &wide)[0].norm_sqr();
        let narrow_ratio = measure_on_skeleton(&obs, &probe, &narrow)[0].norm_sqr()
            / measure_on_skeleton(&obs, &aligned, &narrow)[0].norm_sqr();
        assert!(
            narrow_ratio < wide_ratio,
            "narrow {narrow_ratio} vs wide {wide_ratio}"
        );
    }

    #[test]
    fn random_fixture_sanity() {
        // Smoke check that the controller runs end to end on traced data.
        let scn = crate::scenario::build_scenario(&crate::scenario::default_map()).unwrap();
        let db = SkeletonDatabase::populate(&scn, 5, 10);
        let m = MeasurementModel {
            tx_geometry: ArrayGeometry::new(8, 8),
            rx_geometry: ArrayGeometry::new(4, 4),
            convention: CONV,
            capture_floor: 1e-3,
        };
        let ctx = LinkContext {
            model: m,
            sigma2: channel::sigma2_linear(30.0, -174.0, 100.0e6),
            bandwidth_hz: 100.0e6,
            power_floor_gain: channel::db_to_linear(-140.0 - 30.0),
            quantize: None,
        };
        let obstacles = crate::scenario::sample_obstacles(&scn, 4);
        let mut rng = stream(4, &[2]);
        let params = TrackingParams {
            distance_threshold: 1e-4,
            force_update: false,
            distance_mode: DistanceMode::default(),
        };
        let mut session = DbSession::new(&db, Some(20));
        let mut state = None;
        let mut rates = Vec::new();
        for gid in 0..scn.grid_count {
            let paths = crate::trace::trace_paths(
                &scn,
                &obstacles,
                scn.grid_centers[gid],
                10,
                scn.link.angular_resolution_deg,
            );
            let betas: Vec<f64> = paths
                .iter()
                .map(|p| {
                    channel::large_scale_gain(p, scn.link.frequency_hz, 1.9, 4.5).unwrap_or(0.0)
                })
                .collect();
            let fading: Vec<Complex64> =
                betas.iter().map(|&b| sample_fading(b, &mut rng)).collect();
            let obs = GridObservation {
                grid_id: gid,
                paths,
                betas,
                fading,
                unit_error: [0.0, 0.0],
            };
            let out = tracking_step(&mut state, &obs, gid, &mut session, &params, &ctx).unwrap();
            rates.push(out.rate_bps);
        }
        assert!(session.query_count() >= 1);
        assert!(rates.iter().any(|&r| r > 0.0));
    }
}
