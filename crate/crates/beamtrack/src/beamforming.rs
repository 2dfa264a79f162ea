//! Beam and combiner construction: steering-vector codebooks over an angular
//! sector, exhaustive and skeleton-based pair selection, SNR and rate.

use crate::channel::{array_response, ArrayGeometry, ChannelMatrix, PhaseConvention};
use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BeamError {
    #[error("empty codebook")]
    EmptyCodebook,
    #[error("codebook geometry does not match channel dimensions")]
    GeometryMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Tx,
    Rx,
}

/// A unit-norm analog beam: the steering vector of its pointing direction.
#[derive(Debug, Clone)]
pub struct BeamVector {
    pub weights: DVector<Complex64>,
    pub pointing: (f64, f64),
    pub side: Side,
}

/// Angular sector to cover, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub phi: (f64, f64),
    pub theta: (f64, f64),
}

impl Sector {
    pub fn new(phi: (f64, f64), theta: (f64, f64)) -> Self {
        Self { phi, theta }
    }

    /// Full azimuth ring with a band of elevations around horizontal.
    pub fn front(elevation_halfwidth_rad: f64) -> Self {
        Self {
            phi: (-PI, PI),
            theta: (
                PI / 2.0 - elevation_halfwidth_rad,
                PI / 2.0 + elevation_halfwidth_rad,
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Codebook {
    pub beams: Vec<BeamVector>,
    pub side: Side,
    pub geometry: ArrayGeometry,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }
}

/// Fraction of the per-axis beamwidth estimate (2/N in sine space) used as
/// grid spacing. The overlap keeps the worst-case two-axis corner of a grid
/// cell inside the half-power contour of its nearest beam.
pub const DEFAULT_OVERLAP_FACTOR: f64 = 0.35;

fn range_with_interior(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    interior: &[f64],
) -> (f64, f64) {
    let mut min = f(lo).min(f(hi));
    let mut max = f(lo).max(f(hi));
    for &x in interior {
        if x > lo && x < hi {
            min = min.min(f(x));
            max = max.max(f(x));
        }
    }
    (min, max)
}

fn centered_grid(lo: f64, hi: f64, spacing: f64) -> Vec<f64> {
    let width = hi - lo;
    if width <= 0.0 || spacing <= 0.0 || !spacing.is_finite() {
        return vec![(lo + hi) / 2.0];
    }
    let count = (width / spacing).ceil().max(1.0) as usize;
    (0..count)
        .map(|i| lo + (i as f64 + 0.5) * width / count as f64)
        .collect()
}

fn in_range(x: f64, range: (f64, f64)) -> bool {
    x >= range.0 - 1e-9 && x <= range.1 + 1e-9
}

/// Column positions for the codebook walk: the column parameter `p` (phi under
/// the printed phase law, theta under the conventional one) is swept over its
/// sector range and a column is emitted whenever cos(p) or sin(p) moved far
/// enough to matter for the v- or u-axis spacing.
fn walk_columns(
    p_range: (f64, f64),
    u_spacing: f64,
    v_spacing: f64,
    u_scale_max: f64,
) -> Vec<f64> {
    let mut columns = vec![p_range.0];
    if p_range.1 <= p_range.0 {
        return columns;
    }
    let steps = 4096;
    let mut last = p_range.0;
    for i in 1..=steps {
        let p = p_range.0 + (p_range.1 - p_range.0) * i as f64 / steps as f64;
        let dv = (p.cos() - last.cos()).abs();
        let du = (p.sin() - last.sin()).abs() * u_scale_max;
        if dv > 0.5 * v_spacing || du > 0.5 * u_spacing {
            columns.push(p);
            last = p;
        }
    }
    if (p_range.1 - last).abs() > 1e-12 {
        columns.push(p_range.1);
    }
    columns
}

/// Steering-vector grid spaced by the per-axis beamwidth estimate (2/N in
/// sine space) times the overlap factor, covering the sector. A sector
/// smaller than one beam still yields a single codeword.
pub fn build_codebook(
    geometry: ArrayGeometry,
    sector: Sector,
    side: Side,
    convention: PhaseConvention,
    overlap_factor: f64,
) -> Codebook {
    let u_spacing = if geometry.n_cols > 1 {
        overlap_factor * 2.0 / geometry.n_cols as f64
    } else {
        f64::INFINITY
    };
    let v_spacing = if geometry.n_rows > 1 {
        overlap_factor * 2.0 / geometry.n_rows as f64
    } else {
        f64::INFINITY
    };

    // Under both phase laws u = sin(theta) sin(phi) and v = cos(p) with p the
    // column parameter; the other angle only scales u.
    let (p_range, other_range) = match convention {
        PhaseConvention::AsPrinted => (sector.phi, sector.theta),
        PhaseConvention::ConventionalYz => (sector.theta, sector.phi),
    };
    let (o_lo, o_hi) = range_with_interior(
        f64::sin,
        other_range.0,
        other_range.1,
        &[PI / 2.0, -PI / 2.0],
    );
    let o_abs_max = o_lo.abs().max(o_hi.abs());

    let mut pointings: Vec<(f64, f64)> = Vec::new();
    for p in walk_columns(p_range, u_spacing, v_spacing, o_abs_max) {
        let sin_p = p.sin();
        let (u_lo, u_hi) = if sin_p >= 0.0 {
            (o_lo * sin_p, o_hi * sin_p)
        } else {
            (o_hi * sin_p, o_lo * sin_p)
        };
        for u in centered_grid(u_lo, u_hi, u_spacing) {
            let pointing = match convention {
                PhaseConvention::AsPrinted => {
                    let theta = if sin_p.abs() < 1e-9 {
                        (sector.theta.0 + sector.theta.1) / 2.0
                    } else {
                        let sin_theta = (u / sin_p).clamp(0.0, 1.0);
                        let a = sin_theta.asin();
                        if in_range(a, sector.theta) {
                            a
                        } else {
                            PI - a
                        }
                    };
                    (p, theta)
                }
                PhaseConvention::ConventionalYz => {
                    let phi = if sin_p.abs() < 1e-9 {
                        (sector.phi.0 + sector.phi.1) / 2.0
                    } else {
                        let sin_phi = (u / sin_p).clamp(-1.0, 1.0);
                        let a = sin_phi.asin();
                        if in_range(a, sector.phi) {
                            a
                        } else {
                            let alt = if a >= 0.0 { PI - a } else { -PI - a };
                            if in_range(alt, sector.phi) {
                                alt
                            } else {
                                a.clamp(sector.phi.0, sector.phi.1)
                            }
                        }
                    };
                    (phi, p)
                }
            };
            pointings.push(pointing);
        }
    }

    // Duplicate spatial frequencies produce identical weights; keep one. Axes
    // with a single element ignore their frequency entirely.
    let mut seen: Vec<(i64, i64)> = Vec::new();
    let mut beams = Vec::new();
    for (phi, theta) in pointings {
        let (u, v) = crate::channel::spatial_frequencies(phi, theta, convention);
        let key_u = if geometry.n_cols > 1 {
            (u * 1e9).round() as i64
        } else {
            0
        };
        let key_v = if geometry.n_rows > 1 {
            (v * 1e9).round() as i64
        } else {
            0
        };
        if seen.contains(&(key_u, key_v)) {
            continue;
        }
        seen.push((key_u, key_v));
        beams.push(BeamVector {
            weights: array_response(geometry, phi, theta, convention),
            pointing: (phi, theta),
            side,
        });
    }

    Codebook {
        beams,
        side,
        geometry,
    }
}

/// Codeword with the strongest coupling to the given beam; ties break toward
/// the lowest index. The codebook must not be empty.
pub fn nearest_codeword<'a>(codebook: &'a Codebook, beam: &BeamVector) -> &'a BeamVector {
    let mut best: (usize, f64) = (0, f64::NEG_INFINITY);
    for (i, candidate) in codebook.beams.iter().enumerate() {
        let coupling = candidate.weights.dotc(&beam.weights).norm_sqr();
        if coupling > best.1 {
            best = (i, coupling);
        }
    }
    &codebook.beams[best.0]
}

/// Steering beam toward an explicit pointing direction.
pub fn steering_beam(
    geometry: ArrayGeometry,
    pointing: (f64, f64),
    side: Side,
    convention: PhaseConvention,
) -> BeamVector {
    BeamVector {
        weights: array_response(geometry, pointing.0, pointing.1, convention),
        pointing,
        side,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamSelection {
    pub tx_index: usize,
    pub rx_index: usize,
    pub objective: f64,
}

/// Beamforming objective for one pair.
pub fn pair_objective(h: &ChannelMatrix, f: &BeamVector, w: &BeamVector) -> f64 {
    let hf = &h.entries * &f.weights;
    w.weights.dotc(&hf).norm_sqr()
}

/// Argmax of `|w^H H f|^2` over the codebook product; ties break toward the
/// lowest (tx index, rx index).
pub fn select_beams_exhaustive(
    h: &ChannelMatrix,
    tx_codebook: &Codebook,
    rx_codebook: &Codebook,
) -> Result<BeamSelection, BeamError> {
    if tx_codebook.is_empty() || rx_codebook.is_empty() {
        return Err(BeamError::EmptyCodebook);
    }
    if h.entries.ncols() != tx_codebook.geometry.total()
        || h.entries.nrows() != rx_codebook.geometry.total()
    {
        return Err(BeamError::GeometryMismatch);
    }
    let mut best = BeamSelection {
        tx_index: 0,
        rx_index: 0,
        objective: f64::NEG_INFINITY,
    };
    for (ti, f) in tx_codebook.beams.iter().enumerate() {
        let hf = &h.entries * &f.weights;
        for (ri, w) in rx_codebook.beams.iter().enumerate() {
            let objective = w.weights.dotc(&hf).norm_sqr();
            if objective > best.objective {
                best = BeamSelection {
                    tx_index: ti,
                    rx_index: ri,
                    objective,
                };
            }
        }
    }
    Ok(best)
}

/// Index of the strongest measured skeleton path, or `None` when every
/// measurement sits at or below the power floor (outage). Ties break toward
/// the lowest index.
pub fn select_beams_skeleton(measured_power: &[f64], power_floor: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in measured_power.iter().enumerate() {
        if p <= power_floor {
            continue;
        }
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i)
}

/// `sigma2 * |w^H H f|^2`, with `sigma2` the transmit-to-noise power ratio.
pub fn snr(h: &ChannelMatrix, f: &BeamVector, w: &BeamVector, sigma2: f64) -> f64 {
    sigma2 * pair_objective(h, f, w)
}

/// Link capacity at the given SNR.
pub fn rate(snr: f64, bandwidth_hz: f64) -> f64 {
    bandwidth_hz * (1.0 + snr).log2()
}

/// Sum of per-grid rates along a trajectory.
pub fn trajectory_rate(rates: &[f64]) -> f64 {
    rates.iter().sum()
}
