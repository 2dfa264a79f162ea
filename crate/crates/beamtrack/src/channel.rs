//! Narrowband multipath channel: planar-array responses, close-in path loss,
//! circularly-symmetric complex Gaussian fading, and channel matrix assembly.
//!
//! The channel between the two arrays is a scaled sum of rank-one terms, one
//! per propagation path, `H = sqrt(N_tx*N_rx/L) * sum_l h_l a_rx(aoa_l)
//! a_tx(aod_l)^H`, with `h_l ~ CN(0, beta_l)` redrawn once per coherence
//! interval (one grid visit).

use crate::trace::Path;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Propagation constant used throughout (also fixes the 1 m free-space
/// reference at 28 GHz to -61.38 dB).
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("path length must be positive, got {0} m")]
    NonPositiveLength(f64),
    #[error("matrix dimensions {0}x{1} do not match {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// Planar array extent; half-wavelength element spacing is implied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_cols: usize,
    pub n_rows: usize,
}

impl ArrayGeometry {
    pub fn new(n_cols: usize, n_rows: usize) -> Self {
        Self { n_cols, n_rows }
    }

    pub fn total(&self) -> usize {
        self.n_cols * self.n_rows
    }
}

/// Which per-element phase law the steering vectors use.
///
/// `AsPrinted` applies `pi*[n_x sin(theta) sin(phi) + n_y cos(phi)]`.
/// `ConventionalYz` replaces the second term with `n_y cos(theta)`, the usual
/// yz-plane planar-array phase, and is selectable for sensitivity checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseConvention {
    #[default]
    AsPrinted,
    ConventionalYz,
}

/// Per-element spatial frequencies (u for the column index, v for the row
/// index) of a pointing direction under the chosen convention.
pub fn spatial_frequencies(phi: f64, theta: f64, convention: PhaseConvention) -> (f64, f64) {
    let u = theta.sin() * phi.sin();
    let v = match convention {
        PhaseConvention::AsPrinted => phi.cos(),
        PhaseConvention::ConventionalYz => theta.cos(),
    };
    (u, v)
}

/// Unit-norm steering vector; element `(n_x, n_y)` sits at index
/// `n_y * n_cols + n_x` (row-major, column index fastest).
pub fn array_response(
    geometry: ArrayGeometry,
    phi: f64,
    theta: f64,
    convention: PhaseConvention,
) -> DVector<Complex64> {
    let total = geometry.total();
    let (u, v) = spatial_frequencies(phi, theta, convention);
    let scale = 1.0 / (total as f64).sqrt();
    DVector::from_fn(total, |idx, _| {
        let n_x = (idx % geometry.n_cols) as f64;
        let n_y = (idx / geometry.n_cols) as f64;
        let phase = PI * (n_x * u + n_y * v);
        Complex64::from_polar(scale, phase)
    })
}

/// Large-scale linear power gain of a path under the close-in 1 m reference
/// model: `-[FSPL(1 m) + 10 n log10(length) + penetration]` in dB, with the
/// exponent picked by the line-of-sight flag.
pub fn large_scale_gain(
    path: &Path,
    frequency_hz: f64,
    los_exponent: f64,
    nlos_exponent: f64,
) -> Result<f64, ChannelError> {
    if path.length_m <= 0.0 {
        return Err(ChannelError::NonPositiveLength(path.length_m));
    }
    let n = if path.is_los { los_exponent } else { nlos_exponent };
    let fspl_1m = 20.0 * (4.0 * PI * frequency_hz / SPEED_OF_LIGHT).log10();
    let beta_db = -(fspl_1m + 10.0 * n * path.length_m.log10() + path.penetration_loss_db);
    Ok(db_to_linear(beta_db))
}

/// One draw of `CN(0, beta)`. A zero gain yields exactly zero while still
/// consuming the same two normal variates, keeping streams aligned.
pub fn sample_fading<R: Rng + ?Sized>(beta: f64, rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    let s = (beta / 2.0).sqrt();
    Complex64::new(re * s, im * s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathGain {
    pub beta: f64,
    pub h: Complex64,
}

/// Narrowband channel matrix (receive rows, transmit columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub entries: DMatrix<Complex64>,
    pub grid_id: usize,
}

impl ChannelMatrix {
    pub fn zero(n_rx: usize, n_tx: usize, grid_id: usize) -> Self {
        Self {
            entries: DMatrix::zeros(n_rx, n_tx),
            grid_id,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.norm()
    }

    pub fn with_grid(mut self, grid_id: usize) -> Self {
        self.grid_id = grid_id;
        self
    }

    /// Debug dump: one row per line, entries as `re,im` pairs separated by
    /// semicolons, row-major.
    pub fn to_debug_text(&self) -> String {
        let mut out = String::new();
        for r in 0..self.entries.nrows() {
            let row: Vec<String> = (0..self.entries.ncols())
                .map(|c| {
                    let z = self.entries[(r, c)];
                    format!("{},{}", z.re, z.im)
                })
                .collect();
            out.push_str(&row.join(";"));
            out.push('\n');
        }
        out
    }
}

/// Departure and arrival angle pair of one path: ((phi, theta), (phi, theta)).
pub type DirectionPair = ((f64, f64), (f64, f64));

/// Assemble a channel matrix from explicit (aod, aoa) direction pairs and
/// per-path complex coefficients. An empty list yields the zero (outage)
/// matrix rather than an error.
pub fn assemble_from_directions(
    directions: &[DirectionPair],
    coefficients: &[Complex64],
    tx_geometry: ArrayGeometry,
    rx_geometry: ArrayGeometry,
    convention: PhaseConvention,
) -> ChannelMatrix {
    let n_rx = rx_geometry.total();
    let n_tx = tx_geometry.total();
    let count = directions.len().min(coefficients.len());
    let mut entries = DMatrix::<Complex64>::zeros(n_rx, n_tx);
    if count == 0 {
        return ChannelMatrix { entries, grid_id: 0 };
    }
    let scale = ((n_tx * n_rx) as f64 / count as f64).sqrt();
    for (k, (aod, aoa)) in directions.iter().take(count).enumerate() {
        let a_rx = array_response(rx_geometry, aoa.0, aoa.1, convention);
        let a_tx = array_response(tx_geometry, aod.0, aod.1, convention);
        let outer = &a_rx * a_tx.adjoint();
        entries += outer * (coefficients[k] * Complex64::new(scale, 0.0));
    }
    ChannelMatrix { entries, grid_id: 0 }
}

/// Assemble the channel from traced paths and their sampled gains.
pub fn assemble_channel(
    paths: &[Path],
    gains: &[PathGain],
    tx_geometry: ArrayGeometry,
    rx_geometry: ArrayGeometry,
    convention: PhaseConvention,
) -> ChannelMatrix {
    let directions: Vec<DirectionPair> = paths.iter().map(|p| (p.aod, p.aoa)).collect();
    let coefficients: Vec<Complex64> = gains.iter().map(|g| g.h).collect();
    assemble_from_directions(
        &directions,
        &coefficients,
        tx_geometry,
        rx_geometry,
        convention,
    )
}

/// Transmit power over noise power, linear: `P_tx / (N0 * B)`.
pub fn sigma2_linear(tx_power_dbm: f64, noise_density_dbm_per_hz: f64, bandwidth_hz: f64) -> f64 {
    let noise_dbm = noise_density_dbm_per_hz + 10.0 * bandwidth_hz.log10();
    db_to_linear(tx_power_dbm - noise_dbm)
}
