//! Bounded localization error: uniform draws from a disk in the street plane
//! and snapping noisy positions to trajectory grid IDs.

use crate::geometry::Vec3;
use crate::scenario::Scenario;
use rand::Rng;

/// Uncertainty disk radius; the error is uniform over the closed disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorModel {
    pub radius_m: f64,
}

/// Uniform draw from the closed unit disk (rejection from the bounding
/// square, exactly uniform). Scaled by the radius at use time so sweeps over
/// radii share draws.
pub fn sample_unit_disk<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    loop {
        let x = rng.gen_range(-1.0..=1.0);
        let y = rng.gen_range(-1.0..=1.0);
        if x * x + y * y <= 1.0 {
            return [x, y];
        }
    }
}

pub fn sample_error<R: Rng + ?Sized>(model: &ErrorModel, rng: &mut R) -> [f64; 2] {
    let [x, y] = sample_unit_disk(rng);
    [x * model.radius_m, y * model.radius_m]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerceivedGrid {
    pub grid_id: usize,
    /// The noisy position fell outside every grid's capture radius and was
    /// clamped to the nearest centre.
    pub out_of_trajectory: bool,
}

/// Grid ID of the noisy position `true_position + error` by nearest grid
/// centre in the street plane.
pub fn perceived_grid(scenario: &Scenario, true_position: &Vec3, error: [f64; 2]) -> PerceivedGrid {
    let px = true_position.x + error[0];
    let py = true_position.y + error[1];
    let mut best = (0usize, f64::INFINITY);
    for (gid, c) in scenario.grid_centers.iter().enumerate() {
        let d2 = (c.x - px).powi(2) + (c.y - py).powi(2);
        if d2 < best.1 {
            best = (gid, d2);
        }
    }
    PerceivedGrid {
        grid_id: best.0,
        out_of_trajectory: best.1.sqrt() > scenario.grid_size_m,
    }
}
