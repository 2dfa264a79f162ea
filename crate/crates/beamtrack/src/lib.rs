//! Link-level simulator for location-aided analog beamforming on a mmWave
//! downlink.
//!
//! A base station keeps a per-grid database of path skeletons (the strongest
//! few propagation paths of each trajectory grid). A moving user is served by
//! steering beams at skeleton directions; pilot measurements through the
//! current reference skeleton drive a channel-drift test that decides when to
//! query the database again. Location input is noisy (uniform over a disk),
//! and two outer searches tune the drift threshold under a query budget and
//! find the largest tolerable error radius.
//!
//! Modules mirror the pipeline: [`scenario`] builds the scene and traces
//! paths ([`trace`]), [`channel`] turns paths into matrices, [`beamforming`]
//! selects beam pairs and scores them, [`skeleton`] tracks the reference,
//! [`localization`] perturbs positions, [`optimize`] runs the outer searches,
//! and [`harness`] orchestrates seeded Monte-Carlo experiments.

pub mod beamforming;
pub mod channel;
pub mod geometry;
pub mod harness;
pub mod localization;
pub mod optimize;
pub mod rng;
pub mod scenario;
pub mod skeleton;
pub mod trace;

pub use channel::{ArrayGeometry, ChannelMatrix, PhaseConvention};
pub use harness::{AntennaPreset, Controller, ExperimentConfig, TrajectoryResult};
pub use scenario::{Scenario, ScenarioConfig};
pub use skeleton::{PathSkeleton, SkeletonDatabase};
pub use trace::Path;
