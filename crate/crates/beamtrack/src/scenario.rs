//! Urban scene description: buildings, the base-station pose, the trajectory
//! grid, stochastic street blockers, and the scenario file loader.

use crate::geometry::{Aabb, Polygon, Vec3};
use crate::rng::{self, lane};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("failed to read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse scenario file: {0}")]
    Parse(#[from] toml::de::Error),
}

fn config_err(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Brick,
    Glass,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildingSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub height_m: f64,
    pub material: Material,
}

/// One class of temporary street blocker. The penetration loss of each
/// sampled blocker is drawn uniformly from `loss_db_choices` per realization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockerSpec {
    pub width_m: f64,
    pub height_m: f64,
    pub weight: f64,
    pub loss_db_choices: Vec<f64>,
}

fn default_frequency() -> f64 {
    28.0e9
}
fn default_bandwidth() -> f64 {
    100.0e6
}
fn default_tx_power() -> f64 {
    30.0
}
fn default_noise_density() -> f64 {
    -174.0
}
fn default_los_exponent() -> f64 {
    1.9
}
fn default_nlos_exponent() -> f64 {
    4.5
}
fn default_brick_loss() -> f64 {
    28.3
}
fn default_glass_loss() -> f64 {
    3.9
}
fn default_power_floor() -> f64 {
    -140.0
}
fn default_angular_resolution() -> f64 {
    0.1
}

/// Link-budget parameters shared by the tracer and the channel model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinkConfig {
    #[serde(default = "default_frequency")]
    pub frequency_hz: f64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_hz: f64,
    #[serde(default = "default_tx_power")]
    pub tx_power_dbm: f64,
    #[serde(default = "default_noise_density")]
    pub noise_density_dbm_per_hz: f64,
    #[serde(default = "default_los_exponent")]
    pub los_exponent: f64,
    #[serde(default = "default_nlos_exponent")]
    pub nlos_exponent: f64,
    #[serde(default = "default_brick_loss")]
    pub brick_penetration_db: f64,
    #[serde(default = "default_glass_loss")]
    pub glass_penetration_db: f64,
    /// Paths received below this level are dropped by the tracer.
    #[serde(default = "default_power_floor")]
    pub power_floor_dbm: f64,
    #[serde(default = "default_angular_resolution")]
    pub angular_resolution_deg: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            frequency_hz: default_frequency(),
            bandwidth_hz: default_bandwidth(),
            tx_power_dbm: default_tx_power(),
            noise_density_dbm_per_hz: default_noise_density(),
            los_exponent: default_los_exponent(),
            nlos_exponent: default_nlos_exponent(),
            brick_penetration_db: default_brick_loss(),
            glass_penetration_db: default_glass_loss(),
            power_floor_dbm: default_power_floor(),
            angular_resolution_deg: default_angular_resolution(),
        }
    }
}

fn default_blocker_specs() -> Vec<BlockerSpec> {
    vec![
        // Pedestrians.
        BlockerSpec {
            width_m: 0.5,
            height_m: 1.5,
            weight: 0.5,
            loss_db_choices: vec![28.3, 3.9],
        },
        // Low and high vehicles.
        BlockerSpec {
            width_m: 4.0,
            height_m: 1.0,
            weight: 0.25,
            loss_db_choices: vec![28.3, 3.9],
        },
        BlockerSpec {
            width_m: 4.0,
            height_m: 3.0,
            weight: 0.25,
            loss_db_choices: vec![28.3, 3.9],
        },
    ]
}

/// On-disk scenario description (TOML). See the repository README for the
/// schema and units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub buildings: Vec<BuildingSpec>,
    pub bs_position: [f64; 3],
    #[serde(default)]
    pub bs_height_m: Option<f64>,
    /// Polyline the user walks along, metres; z is the device height.
    pub trajectory: Vec<[f64; 3]>,
    pub grid_size_m: f64,
    #[serde(default)]
    pub blocker_density_per_m2: f64,
    #[serde(default = "default_blocker_specs")]
    pub blocker_specs: Vec<BlockerSpec>,
    /// Polygon within which blockers may spawn.
    #[serde(default)]
    pub street_region: Vec<[f64; 2]>,
    #[serde(default)]
    pub link: LinkConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Building {
    pub bounds: Aabb,
    pub material: Material,
}

/// Validated scene with derived grid geometry. Immutable after construction
/// and safe to share across concurrent trials.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub buildings: Vec<Building>,
    pub bs_position: Vec3,
    pub bs_height_m: f64,
    pub trajectory: Vec<Vec3>,
    pub trajectory_length_m: f64,
    pub grid_size_m: f64,
    pub grid_count: usize,
    pub grid_centers: Vec<Vec3>,
    pub blocker_density_per_m2: f64,
    pub blocker_specs: Vec<BlockerSpec>,
    pub street_region: Polygon,
    pub link: LinkConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blocker {
    pub position: Vec3,
    pub width_m: f64,
    pub height_m: f64,
    pub loss_db: f64,
}

impl Blocker {
    pub fn bounds(&self) -> Aabb {
        let half = self.width_m / 2.0;
        Aabb::new(
            Vec3::new(self.position.x - half, self.position.y - half, 0.0),
            Vec3::new(self.position.x + half, self.position.y + half, self.height_m),
        )
    }
}

/// One realization of the temporary street blockers.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleSet {
    pub blockers: Vec<Blocker>,
    pub seed: u64,
}

impl ObstacleSet {
    pub fn empty() -> Self {
        Self {
            blockers: Vec::new(),
            seed: 0,
        }
    }
}

fn polyline_length(points: &[Vec3]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

fn point_at_arclength(points: &[Vec3], s: f64) -> Vec3 {
    let mut remaining = s.max(0.0);
    for w in points.windows(2) {
        let seg = w[1] - w[0];
        let len = seg.norm();
        if remaining <= len || len == 0.0 {
            if len == 0.0 {
                continue;
            }
            return w[0] + seg * (remaining / len);
        }
        remaining -= len;
    }
    *points.last().expect("non-empty polyline")
}

/// Build and validate a scenario; deterministic (no RNG involved).
pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario, ScenarioError> {
    if config.trajectory.len() < 2 {
        return Err(config_err("trajectory", "needs at least two points"));
    }
    let trajectory: Vec<Vec3> = config
        .trajectory
        .iter()
        .map(|p| Vec3::new(p[0], p[1], p[2]))
        .collect();
    let trajectory_length_m = polyline_length(&trajectory);
    if trajectory_length_m <= 0.0 {
        return Err(config_err("trajectory", "zero total length"));
    }
    if config.grid_size_m <= 0.0 {
        return Err(config_err("grid_size_m", "must be positive"));
    }
    if config.blocker_density_per_m2 < 0.0 {
        return Err(config_err("blocker_density_per_m2", "must be non-negative"));
    }

    let mut buildings = Vec::with_capacity(config.buildings.len());
    for (i, b) in config.buildings.iter().enumerate() {
        if b.x_range[1] <= b.x_range[0] || b.y_range[1] <= b.y_range[0] || b.height_m <= 0.0 {
            return Err(config_err(
                &format!("buildings[{i}]"),
                "footprint extents and height must be positive",
            ));
        }
        buildings.push(Building {
            bounds: Aabb::new(
                Vec3::new(b.x_range[0], b.y_range[0], 0.0),
                Vec3::new(b.x_range[1], b.y_range[1], b.height_m),
            ),
            material: b.material,
        });
    }

    let bs_position = Vec3::new(
        config.bs_position[0],
        config.bs_position[1],
        config.bs_position[2],
    );
    let bs_height_m = config.bs_height_m.unwrap_or(bs_position.z);
    if bs_height_m <= 0.0 {
        return Err(config_err("bs_height_m", "must be positive"));
    }
    if (bs_height_m - bs_position.z).abs() > 1e-9 {
        return Err(config_err(
            "bs_height_m",
            "inconsistent with bs_position z component",
        ));
    }
    if buildings.iter().any(|b| {
        let eps = 1e-9;
        bs_position.x > b.bounds.min.x + eps
            && bs_position.x < b.bounds.max.x - eps
            && bs_position.y > b.bounds.min.y + eps
            && bs_position.y < b.bounds.max.y - eps
            && bs_position.z < b.bounds.max.z - eps
    }) {
        return Err(config_err("bs_position", "lies inside a building"));
    }

    for (i, spec) in config.blocker_specs.iter().enumerate() {
        if spec.width_m <= 0.0 || spec.height_m <= 0.0 {
            return Err(config_err(
                &format!("blocker_specs[{i}]"),
                "dimensions must be positive",
            ));
        }
        if spec.weight < 0.0 {
            return Err(config_err(
                &format!("blocker_specs[{i}].weight"),
                "must be non-negative",
            ));
        }
        if spec.loss_db_choices.is_empty() {
            return Err(config_err(
                &format!("blocker_specs[{i}].loss_db_choices"),
                "must not be empty",
            ));
        }
    }

    let street_region = Polygon::new(config.street_region.clone());
    if config.blocker_density_per_m2 > 0.0 {
        if street_region.vertex_count() < 3 || street_region.area() <= 0.0 {
            return Err(config_err(
                "street_region",
                "needs a polygon with positive area when blockers are enabled",
            ));
        }
        let total_weight: f64 = config.blocker_specs.iter().map(|s| s.weight).sum();
        if config.blocker_specs.is_empty() || total_weight <= 0.0 {
            return Err(config_err(
                "blocker_specs",
                "need at least one spec with positive weight when blockers are enabled",
            ));
        }
    }

    if config.link.frequency_hz <= 0.0 || config.link.bandwidth_hz <= 0.0 {
        return Err(config_err("link", "frequency and bandwidth must be positive"));
    }

    let grid_count = (trajectory_length_m / config.grid_size_m).ceil() as usize;
    let grid_centers: Vec<Vec3> = (0..grid_count)
        .map(|i| {
            let start = i as f64 * config.grid_size_m;
            let end = (start + config.grid_size_m).min(trajectory_length_m);
            point_at_arclength(&trajectory, (start + end) / 2.0)
        })
        .collect();

    Ok(Scenario {
        buildings,
        bs_position,
        bs_height_m,
        trajectory,
        trajectory_length_m,
        grid_size_m: config.grid_size_m,
        grid_count,
        grid_centers,
        blocker_density_per_m2: config.blocker_density_per_m2,
        blocker_specs: config.blocker_specs.clone(),
        street_region,
        link: config.link,
    })
}

/// Load a scenario config from a TOML file and build it.
pub fn load_scenario(path: &std::path::Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    let config: ScenarioConfig = toml::from_str(&text)?;
    build_scenario(&config)
}

/// Draw one blocker realization. The same seed always yields an identical
/// set; draws come from a dedicated stream so other lanes stay aligned.
pub fn sample_obstacles(scenario: &Scenario, seed: u64) -> ObstacleSet {
    let mut rng = rng::stream(seed, &[lane::OBSTACLES]);
    let area = scenario.street_region.area();
    let mean = scenario.blocker_density_per_m2 * area;
    if mean <= 0.0 || scenario.blocker_specs.is_empty() {
        return ObstacleSet {
            blockers: Vec::new(),
            seed,
        };
    }
    let count = Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize;
    let weights =
        WeightedIndex::new(scenario.blocker_specs.iter().map(|s| s.weight)).expect("weights");
    let (lo, hi) = scenario.street_region.bounding_box();
    let mut blockers = Vec::with_capacity(count);
    for _ in 0..count {
        let position = loop {
            let x = rng.gen_range(lo[0]..hi[0]);
            let y = rng.gen_range(lo[1]..hi[1]);
            if scenario.street_region.contains([x, y]) {
                break [x, y];
            }
        };
        let spec = &scenario.blocker_specs[weights.sample(&mut rng)];
        let loss_db = spec.loss_db_choices[rng.gen_range(0..spec.loss_db_choices.len())];
        blockers.push(Blocker {
            position: Vec3::new(position[0], position[1], 0.0),
            width_m: spec.width_m,
            height_m: spec.height_m,
            loss_db,
        });
    }
    ObstacleSet { blockers, seed }
}

/// Built-in street map: an L-shaped walk past a wall-mounted base station,
/// with brick and glass frontages on both sides. Illustrative geometry; all
/// dimensions in metres.
pub fn default_map() -> ScenarioConfig {
    default_map_with_length(150.0)
}

/// Same map with the trajectory truncated to `length_m` along the walk.
pub fn default_map_with_length(length_m: f64) -> ScenarioConfig {
    let leg_a = 105.0_f64.min(length_m);
    let leg_b = (length_m - leg_a).max(0.0);
    let mut trajectory = vec![[5.0, 5.0, 1.5], [5.0 + leg_a, 5.0, 1.5]];
    if leg_b > 0.0 {
        trajectory.push([5.0 + leg_a, 5.0 + leg_b, 1.5]);
    }
    ScenarioConfig {
        buildings: vec![
            // South frontage of the main street.
            BuildingSpec {
                x_range: [0.0, 50.0],
                y_range: [-15.0, 0.0],
                height_m: 18.0,
                material: Material::Brick,
            },
            BuildingSpec {
                x_range: [52.0, 100.0],
                y_range: [-15.0, 0.0],
                height_m: 15.0,
                material: Material::Glass,
            },
            BuildingSpec {
                x_range: [102.0, 160.0],
                y_range: [-15.0, 0.0],
                height_m: 21.0,
                material: Material::Brick,
            },
            // North frontage, west of the cross street.
            BuildingSpec {
                x_range: [0.0, 45.0],
                y_range: [20.0, 35.0],
                height_m: 16.0,
                material: Material::Glass,
            },
            BuildingSpec {
                x_range: [47.0, 98.0],
                y_range: [20.0, 35.0],
                height_m: 20.0,
                material: Material::Brick,
            },
            // Deep block east of the cross street.
            BuildingSpec {
                x_range: [122.0, 150.0],
                y_range: [20.0, 90.0],
                height_m: 22.0,
                material: Material::Brick,
            },
            // Block west of the cross street, north section.
            BuildingSpec {
                x_range: [70.0, 100.0],
                y_range: [37.0, 90.0],
                height_m: 17.0,
                material: Material::Glass,
            },
        ],
        // Mounted on the street-facing wall of the brick building at y = 20.
        bs_position: [60.0, 19.9, 6.0],
        bs_height_m: Some(6.0),
        trajectory,
        grid_size_m: 3.0,
        blocker_density_per_m2: 9.0e-3,
        blocker_specs: default_blocker_specs(),
        street_region: vec![
            [0.0, 0.0],
            [160.0, 0.0],
            [160.0, 20.0],
            [120.0, 20.0],
            [120.0, 90.0],
            [100.0, 90.0],
            [100.0, 20.0],
            [0.0, 20.0],
        ],
        link: LinkConfig::default(),
    }
}
