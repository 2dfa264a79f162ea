//! Outer search loops: golden-section search over the drift threshold under a
//! query-budget chance constraint, and the largest tolerable localization
//! radius over a candidate set.
//!
//! Both searches run on a Monte-Carlo objective with common random numbers:
//! per-trial observation contexts are drawn once and shared across every
//! probed parameter value.

use crate::harness::{
    aggregate_results, build_trial_context, run_trial, Controller, ExperimentConfig, LinkSetup,
    TrialContext,
};
use crate::scenario::Scenario;
use crate::skeleton::SkeletonDatabase;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("invalid search setup: {0}")]
    Invalid(String),
    #[error("no feasible point: {summary}")]
    Infeasible {
        summary: String,
        probes: Vec<Probe>,
    },
}

/// Monte-Carlo estimate of the objective at one parameter value.
#[derive(Debug, Clone, Serialize)]
pub struct ObjectiveEstimate {
    pub mean_trajectory_rate_bps: f64,
    pub stderr_trajectory_rate_bps: f64,
    pub per_grid_mean_rate_bps: Vec<f64>,
    pub per_grid_stderr_bps: Vec<f64>,
    pub min_grid_rate_bps: f64,
    pub budget_violation_prob: f64,
    pub mean_query_count: f64,
    pub trials: usize,
}

/// One probe of an outer search, for the optimizer trace file.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Probe {
    pub param: f64,
    pub objective: f64,
    pub violation_prob: f64,
    pub stderr: f64,
    pub feasible: bool,
}

/// Reusable Monte-Carlo evaluator: trial contexts drawn once, probed many
/// times. Probes at different thresholds or radii therefore consume identical
/// obstacle/fading/error draws.
pub struct Evaluator<'a> {
    scenario: &'a Scenario,
    db: &'a SkeletonDatabase,
    setup: LinkSetup,
    contexts: Vec<TrialContext>,
    u_max: u32,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        scenario: &'a Scenario,
        db: &'a SkeletonDatabase,
        setup: LinkSetup,
        trials: usize,
        master_seed: u64,
        resample_obstacles_per_grid: bool,
        u_max: u32,
    ) -> Self {
        let contexts = (0..trials as u64)
            .into_par_iter()
            .map(|trial| {
                build_trial_context(
                    scenario,
                    master_seed,
                    trial,
                    &setup,
                    resample_obstacles_per_grid,
                )
            })
            .collect();
        Self {
            scenario,
            db,
            setup,
            contexts,
            u_max,
        }
    }

    pub fn trials(&self) -> usize {
        self.contexts.len()
    }

    pub fn setup(&self) -> &LinkSetup {
        &self.setup
    }

    /// Run the tracking controller at (threshold, radius) over every trial.
    pub fn evaluate(&self, distance_threshold: f64, error_radius_m: f64) -> ObjectiveEstimate {
        let results: Vec<_> = self
            .contexts
            .par_iter()
            .map(|ctx| {
                run_trial(
                    self.scenario,
                    self.db,
                    ctx,
                    &self.setup,
                    Controller::SkeletonTracking { distance_threshold },
                    error_radius_m,
                    self.u_max,
                )
            })
            .collect();
        let agg = aggregate_results(&results, error_radius_m, f64::INFINITY);
        ObjectiveEstimate {
            mean_trajectory_rate_bps: agg.mean_trajectory_rate_bps,
            stderr_trajectory_rate_bps: agg.stderr_trajectory_rate_bps,
            per_grid_mean_rate_bps: agg.per_grid_mean_rate_bps,
            per_grid_stderr_bps: agg.per_grid_stderr_bps,
            min_grid_rate_bps: agg.min_grid_mean_rate_bps,
            budget_violation_prob: agg.budget_violation_prob,
            mean_query_count: agg.mean_query_count,
            trials: results.len(),
        }
    }
}

/// One-shot convenience wrapper around [`Evaluator`].
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    scenario: &Scenario,
    db: &SkeletonDatabase,
    cfg: &ExperimentConfig,
    distance_threshold: f64,
    error_radius_m: f64,
    trials: usize,
    master_seed: u64,
) -> ObjectiveEstimate {
    let setup = LinkSetup::new(scenario, cfg.antennas, &cfg.sim);
    let ev = Evaluator::new(
        scenario,
        db,
        setup,
        trials,
        master_seed,
        cfg.sim.resample_obstacles_per_grid,
        cfg.u_max,
    );
    ev.evaluate(distance_threshold, error_radius_m)
}

#[derive(Debug, Clone)]
pub struct GoldenResult {
    /// Best probe seen (ties resolve toward the smaller argument).
    pub best_x: f64,
    pub best_value: f64,
    pub evaluations: Vec<(f64, f64)>,
    pub iterations: usize,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for the maximum of `f` on `[lo, hi]`. The bracket
/// shrinks by the golden ratio each iteration until it narrows below `tol`;
/// `-inf` values (infeasible probes) are legal. Returns the best probe seen,
/// including the bracket endpoints.
pub fn golden_section_max(
    mut f: impl FnMut(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<GoldenResult, OptimizeError> {
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(OptimizeError::Invalid(format!(
            "bracket [{lo}, {hi}] is empty"
        )));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(OptimizeError::Invalid("tolerance must be positive".into()));
    }
    let mut evaluations = Vec::new();
    let probe = |x: f64, evals: &mut Vec<(f64, f64)>, f: &mut dyn FnMut(f64) -> f64| {
        let v = f(x);
        evals.push((x, v));
        v
    };

    let mut a = lo;
    let mut b = hi;
    probe(a, &mut evaluations, &mut f);
    probe(b, &mut evaluations, &mut f);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = probe(x1, &mut evaluations, &mut f);
    let mut f2 = probe(x2, &mut evaluations, &mut f);
    let mut iterations = 0usize;
    while (b - a) > tol && iterations < 200 {
        if f1 > f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = probe(x1, &mut evaluations, &mut f);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = probe(x2, &mut evaluations, &mut f);
        }
        iterations += 1;
    }

    let mut best_x = f64::NAN;
    let mut best_value = f64::NEG_INFINITY;
    for &(x, v) in &evaluations {
        if v > best_value || (v == best_value && x < best_x) {
            best_x = x;
            best_value = v;
        }
    }
    Ok(GoldenResult {
        best_x,
        best_value,
        evaluations,
        iterations,
    })
}

#[derive(Debug, Clone)]
pub struct ThresholdSearch {
    pub threshold: f64,
    pub estimate: ObjectiveEstimate,
    pub probes: Vec<Probe>,
    pub grid_probes: Vec<Probe>,
    /// The coarse grid argmax disagrees with the golden-section result by
    /// more than one grid cell; the Monte-Carlo objective may not be unimodal
    /// over this bracket.
    pub grid_disagrees: bool,
    pub iterations: usize,
}

/// Golden-section search for the drift threshold maximizing the mean
/// trajectory rate subject to `Pr{U > U_max} <= delta`. Infeasible probes
/// score `-inf`; an 11-point grid scan cross-checks the result.
pub fn optimize_threshold(
    evaluator: &Evaluator,
    error_radius_m: f64,
    delta: f64,
    bracket: (f64, f64),
    tol: f64,
) -> Result<ThresholdSearch, OptimizeError> {
    let mut probes: Vec<Probe> = Vec::new();
    let mut objective = |t: f64| {
        let est = evaluator.evaluate(t, error_radius_m);
        let feasible = est.budget_violation_prob <= delta;
        probes.push(Probe {
            param: t,
            objective: est.mean_trajectory_rate_bps,
            violation_prob: est.budget_violation_prob,
            stderr: est.stderr_trajectory_rate_bps,
            feasible,
        });
        if feasible {
            est.mean_trajectory_rate_bps
        } else {
            f64::NEG_INFINITY
        }
    };
    let golden = golden_section_max(&mut objective, bracket.0, bracket.1, tol)?;

    // Coarse cross-check on an 11-point grid over the same bracket.
    let mut grid_probes = Vec::with_capacity(11);
    let mut grid_best: Option<(f64, f64)> = None;
    for i in 0..11 {
        let t = bracket.0 + (bracket.1 - bracket.0) * i as f64 / 10.0;
        let est = evaluator.evaluate(t, error_radius_m);
        let feasible = est.budget_violation_prob <= delta;
        let value = if feasible {
            est.mean_trajectory_rate_bps
        } else {
            f64::NEG_INFINITY
        };
        grid_probes.push(Probe {
            param: t,
            objective: est.mean_trajectory_rate_bps,
            violation_prob: est.budget_violation_prob,
            stderr: est.stderr_trajectory_rate_bps,
            feasible,
        });
        if value > grid_best.map_or(f64::NEG_INFINITY, |(_, v)| v) {
            grid_best = Some((t, value));
        }
    }

    if golden.best_value == f64::NEG_INFINITY {
        let curve = probes
            .iter()
            .map(|p| format!("T={:.3e}: violation {:.3}", p.param, p.violation_prob))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(OptimizeError::Infeasible {
            summary: format!(
                "no threshold in [{}, {}] meets Pr{{U > U_max}} <= {delta} ({curve})",
                bracket.0, bracket.1
            ),
            probes,
        });
    }

    let cell = (bracket.1 - bracket.0) / 10.0;
    let grid_disagrees = grid_best
        .map(|(t, v)| v > f64::NEG_INFINITY && (t - golden.best_x).abs() > cell + 1e-12)
        .unwrap_or(false);

    Ok(ThresholdSearch {
        threshold: golden.best_x,
        estimate: evaluator.evaluate(golden.best_x, error_radius_m),
        probes,
        grid_probes,
        grid_disagrees,
        iterations: golden.iterations,
    })
}

/// Golden-section search over the threshold where a probe is only feasible
/// when it meets the query budget *and* keeps every grid's mean rate above
/// the floor. Used by the per-radius retuning policy.
pub fn optimize_threshold_constrained(
    evaluator: &Evaluator,
    error_radius_m: f64,
    delta: f64,
    rate_threshold_bps: f64,
    bracket: (f64, f64),
    tol: f64,
) -> Result<ThresholdSearch, OptimizeError> {
    let mut probes: Vec<Probe> = Vec::new();
    let mut objective = |t: f64| {
        let est = evaluator.evaluate(t, error_radius_m);
        let feasible = est.budget_violation_prob <= delta
            && est.min_grid_rate_bps >= rate_threshold_bps;
        probes.push(Probe {
            param: t,
            objective: est.mean_trajectory_rate_bps,
            violation_prob: est.budget_violation_prob,
            stderr: est.stderr_trajectory_rate_bps,
            feasible,
        });
        if feasible {
            est.mean_trajectory_rate_bps
        } else {
            f64::NEG_INFINITY
        }
    };
    let golden = golden_section_max(&mut objective, bracket.0, bracket.1, tol)?;
    if golden.best_value == f64::NEG_INFINITY {
        return Err(OptimizeError::Infeasible {
            summary: format!(
                "no threshold in [{}, {}] meets the budget and rate constraints at r = {error_radius_m} m",
                bracket.0, bracket.1
            ),
            probes,
        });
    }
    let estimate = evaluator.evaluate(golden.best_x, error_radius_m);
    Ok(ThresholdSearch {
        threshold: golden.best_x,
        estimate,
        probes,
        grid_probes: Vec::new(),
        grid_disagrees: false,
        iterations: golden.iterations,
    })
}

/// How the radius search picks the threshold for each candidate radius.
#[derive(Debug, Clone, Copy)]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// Tune once at r = 0 and reuse for every radius.
    TuneAtZero { bracket: (f64, f64), tol: f64 },
    /// Re-tune for every candidate radius.
    TunePerRadius { bracket: (f64, f64), tol: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct RadiusCandidate {
    pub radius_m: f64,
    pub threshold: f64,
    pub estimate: ObjectiveEstimate,
    pub feasible: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RadiusSearch {
    /// Largest radius meeting both constraints.
    pub r_star: f64,
    /// Radius maximizing the minimum per-grid rate among feasible candidates
    /// (ties toward the larger radius).
    pub argmax_min_rate_radius: f64,
    pub candidates: Vec<RadiusCandidate>,
}

/// Largest tolerable localization radius over the candidate set: every
/// radius is evaluated (with its tuned or supplied threshold) and the largest
/// one satisfying `min_i E[R_i] >= rate_threshold` and the budget chance
/// constraint wins.
pub fn max_tolerable_radius(
    evaluator: &Evaluator,
    gamma: &[f64],
    delta: f64,
    rate_threshold_bps: f64,
    policy: ThresholdPolicy,
) -> Result<RadiusSearch, OptimizeError> {
    if gamma.is_empty() {
        return Err(OptimizeError::Invalid("candidate set is empty".into()));
    }
    if gamma.windows(2).any(|w| w[0] > w[1]) {
        return Err(OptimizeError::Invalid(
            "candidate radii must be sorted ascending".into(),
        ));
    }

    let shared_threshold = match policy {
        ThresholdPolicy::Fixed(t) => Some(t),
        ThresholdPolicy::TuneAtZero { bracket, tol } => {
            Some(optimize_threshold(evaluator, 0.0, delta, bracket, tol)?.threshold)
        }
        ThresholdPolicy::TunePerRadius { .. } => None,
    };

    let mut candidates = Vec::with_capacity(gamma.len());
    for &r in gamma {
        let threshold = match (shared_threshold, policy) {
            (Some(t), _) => Some(t),
            (None, ThresholdPolicy::TunePerRadius { bracket, tol }) => {
                match optimize_threshold_constrained(
                    evaluator,
                    r,
                    delta,
                    rate_threshold_bps,
                    bracket,
                    tol,
                ) {
                    Ok(search) => Some(search.threshold),
                    Err(OptimizeError::Infeasible { .. }) => None,
                    Err(e) => return Err(e),
                }
            }
            _ => unreachable!(),
        };
        let candidate = match threshold {
            Some(threshold) => {
                let estimate = evaluator.evaluate(threshold, r);
                let budget_ok = estimate.budget_violation_prob <= delta;
                let rate_ok = estimate.min_grid_rate_bps >= rate_threshold_bps;
                let failure = match (budget_ok, rate_ok) {
                    (true, true) => None,
                    (false, true) => Some(format!(
                        "budget violation prob {:.3} > delta {delta}",
                        estimate.budget_violation_prob
                    )),
                    (true, false) => Some(format!(
                        "min grid rate {:.3} Mbps < threshold {:.3} Mbps",
                        estimate.min_grid_rate_bps / 1e6,
                        rate_threshold_bps / 1e6
                    )),
                    (false, false) => Some("budget and rate constraints both violated".into()),
                };
                RadiusCandidate {
                    radius_m: r,
                    threshold,
                    feasible: failure.is_none(),
                    failure,
                    estimate,
                }
            }
            None => RadiusCandidate {
                radius_m: r,
                threshold: f64::NAN,
                feasible: false,
                failure: Some("no threshold in the bracket meets both constraints".into()),
                estimate: evaluator.evaluate(f64::INFINITY, r),
            },
        };
        candidates.push(candidate);
    }

    let r_star = candidates
        .iter()
        .rev()
        .find(|c| c.feasible)
        .map(|c| c.radius_m);
    match r_star {
        None => {
            let summary = candidates
                .iter()
                .map(|c| {
                    format!(
                        "r={} m: {}",
                        c.radius_m,
                        c.failure.as_deref().unwrap_or("feasible")
                    )
                })
                .collect::<Vec<_>>()
                .join("; ");
            Err(OptimizeError::Infeasible {
                summary,
                probes: candidates
                    .iter()
                    .map(|c| Probe {
                        param: c.radius_m,
                        objective: c.estimate.min_grid_rate_bps,
                        violation_prob: c.estimate.budget_violation_prob,
                        stderr: c.estimate.stderr_trajectory_rate_bps,
                        feasible: c.feasible,
                    })
                    .collect(),
            })
        }
        Some(r_star) => {
            let mut argmax = (f64::NEG_INFINITY, 0.0);
            for c in candidates.iter().filter(|c| c.feasible) {
                if c.estimate.min_grid_rate_bps >= argmax.0 {
                    argmax = (c.estimate.min_grid_rate_bps, c.radius_m);
                }
            }
            Ok(RadiusSearch {
                r_star,
                argmax_min_rate_radius: argmax.1,
                candidates,
            })
        }
    }
}

/// Probe records as a CSV trace (one row per probe).
pub fn probes_to_csv(probes: &[Probe]) -> String {
    let mut out = String::from("param,objective,violation_prob,stderr,feasible\n");
    for p in probes {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.param, p.objective, p.violation_prob, p.stderr, p.feasible
        ));
    }
    out
}
