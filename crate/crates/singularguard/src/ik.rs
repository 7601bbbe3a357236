//! Position-only inverse kinematics with singularity filtering.
//!
//! Each solve runs damped Gauss-Newton from five spread starting
//! configurations, projects onto joint limits every iteration, and keeps
//! only converged solutions whose metrics clear the manipulability,
//! conditioning, and smallest-singular-value thresholds. Among the
//! survivors the one with the highest manipulability wins (ties go to
//! the lowest start index), so the solver prefers configurations with
//! the most motion margin, not merely feasible ones.

use crate::kinematics::{
    compute_jacobian, forward_kinematics, JointConfig, KinematicModel,
};
use crate::metrics::{compute_metrics_with, MetricThresholds, SingularityMetrics};
use nalgebra::{Matrix3x6, Matrix6, Vector3, Vector6};
use thiserror::Error;

/// Solver settings. `thresholds` carries the solution filter.
#[derive(Clone, Debug)]
pub struct IkConfig {
    pub guesses: [JointConfig; 5],
    pub position_tolerance: f64,
    pub max_iterations: usize,
    pub thresholds: MetricThresholds,
}

impl IkConfig {
    pub fn for_model(model: &KinematicModel) -> Self {
        IkConfig {
            guesses: default_guesses(model),
            position_tolerance: 1e-3,
            max_iterations: 200,
            thresholds: MetricThresholds::default(),
        }
    }
}

/// A converged, filtered solution.
#[derive(Clone, Copy, Debug)]
pub struct IkSolution {
    pub q: JointConfig,
    pub metrics: SingularityMetrics,
    /// Final position residual in meters.
    pub residual: f64,
    /// Index of the starting guess that produced the solution.
    pub guess_index: usize,
}

/// Why a solve returned no solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum IkFailure {
    #[error("target is unreachable: no start converged within tolerance")]
    Unreachable,
    #[error("target is reachable only through unsafe configurations: {candidates} converged, none passed the metric filter")]
    NoSafeSolution { candidates: usize },
}

/// Five spread starts: a centered home pose, two elbow-up and two
/// elbow-down variants on either side of the base. All five clear the
/// metric filter (pinned by test against the metric computation).
pub fn default_guesses(model: &KinematicModel) -> [JointConfig; 5] {
    let raw = [
        [0.0, -1.5708, 1.5708, -1.5708, -1.5708, 0.0],
        [0.8, -1.2, 1.9, -2.0, -1.3, 0.5],
        [-0.8, -1.9, 1.9, -1.5, -1.8, -0.5],
        [0.8, -1.2, -1.9, 0.6, 1.3, 0.5],
        [-0.8, -2.0, -1.6, 1.2, 1.6, -0.5],
    ];
    raw.map(|q| model.clamp_to_limits(&JointConfig(q)))
}

/// Damped Gauss-Newton from one start. Returns the converged
/// configuration, or None if the residual never falls inside tolerance.
pub fn solve_ik_single(
    model: &KinematicModel,
    target: &Vector3<f64>,
    guess: &JointConfig,
    cfg: &IkConfig,
) -> Option<JointConfig> {
    let mut q = model.clamp_to_limits(guess);
    let mut err = (target - forward_kinematics(model, &q).position).norm();
    if !err.is_finite() {
        return None;
    }

    for _ in 0..cfg.max_iterations {
        if err <= cfg.position_tolerance {
            return Some(q);
        }

        let jac = compute_jacobian(model, &q);
        let jp: Matrix3x6<f64> = jac.linear();
        let e = target - forward_kinematics(model, &q).position;

        // Heavier damping when the position block nears rank loss keeps
        // the step bounded through singular neighborhoods.
        let svd = jp.svd(false, false);
        let sigma_min_p = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
        let lambda = if sigma_min_p < 0.05 { 0.01 } else { 1e-3 };

        let h = jp.transpose() * jp + Matrix6::identity() * (lambda * lambda);
        let g = jp.transpose() * e;
        let step: Vector6<f64> = h.lu().solve(&g)?;

        // Backtracking: halve the step while it fails to shrink the
        // residual, then take the best candidate seen.
        let mut best_q = q;
        let mut best_err = err;
        let mut scale = 1.0;
        for _ in 0..5 {
            let mut trial = q.0;
            for i in 0..6 {
                trial[i] += scale * step[i];
            }
            let trial = model.clamp_to_limits(&JointConfig(trial));
            let trial_err = (target - forward_kinematics(model, &trial).position).norm();
            if trial_err < best_err {
                best_q = trial;
                best_err = trial_err;
                break;
            }
            scale *= 0.5;
        }
        if best_err >= err {
            // No descent direction left at this damping; converged as far
            // as this basin goes.
            return (err <= cfg.position_tolerance).then_some(q);
        }
        q = best_q;
        err = best_err;
    }

    (err <= cfg.position_tolerance).then_some(q)
}

/// Multi-start solve keeping the highest-manipulability safe solution.
pub fn solve_ik(
    model: &KinematicModel,
    target: &Vector3<f64>,
    cfg: &IkConfig,
) -> Result<IkSolution, IkFailure> {
    solve_ik_ranked(model, target, cfg, |m| m.mu)
}

/// Cheap existence check: true iff some start converges to a solution
/// that clears the metric filter. Stops at the first safe solution, so
/// it costs a fraction of a full ranked solve.
pub fn safe_solution_exists(model: &KinematicModel, target: &Vector3<f64>, cfg: &IkConfig) -> bool {
    if target.norm() > model.max_reach() {
        return false;
    }
    cfg.guesses.iter().any(|guess| {
        solve_ik_single(model, target, guess, cfg)
            .map(|q| cfg.thresholds.passes(&compute_metrics_with(model, &q, &cfg.thresholds)))
            .unwrap_or(false)
    })
}

/// Multi-start solve ranked by an arbitrary score over the solution
/// metrics (higher wins; ties go to the lowest start index). Used for
/// the optional fuzzy-score ranking mode.
pub fn solve_ik_ranked(
    model: &KinematicModel,
    target: &Vector3<f64>,
    cfg: &IkConfig,
    score: impl Fn(&SingularityMetrics) -> f64,
) -> Result<IkSolution, IkFailure> {
    if target.norm() > model.max_reach() {
        return Err(IkFailure::Unreachable);
    }

    let mut candidates = 0usize;
    let mut best: Option<(f64, IkSolution)> = None;

    for (idx, guess) in cfg.guesses.iter().enumerate() {
        let Some(q) = solve_ik_single(model, target, guess, cfg) else {
            continue;
        };
        candidates += 1;
        let metrics = compute_metrics_with(model, &q, &cfg.thresholds);
        if !cfg.thresholds.passes(&metrics) {
            continue;
        }
        let residual = (target - forward_kinematics(model, &q).position).norm();
        let s = score(&metrics);
        let solution = IkSolution { q, metrics, residual, guess_index: idx };
        // Strict improvement only: earlier starts win ties.
        if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
            best = Some((s, solution));
        }
    }

    match best {
        Some((_, sol)) => Ok(sol),
        None if candidates == 0 => Err(IkFailure::Unreachable),
        None => Err(IkFailure::NoSafeSolution { candidates }),
    }
}
