//! Kinematic reaching environment.
//!
//! Episodes start at a fixed safe home configuration with a target
//! sampled per curriculum stage; actions are joint-velocity commands
//! integrated at a fixed timestep. Every reset re-checks target
//! feasibility through the safe-solution IK filter, and every step
//! recomputes the singularity metrics, terminating the episode the
//! moment manipulability crosses the hard stop bound.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ik::{safe_solution_exists, IkConfig};
use crate::kinematics::{forward_kinematics, JointConfig, KinematicModel, DOF};
use crate::metrics::{compute_metrics, SingularityMetrics};

/// Flat observation length: 6 joints + 3 target + 3 metric channels.
pub const OBS_DIM: usize = 12;

// Observation normalization scales, chosen so each channel stays near
// [-1, 1] over the reachable workspace.
const OBS_Q_SCALE: f64 = 2.0 * std::f64::consts::PI;
const OBS_MU_SCALE: f64 = 0.3;
const OBS_LOG_KAPPA_SCALE: f64 = 6.0;
const OBS_SIGMA_SCALE: f64 = 0.5;

/// Reward shaping weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Per-step distance penalty weight (1/m).
    pub w_distance: f64,
    /// One-time bonus on the success step.
    pub success_bonus: f64,
    /// Progress shaping weight on distance decrease (1/m).
    pub w_progress: f64,
    /// Penalty weight for manipulability below `mu_safe`.
    pub w_singularity: f64,
    /// Manipulability level below which the singularity penalty ramps in.
    pub mu_safe: f64,
    /// Penalty weight on mean commanded |velocity|.
    pub w_velocity: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            w_distance: 1.0,
            success_bonus: 50.0,
            w_progress: 10.0,
            w_singularity: 5.0,
            mu_safe: 0.05,
            w_velocity: 0.1,
        }
    }
}

/// Environment settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Integration timestep, seconds.
    pub dt: f64,
    /// Per-joint velocity bound, rad/s.
    pub v_max: f64,
    /// Step limit per episode.
    pub t_max: usize,
    /// Success distance, meters.
    pub d_success: f64,
    /// Hard-termination manipulability bound.
    pub mu_terminate: f64,
    /// Full-workspace sampling annulus: inner radius (m) and outer
    /// radius as a fraction of max reach.
    pub workspace_inner_radius: f64,
    pub workspace_outer_fraction: f64,
    /// Reset attempts before SamplingExhausted.
    pub max_reset_rejections: usize,
    pub reward: RewardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.05,
            v_max: 1.0,
            t_max: 100,
            d_success: 0.05,
            mu_terminate: 0.005,
            workspace_inner_radius: 0.3,
            workspace_outer_fraction: 0.95,
            max_reset_rejections: 100,
            reward: RewardConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("d_success", self.d_success),
            ("mu_terminate", self.mu_terminate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.t_max == 0 {
            return Err("t_max must be positive".into());
        }
        if !(self.workspace_inner_radius >= 0.0
            && self.workspace_outer_fraction > 0.0
            && self.workspace_outer_fraction <= 1.0)
        {
            return Err("workspace annulus bounds out of range".into());
        }
        Ok(())
    }
}

/// One curriculum stage. `target_radius` is infinite on the final
/// stage, meaning full-workspace sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumStage {
    pub index: u8,
    pub target_radius: f64,
    pub success_threshold: f64,
}

/// The four-stage schedule: target radius grows while the required
/// rolling success rate rises.
pub const CURRICULUM: [CurriculumStage; 4] = [
    CurriculumStage { index: 1, target_radius: 0.10, success_threshold: 0.60 },
    CurriculumStage { index: 2, target_radius: 0.15, success_threshold: 0.70 },
    CurriculumStage { index: 3, target_radius: 0.20, success_threshold: 0.80 },
    CurriculumStage { index: 4, target_radius: f64::INFINITY, success_threshold: 0.85 },
];

/// Per-step reward components. `total` is the exact signed sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub r_distance: f64,
    pub r_success: f64,
    pub r_progress: f64,
    pub p_singularity: f64,
    pub p_velocity: f64,
    pub total: f64,
}

/// Step outcome flags.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub distance: f64,
    pub success: bool,
    /// Episode ended because manipulability crossed the stop bound.
    pub singular_termination: bool,
    /// Episode ended by the step limit alone.
    pub timeout: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("no feasible target found after {attempts} rejections")]
    SamplingExhausted { attempts: usize },
}

/// Current episode state.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub q: JointConfig,
    pub target: Vector3<f64>,
    pub metrics: SingularityMetrics,
    pub step_index: usize,
    pub prev_distance: f64,
}

pub struct ReachEnv {
    model: KinematicModel,
    cfg: EnvConfig,
    ik_cfg: IkConfig,
    home: JointConfig,
    state: EnvState,
}

impl ReachEnv {
    pub fn new(model: KinematicModel, cfg: EnvConfig) -> Self {
        let ik_cfg = IkConfig::for_model(&model);
        // Home start: the centered default guess, well clear of every
        // metric threshold.
        let home = ik_cfg.guesses[0];
        let metrics = compute_metrics(&model, &home);
        let tcp = forward_kinematics(&model, &home).position;
        let state = EnvState {
            q: home,
            target: tcp,
            metrics,
            step_index: 0,
            prev_distance: 0.0,
        };
        ReachEnv { model, cfg, ik_cfg, home, state }
    }

    pub fn model(&self) -> &KinematicModel {
        &self.model
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn home_tcp(&self) -> Vector3<f64> {
        forward_kinematics(&self.model, &self.home).position
    }

    /// Samples a stage-appropriate target, rejecting any the safe-IK
    /// filter cannot solve, and resets the arm to home.
    pub fn reset(
        &mut self,
        stage: &CurriculumStage,
        rng: &mut impl Rng,
    ) -> Result<[f64; OBS_DIM], EnvError> {
        let home_tcp = self.home_tcp();
        for _ in 0..self.cfg.max_reset_rejections {
            let target = if stage.target_radius.is_finite() {
                home_tcp + sample_ball(stage.target_radius, rng)
            } else {
                let outer = self.cfg.workspace_outer_fraction * self.model.max_reach();
                sample_annulus(self.cfg.workspace_inner_radius, outer, rng)
            };
            if safe_solution_exists(&self.model, &target, &self.ik_cfg) {
                return Ok(self.reset_to(self.home, target));
            }
        }
        Err(EnvError::SamplingExhausted { attempts: self.cfg.max_reset_rejections })
    }

    /// Scripted reset: place the arm and target directly, skipping the
    /// feasibility filter. Useful for scripted scenarios and tests.
    pub fn reset_to(&mut self, q: JointConfig, target: Vector3<f64>) -> [f64; OBS_DIM] {
        let q = self.model.clamp_to_limits(&q);
        let metrics = compute_metrics(&self.model, &q);
        let tcp = forward_kinematics(&self.model, &q).position;
        self.state = EnvState {
            q,
            target,
            metrics,
            step_index: 0,
            prev_distance: (target - tcp).norm(),
        };
        self.observation()
    }

    pub fn observation(&self) -> [f64; OBS_DIM] {
        let s = &self.state;
        let mut obs = [0.0; OBS_DIM];
        for i in 0..DOF {
            obs[i] = s.q.0[i] / OBS_Q_SCALE;
        }
        let reach = self.model.max_reach();
        obs[6] = s.target.x / reach;
        obs[7] = s.target.y / reach;
        obs[8] = s.target.z / reach;
        obs[9] = s.metrics.mu / OBS_MU_SCALE;
        obs[10] = s.metrics.kappa.log10() / OBS_LOG_KAPPA_SCALE;
        obs[11] = s.metrics.sigma_min / OBS_SIGMA_SCALE;
        obs
    }

    /// Integrates one clamped velocity command and scores the result.
    pub fn step(&mut self, action: &[f64; DOF]) -> ([f64; OBS_DIM], RewardBreakdown, bool, StepInfo) {
        let r = &self.cfg.reward;
        let mut clamped = [0.0; DOF];
        for i in 0..DOF {
            clamped[i] = action[i].clamp(-self.cfg.v_max, self.cfg.v_max);
        }

        let mut q_new = self.state.q.0;
        for i in 0..DOF {
            q_new[i] += clamped[i] * self.cfg.dt;
        }
        let q_new = self.model.clamp_to_limits(&JointConfig(q_new));

        let metrics = compute_metrics(&self.model, &q_new);
        let tcp = forward_kinematics(&self.model, &q_new).position;
        let distance = (self.state.target - tcp).norm();

        self.state.step_index += 1;
        let success = distance < self.cfg.d_success;
        let singular = metrics.mu < self.cfg.mu_terminate;
        let timeout = self.state.step_index >= self.cfg.t_max;
        let done = success || singular || timeout;

        let r_distance = -r.w_distance * distance;
        let r_success = if success { r.success_bonus } else { 0.0 };
        let r_progress = r.w_progress * (self.state.prev_distance - distance);
        let p_singularity =
            r.w_singularity * ((r.mu_safe - metrics.mu).max(0.0) / r.mu_safe);
        let p_velocity =
            r.w_velocity * (clamped.iter().map(|v| v.abs()).sum::<f64>() / DOF as f64);
        let total = r_distance + r_success + r_progress - p_singularity - p_velocity;
        let reward =
            RewardBreakdown { r_distance, r_success, r_progress, p_singularity, p_velocity, total };

        self.state.q = q_new;
        self.state.metrics = metrics;
        self.state.prev_distance = distance;

        let info = StepInfo {
            distance,
            success,
            singular_termination: singular && !success,
            timeout: timeout && !success && !singular,
        };
        (self.observation(), reward, done, info)
    }
}

/// Uniform sample from the solid ball of the given radius.
fn sample_ball(radius: f64, rng: &mut impl Rng) -> Vector3<f64> {
    let dir = sample_direction(rng);
    let r = radius * rng.gen::<f64>().cbrt();
    dir * r
}

/// Uniform-in-volume sample from the annulus inner <= |p| <= outer.
fn sample_annulus(inner: f64, outer: f64, rng: &mut impl Rng) -> Vector3<f64> {
    let dir = sample_direction(rng);
    let u = rng.gen::<f64>();
    let r = (inner.powi(3) + u * (outer.powi(3) - inner.powi(3))).cbrt();
    dir * r
}

fn sample_direction(rng: &mut impl Rng) -> Vector3<f64> {
    use rand_distr::StandardNormal;
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}
