//! Curriculum training loop, evaluation, and artifact export.
//!
//! Training runs one episode at a time: the stochastic policy rolls out
//! in the reaching environment, episode outcomes feed a rolling success
//! buffer that gates curriculum advancement, and every fixed number of
//! episodes the collected transitions drive one optimization update.
//! Everything is seeded through a single explicit RNG, so a seed pins
//! the entire run bitwise.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::env::{CurriculumStage, EnvError, ReachEnv, CURRICULUM, OBS_DIM};
use super::net::{Adam, PolicyNet, ValueNet};
use super::ppo::{
    gae_advantages, normalize_advantages, ppo_update, PpoConfig, Transition,
};
use crate::kinematics::DOF;

/// Training-run settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Episodes between optimization updates.
    pub update_period: usize,
    /// Rolling success-buffer capacity gating stage advancement.
    pub buffer_capacity: usize,
    pub hidden: usize,
    pub seed: u64,
    pub ppo: PpoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 2000,
            update_period: 8,
            buffer_capacity: 20,
            hidden: 64,
            seed: 0,
            ppo: PpoConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.episodes == 0 {
            return Err("episodes must be positive".into());
        }
        if self.update_period == 0 {
            return Err("update_period must be positive".into());
        }
        if self.buffer_capacity == 0 {
            return Err("buffer_capacity must be positive".into());
        }
        if self.hidden == 0 {
            return Err("hidden must be positive".into());
        }
        self.ppo.validate()
    }
}

/// Rolling success window plus the current stage index. Advancement
/// requires a full buffer whose mean clears the stage threshold; the
/// buffer is cleared on advance so the next stage starts fresh.
#[derive(Clone, Debug)]
pub struct Curriculum {
    stage_idx: usize,
    capacity: usize,
    buffer: VecDeque<bool>,
}

impl Curriculum {
    pub fn new(capacity: usize) -> Self {
        Curriculum { stage_idx: 0, capacity, buffer: VecDeque::with_capacity(capacity) }
    }

    pub fn stage(&self) -> &'static CurriculumStage {
        &CURRICULUM[self.stage_idx]
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    /// Mean of the buffered outcomes; 0 while the buffer is empty.
    pub fn rolling_success(&self) -> f64 {
        if self.buffer.is_empty() {
            return 0.0;
        }
        self.buffer.iter().filter(|s| **s).count() as f64 / self.buffer.len() as f64
    }

    /// Records one episode outcome; returns true when the stage advanced.
    pub fn record(&mut self, success: bool) -> bool {
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(success);
        let full = self.buffer.len() == self.capacity;
        if full
            && self.rolling_success() >= self.stage().success_threshold
            && self.stage_idx + 1 < CURRICULUM.len()
        {
            self.stage_idx += 1;
            self.buffer.clear();
            return true;
        }
        false
    }
}

/// One finished episode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub stage: u8,
    pub reward: f64,
    pub steps: usize,
    pub success: bool,
    pub singular_termination: bool,
    pub min_mu: f64,
    /// Steps taken after manipulability first crossed the stop bound.
    /// The hard-termination guard keeps this at zero.
    pub steps_past_stop_bound: usize,
}

/// One optimization update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub update_index: usize,
    pub episode: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub rolling_success: f64,
    pub stage: u8,
    pub rolled_back: bool,
}

/// Full account of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeRecord>,
    pub updates: Vec<UpdateRecord>,
    /// (episode index, stage entered).
    pub stage_advances: Vec<(usize, u8)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum TrainError {
    #[error("target sampling failed: {0}")]
    Sampling(#[from] EnvError),
    #[error("{consecutive} consecutive optimization updates diverged")]
    Diverged { consecutive: u32 },
}

/// Trained networks plus the log.
pub struct TrainOutcome {
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub log: TrainingLog,
}

struct EpisodeRollout {
    transitions: Vec<Transition>,
    reward: f64,
    steps: usize,
    success: bool,
    singular_termination: bool,
    min_mu: f64,
    steps_past_stop_bound: usize,
}

/// Rolls out one stochastic episode, crediting advantages at the end.
fn run_episode(
    env: &mut ReachEnv,
    policy: &PolicyNet,
    value: &ValueNet,
    stage: &CurriculumStage,
    ppo: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRollout, EnvError> {
    let mut obs = DVector::from_column_slice(&env.reset(stage, rng)?);
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut logps = Vec::new();
    let mut rewards = Vec::new();
    let mut values = Vec::new();

    let mut total_reward = 0.0;
    let (success, singular_termination, timeout);
    let mut min_mu = env.state().metrics.mu;
    let mut stop_bound_crossed = min_mu < env.config().mu_terminate;
    let mut steps_past_stop_bound = 0;

    loop {
        let (action, logp) = policy.sample_action(&obs, rng);
        let v = value.value(&obs);

        let mut a = [0.0; DOF];
        a.copy_from_slice(action.as_slice());
        let (next_obs, reward, done, info) = env.step(&a);

        if stop_bound_crossed {
            steps_past_stop_bound += 1;
        }
        min_mu = min_mu.min(env.state().metrics.mu);
        if env.state().metrics.mu < env.config().mu_terminate {
            stop_bound_crossed = true;
        }

        observations.push(obs.clone());
        actions.push(action);
        logps.push(logp);
        rewards.push(reward.total);
        values.push(v);
        total_reward += reward.total;

        obs = DVector::from_column_slice(&next_obs);
        if done {
            success = info.success;
            singular_termination = info.singular_termination;
            timeout = info.timeout;
            break;
        }
    }

    // Truncation by the step limit bootstraps from the value estimate;
    // genuine terminal states (success, singularity stop) are worth 0.
    let bootstrap = if timeout { value.value(&obs) } else { 0.0 };
    let (advantages, returns) =
        gae_advantages(&rewards, &values, bootstrap, ppo.gamma, ppo.gae_lambda);

    let transitions = observations
        .into_iter()
        .zip(actions)
        .zip(logps)
        .zip(advantages.iter().zip(&returns))
        .map(|(((obs, action), logp_old), (adv, ret))| Transition {
            obs,
            action,
            logp_old,
            advantage: *adv,
            ret: *ret,
        })
        .collect();

    Ok(EpisodeRollout {
        transitions,
        reward: total_reward,
        steps: rewards.len(),
        success,
        singular_termination,
        min_mu,
        steps_past_stop_bound,
    })
}

/// Runs the full curriculum loop. Deterministic in `cfg.seed`.
pub fn train(env: &mut ReachEnv, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = PolicyNet::new(OBS_DIM, cfg.hidden, DOF, env.config().v_max, &mut rng);
    let mut value = ValueNet::new(OBS_DIM, cfg.hidden, &mut rng);
    let mut ppo_cfg = cfg.ppo;
    let mut policy_opt = Adam::new(policy.n_params(), ppo_cfg.learning_rate);
    let mut value_opt = Adam::new(value.mlp.n_params(), ppo_cfg.learning_rate);

    let mut curriculum = Curriculum::new(cfg.buffer_capacity);
    let mut log = TrainingLog::default();
    let mut pending: Vec<Transition> = Vec::new();
    let mut consecutive_rollbacks = 0u32;
    let mut update_index = 0usize;

    for episode in 1..=cfg.episodes {
        let stage = *curriculum.stage();
        let rollout = run_episode(env, &policy, &value, &stage, &ppo_cfg, &mut rng)?;

        log.episodes.push(EpisodeRecord {
            episode,
            stage: stage.index,
            reward: rollout.reward,
            steps: rollout.steps,
            success: rollout.success,
            singular_termination: rollout.singular_termination,
            min_mu: rollout.min_mu,
            steps_past_stop_bound: rollout.steps_past_stop_bound,
        });
        pending.extend(rollout.transitions);

        if curriculum.record(rollout.success) {
            log.stage_advances.push((episode, curriculum.stage().index));
        }

        if episode % cfg.update_period == 0 && !pending.is_empty() {
            normalize_advantages(&mut pending);
            let result = ppo_update(
                &mut policy,
                &mut value,
                &mut policy_opt,
                &mut value_opt,
                &pending,
                &ppo_cfg,
            );
            update_index += 1;
            match result {
                Ok((policy_loss, value_loss)) => {
                    consecutive_rollbacks = 0;
                    log.updates.push(UpdateRecord {
                        update_index,
                        episode,
                        policy_loss,
                        value_loss,
                        rolling_success: curriculum.rolling_success(),
                        stage: curriculum.stage().index,
                        rolled_back: false,
                    });
                }
                Err(_) => {
                    consecutive_rollbacks += 1;
                    // Adaptive retreat: halve the rate after a rollback.
                    ppo_cfg.learning_rate /= 2.0;
                    policy_opt.lr = ppo_cfg.learning_rate;
                    value_opt.lr = ppo_cfg.learning_rate;
                    log.updates.push(UpdateRecord {
                        update_index,
                        episode,
                        policy_loss: f64::NAN,
                        value_loss: f64::NAN,
                        rolling_success: curriculum.rolling_success(),
                        stage: curriculum.stage().index,
                        rolled_back: true,
                    });
                    if consecutive_rollbacks >= ppo_cfg.max_consecutive_rollbacks {
                        return Err(TrainError::Diverged { consecutive: consecutive_rollbacks });
                    }
                }
            }
            assert!(policy.all_finite() && value.all_finite(), "non-finite parameters survived an update");
            pending.clear();
        }
    }

    Ok(TrainOutcome { policy, value, log })
}

/// Deterministic greedy evaluation summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SuccessReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_final_distance: f64,
    /// Lowest manipulability seen across every step of every episode.
    pub min_mu: f64,
}

/// Greedy (mean-action) rollouts. Per-episode RNG streams derive from
/// `seed`, so episodes are independent and the report is reproducible.
pub fn evaluate(
    policy: &PolicyNet,
    env: &mut ReachEnv,
    stage: &CurriculumStage,
    episodes: usize,
    seed: u64,
) -> Result<SuccessReport, EnvError> {
    let mut successes = 0usize;
    let mut distance_sum = 0.0;
    let mut min_mu = f64::INFINITY;

    for k in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut obs = DVector::from_column_slice(&env.reset(stage, &mut rng)?);
        min_mu = min_mu.min(env.state().metrics.mu);
        loop {
            let action = policy.mean_action(&obs);
            let mut a = [0.0; DOF];
            a.copy_from_slice(action.as_slice());
            let (next_obs, _, done, info) = env.step(&a);
            min_mu = min_mu.min(env.state().metrics.mu);
            obs = DVector::from_column_slice(&next_obs);
            if done {
                if info.success {
                    successes += 1;
                }
                distance_sum += info.distance;
                break;
            }
        }
    }

    Ok(SuccessReport {
        episodes,
        success_rate: successes as f64 / episodes.max(1) as f64,
        mean_final_distance: distance_sum / episodes.max(1) as f64,
        min_mu,
    })
}

/// Writes the per-update curves as CSV. Deterministic byte-for-byte.
pub fn export_curves(log: &TrainingLog, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "# schema: singularguard-curves v1")?;
    writeln!(out, "update_index,episode,policy_loss,value_loss,rolling_success,stage")?;
    for u in &log.updates {
        writeln!(
            out,
            "{},{},{:.17e},{:.17e},{:.17e},{}",
            u.update_index, u.episode, u.policy_loss, u.value_loss, u.rolling_success, u.stage
        )?;
    }
    Ok(())
}

const PARAMS_MAGIC: &str = "singularguard-params v1";

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad params file: {0}")]
    Format(String),
}

fn write_tensor(out: &mut impl Write, name: &str, dims: &[usize], data: &[f64]) -> std::io::Result<()> {
    write!(out, "tensor {name}")?;
    for d in dims {
        write!(out, " {d}")?;
    }
    writeln!(out)?;
    for v in data {
        // 17 fractional digits round-trip every f64 exactly.
        writeln!(out, "{v:.17e}")?;
    }
    Ok(())
}

/// Saves both networks in a versioned, human-readable text format:
/// a magic line, shape metadata, then named tensors with one value per
/// line. Values round-trip bitwise.
pub fn save_params(
    mut out: impl Write,
    policy: &PolicyNet,
    value: &ValueNet,
) -> std::io::Result<()> {
    writeln!(out, "{PARAMS_MAGIC}")?;
    writeln!(out, "obs_dim {}", policy.mlp.input_dim())?;
    writeln!(out, "act_dim {}", policy.act_dim())?;
    writeln!(out, "hidden {}", policy.mlp.l1.w.nrows())?;
    writeln!(out, "action_scale {:.17e}", policy.action_scale)?;
    for (prefix, mlp) in [("policy", &policy.mlp), ("value", &value.mlp)] {
        for (name, dims, data) in [
            ("l1.w", vec![mlp.l1.w.nrows(), mlp.l1.w.ncols()], mlp.l1.w.as_slice()),
            ("l1.b", vec![mlp.l1.b.len()], mlp.l1.b.as_slice()),
            ("n1.gain", vec![mlp.n1.gain.len()], mlp.n1.gain.as_slice()),
            ("n1.bias", vec![mlp.n1.bias.len()], mlp.n1.bias.as_slice()),
            ("l2.w", vec![mlp.l2.w.nrows(), mlp.l2.w.ncols()], mlp.l2.w.as_slice()),
            ("l2.b", vec![mlp.l2.b.len()], mlp.l2.b.as_slice()),
            ("n2.gain", vec![mlp.n2.gain.len()], mlp.n2.gain.as_slice()),
            ("n2.bias", vec![mlp.n2.bias.len()], mlp.n2.bias.as_slice()),
            ("head.w", vec![mlp.head.w.nrows(), mlp.head.w.ncols()], mlp.head.w.as_slice()),
            ("head.b", vec![mlp.head.b.len()], mlp.head.b.as_slice()),
        ] {
            write_tensor(&mut out, &format!("{prefix}.{name}"), &dims, data)?;
        }
    }
    write_tensor(&mut out, "policy.log_std", &[policy.act_dim()], policy.log_std.as_slice())?;
    Ok(())
}

/// Loads networks saved by [`save_params`].
pub fn load_params(input: impl BufRead) -> Result<(PolicyNet, ValueNet), ParamsError> {
    let lines: Vec<String> = input.lines().collect::<Result<_, _>>()?;
    let mut cursor = 0usize;
    let next = |cursor: &mut usize| -> Result<&str, ParamsError> {
        let line = lines
            .get(*cursor)
            .ok_or_else(|| ParamsError::Format("unexpected end of file".into()))?;
        *cursor += 1;
        Ok(line.as_str())
    };

    let magic = next(&mut cursor)?;
    if magic.trim() != PARAMS_MAGIC {
        return Err(ParamsError::Format(format!("unsupported header {magic:?}")));
    }
    let mut header = std::collections::BTreeMap::new();
    for _ in 0..4 {
        let line = next(&mut cursor)?;
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default().to_string();
        if key == "tensor" {
            return Err(ParamsError::Format("tensor before complete header".into()));
        }
        let val = parts
            .next()
            .ok_or_else(|| ParamsError::Format(format!("header line {line:?} missing value")))?;
        header.insert(key, val.to_string());
    }
    let dim = |k: &str| -> Result<usize, ParamsError> {
        header
            .get(k)
            .ok_or_else(|| ParamsError::Format(format!("missing header field {k}")))?
            .parse()
            .map_err(|_| ParamsError::Format(format!("bad header field {k}")))
    };
    let obs_dim = dim("obs_dim")?;
    let act_dim = dim("act_dim")?;
    let hidden = dim("hidden")?;
    let action_scale: f64 = header
        .get("action_scale")
        .ok_or_else(|| ParamsError::Format("missing action_scale".into()))?
        .parse()
        .map_err(|_| ParamsError::Format("bad action_scale".into()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut policy = PolicyNet::new(obs_dim, hidden, act_dim, action_scale, &mut rng);
    let mut value = ValueNet::new(obs_dim, hidden, &mut rng);

    let read_tensor = |cursor: &mut usize,
                       header_line: &str|
     -> Result<(String, Vec<f64>), ParamsError> {
        let mut parts = header_line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(ParamsError::Format(format!("expected tensor line, got {header_line:?}")));
        }
        let name = parts
            .next()
            .ok_or_else(|| ParamsError::Format("tensor line missing name".into()))?
            .to_string();
        let dims: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| ParamsError::Format(format!("bad dim in {name}"))))
            .collect::<Result<_, _>>()?;
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines
                .get(*cursor)
                .ok_or_else(|| ParamsError::Format("unexpected end of file".into()))?;
            *cursor += 1;
            data.push(
                line.trim()
                    .parse::<f64>()
                    .map_err(|_| ParamsError::Format(format!("bad float {line:?} in {name}")))?,
            );
        }
        Ok((name, data))
    };

    let mut fill = |name: &str, data: Vec<f64>| -> Result<(), ParamsError> {
        let (prefix, field) = name
            .split_once('.')
            .ok_or_else(|| ParamsError::Format(format!("unknown tensor {name}")))?;
        let mlp = match prefix {
            "policy" if field == "log_std" => {
                if data.len() != policy.log_std.len() {
                    return Err(ParamsError::Format("log_std size mismatch".into()));
                }
                policy.log_std.copy_from_slice(&data);
                return Ok(());
            }
            "policy" => &mut policy.mlp,
            "value" => &mut value.mlp,
            _ => return Err(ParamsError::Format(format!("unknown tensor {name}"))),
        };
        let slot: &mut [f64] = match field {
            "l1.w" => mlp.l1.w.as_mut_slice(),
            "l1.b" => mlp.l1.b.as_mut_slice(),
            "n1.gain" => mlp.n1.gain.as_mut_slice(),
            "n1.bias" => mlp.n1.bias.as_mut_slice(),
            "l2.w" => mlp.l2.w.as_mut_slice(),
            "l2.b" => mlp.l2.b.as_mut_slice(),
            "n2.gain" => mlp.n2.gain.as_mut_slice(),
            "n2.bias" => mlp.n2.bias.as_mut_slice(),
            "head.w" => mlp.head.w.as_mut_slice(),
            "head.b" => mlp.head.b.as_mut_slice(),
            _ => return Err(ParamsError::Format(format!("unknown tensor {name}"))),
        };
        if slot.len() != data.len() {
            return Err(ParamsError::Format(format!("tensor {name} size mismatch")));
        }
        slot.copy_from_slice(&data);
        Ok(())
    };

    let mut seen = 0usize;
    while cursor < lines.len() {
        let line = lines[cursor].clone();
        cursor += 1;
        if line.trim().is_empty() {
            continue;
        }
        let (name, data) = read_tensor(&mut cursor, &line)?;
        fill(&name, data)?;
        seen += 1;
    }
    // 10 tensors per network plus log_std.
    if seen != 21 {
        return Err(ParamsError::Format(format!("expected 21 tensors, found {seen}")));
    }
    if !policy.all_finite() || !value.all_finite() {
        return Err(ParamsError::Format("non-finite parameter in file".into()));
    }
    Ok((policy, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::KinematicModel;
    use crate::rl::env::EnvConfig;

    fn quick_cfg(episodes: usize, seed: u64) -> TrainConfig {
        TrainConfig { episodes, hidden: 16, seed, ..TrainConfig::default() }
    }

    #[test]
    fn curriculum_advances_only_on_full_buffer() {
        let mut c = Curriculum::new(20);
        assert_eq!(c.stage().index, 1);
        // 19 successes: buffer not full, no advance despite perfect rate.
        for _ in 0..19 {
            assert!(!c.record(true));
        }
        assert_eq!(c.stage().index, 1);
        // 20th fills the buffer at 100% >= 60%.
        assert!(c.record(true));
        assert_eq!(c.stage().index, 2);
        assert_eq!(c.buffer_len(), 0, "buffer cleared on advance");
    }

    #[test]
    fn curriculum_requires_the_threshold() {
        let mut c = Curriculum::new(20);
        // 11/20 = 55% < 60%: stays on stage 1 as the window rolls.
        for k in 0..40 {
            let success = k % 20 < 11;
            assert!(!c.record(success), "no advance at 55%");
        }
        assert_eq!(c.stage().index, 1);
        // Push the rolling rate over the bar.
        let mut advanced = false;
        for _ in 0..20 {
            advanced |= c.record(true);
        }
        assert!(advanced);
        assert_eq!(c.stage().index, 2);
    }

    #[test]
    fn curriculum_caps_at_the_final_stage() {
        let mut c = Curriculum::new(5);
        for _ in 0..200 {
            c.record(true);
        }
        assert_eq!(c.stage().index, 4);
        assert!((c.stage().success_threshold - 0.85).abs() < 1e-12);
        assert!(c.stage().target_radius.is_infinite());
    }

    #[test]
    fn stage_index_is_monotone_over_a_run() {
        let mut c = Curriculum::new(3);
        let mut last = c.stage().index;
        let pattern = [true, true, false, true, true, true, false, true];
        for k in 0..400 {
            c.record(pattern[k % pattern.len()]);
            assert!(c.stage().index >= last);
            last = c.stage().index;
        }
    }

    #[test]
    fn short_training_run_is_deterministic() {
        let cfg = quick_cfg(24, 7);
        let mut env_a = ReachEnv::new(KinematicModel::ur10(), EnvConfig::default());
        let mut env_b = ReachEnv::new(KinematicModel::ur10(), EnvConfig::default());
        let a = train(&mut env_a, &cfg).unwrap();
        let b = train(&mut env_b, &cfg).unwrap();
        assert_eq!(a.log, b.log, "same seed, same log, bitwise");
        assert_eq!(a.policy.flat(), b.policy.flat());
        // A different seed takes a different path.
        let mut env_c = ReachEnv::new(KinematicModel::ur10(), EnvConfig::default());
        let c = train(&mut env_c, &quick_cfg(24, 8)).unwrap();
        assert_ne!(a.log.episodes[0].reward, c.log.episodes[0].reward);
    }

    #[test]
    fn seed_zero_reaches_stage_two() {
        // Pinned regression: with seed 0 and the default configuration the
        // stage-1 rolling success rate crosses 0.60 and the curriculum
        // advances to stage 2 (observed at episode 59). Per-episode behavior
        // does not depend on the total episode count, so a 200-episode run
        // proves the same advance for any longer run with this seed.
        let cfg = TrainConfig { episodes: 200, ..TrainConfig::default() };
        assert_eq!(cfg.seed, 0);
        let mut env = ReachEnv::new(KinematicModel::ur10(), EnvConfig::default());
        let out = train(&mut env, &cfg).unwrap();
        assert!(
            out.log.stage_advances.iter().any(|&(_, stage)| stage == 2),
            "seed 0 must advance to stage 2 within 200 episodes, got {:?}",
            out.log.stage_advances
        );
    }

    #[test]
    fn training_log_shape_matches_the_schedule() {
        let cfg = quick_cfg(40, 3);
        let mut env = ReachEnv::new(KinematicModel::ur10(), EnvConfig::default());
        let out = train(&mut env, &cfg).unwrap();
        assert_eq!(out.log.episodes.len(), 40);
        assert_eq!(out.log.updates.len(), 40 / cfg.update_period);
        for (i, u) in out.log.updates.iter().enumerate() {
            assert_eq!(u.update_index, i + 1);
            assert_eq!(u.episode, (i + 1) * cfg.update_period);
            assert!((0.0..=1.0).contains(&u.rolling_success));
        }
        assert!(out.policy.all_finite() && out.value.all_finite());
        // The stage sequence in episode records never decreases.
        let mut last = 0;
        for e in &out.log.episodes {
            assert!(e.stage >= last);
            last = e.stage;
        }
    }

    #[test]
    fn hard_termination_guard_leaves_no_post_stop_steps() {
        let cfg = quick_cfg(30, 5);
        let mut env = ReachEnv::new(KinematicModel::ur10(), EnvConfig::default());
        let out = train(&mut env, &cfg).unwrap();
        for e in &out.log.episodes {
            assert_eq!(e.steps_past_stop_bound, 0);
            if e.min_mu < env.config().mu_terminate {
                assert!(e.singular_termination || e.success);
            }
        }
    }

    #[test]
    fn evaluate_reports_sane_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let policy = PolicyNet::new(OBS_DIM, 16, DOF, 1.0, &mut rng);
        let mut env = ReachEnv::new(KinematicModel::ur10(), EnvConfig::default());
        let report = evaluate(&policy, &mut env, &CURRICULUM[0], 10, 123).unwrap();
        assert_eq!(report.episodes, 10);
        assert!((0.0..=1.0).contains(&report.success_rate));
        assert!(report.mean_final_distance >= 0.0);
        assert!(report.min_mu.is_finite());
        // Same seed reproduces the report exactly.
        let again = evaluate(&policy, &mut env, &CURRICULUM[0], 10, 123).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn curves_export_is_deterministic_with_one_row_per_update() {
        let cfg = quick_cfg(24, 2);
        let mut env = ReachEnv::new(KinematicModel::ur10(), EnvConfig::default());
        let out = train(&mut env, &cfg).unwrap();
        let mut a = Vec::new();
        export_curves(&out.log, &mut a).unwrap();
        let mut b = Vec::new();
        export_curves(&out.log, &mut b).unwrap();
        assert_eq!(a, b, "re-export byte-identical");
        let text = String::from_utf8(a).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# schema: singularguard-curves v1");
        assert_eq!(
            lines.next().unwrap(),
            "update_index,episode,policy_loss,value_loss,rolling_success,stage"
        );
        assert_eq!(lines.count(), out.log.updates.len());
    }

    #[test]
    fn params_round_trip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let policy = PolicyNet::new(OBS_DIM, 16, DOF, 1.0, &mut rng);
        let value = ValueNet::new(OBS_DIM, 16, &mut rng);
        let mut buf = Vec::new();
        save_params(&mut buf, &policy, &value).unwrap();
        let (p2, v2) = load_params(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(policy.flat(), p2.flat());
        assert_eq!(value.mlp.flat(), v2.mlp.flat());
        assert_eq!(policy.action_scale, p2.action_scale);
        // And the loaded policy computes identical actions.
        let obs = DVector::from_element(OBS_DIM, 0.25);
        assert_eq!(policy.mean_action(&obs), p2.mean_action(&obs));
    }

    #[test]
    fn params_loader_rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let policy = PolicyNet::new(4, 8, 2, 1.0, &mut rng);
        let value = ValueNet::new(4, 8, &mut rng);
        let mut buf = Vec::new();
        save_params(&mut buf, &policy, &value).unwrap();
        let text = String::from_utf8(buf).unwrap();

        let bad_magic = text.replacen("params v1", "params v9", 1);
        assert!(load_params(std::io::Cursor::new(bad_magic.into_bytes())).is_err());

        let truncated: String = text.lines().take(30).collect::<Vec<_>>().join("\n");
        assert!(load_params(std::io::Cursor::new(truncated.into_bytes())).is_err());

        let poisoned = text.replacen("tensor policy.l1.b", "tensor policy.l9.b", 1);
        assert!(load_params(std::io::Cursor::new(poisoned.into_bytes())).is_err());
    }
}
