//! Clipped-surrogate policy optimization on full batches.
//!
//! The objectives return both the scalar loss and the gradient with
//! respect to the flat parameter vector, so the same code path serves
//! the optimizer and the finite-difference verification tests. Updates
//! snapshot parameters and optimizer state first and roll back whenever
//! a step produces a non-finite parameter.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::net::{clip_global_norm, Adam, PolicyNet, ValueNet};

/// One collected step, already credited with its advantage and return.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: DVector<f64>,
    pub action: DVector<f64>,
    pub logp_old: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Optimization hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub grad_clip: f64,
    /// Consecutive rolled-back updates tolerated before training aborts.
    pub max_consecutive_rollbacks: u32,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            epochs: 4,
            learning_rate: 3e-4,
            entropy_coef: 0.0,
            grad_clip: 0.5,
            max_consecutive_rollbacks: 3,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(format!("gae_lambda must be in [0, 1], got {}", self.gae_lambda));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(format!("clip_ratio must be in (0, 1), got {}", self.clip_ratio));
        }
        if self.epochs == 0 {
            return Err("epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return Err(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.entropy_coef < 0.0 {
            return Err(format!("entropy_coef must be non-negative, got {}", self.entropy_coef));
        }
        Ok(())
    }
}

/// An update whose every retry produced non-finite parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("optimizer update diverged (non-finite parameters); rolled back")]
pub struct DivergedUpdate;

/// Generalized advantage estimation over one episode.
///
/// `bootstrap` is the value of the state after the last transition:
/// zero when the episode actually terminated, V(s_T) when it was cut
/// off by the step limit. Returns (advantages, returns) where
/// return_t = advantage_t + value_t regresses the value function.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len());
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// Normalizes advantages in place to zero mean and unit variance.
pub fn normalize_advantages(batch: &mut [Transition]) {
    let n = batch.len() as f64;
    if batch.is_empty() {
        return;
    }
    let mean = batch.iter().map(|t| t.advantage).sum::<f64>() / n;
    let var = batch.iter().map(|t| (t.advantage - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for t in batch.iter_mut() {
        t.advantage = (t.advantage - mean) / std;
    }
}

/// Clipped-surrogate loss (plus optional entropy bonus) and its
/// gradient with respect to the policy's flat parameters.
pub fn policy_objective(
    policy: &PolicyNet,
    batch: &[Transition],
    clip_ratio: f64,
    entropy_coef: f64,
) -> (f64, DVector<f64>) {
    assert!(!batch.is_empty(), "policy objective needs a nonempty batch");
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut mlp_grads = policy.mlp.zero_grads();
    let mut logstd_grads = DVector::zeros(policy.act_dim());

    for tr in batch {
        let (mean, u, trace) = policy.forward_mean(&tr.obs);
        let logp = policy.log_prob(&mean, &tr.action);
        let ratio = (logp - tr.logp_old).exp();
        let unclipped = ratio * tr.advantage;
        let clipped = ratio.clamp(1.0 - clip_ratio, 1.0 + clip_ratio) * tr.advantage;
        loss += -unclipped.min(clipped) / n;

        // Gradient flows only while the unclipped branch is the active
        // minimum; a clipped-and-smaller branch is constant in theta.
        let dlogp = if unclipped <= clipped { -tr.advantage * ratio / n } else { 0.0 };
        if dlogp != 0.0 {
            // d logp / d mean_i = (a_i - mean_i) / std_i^2
            // d mean_i / d u_i = scale * (1 - tanh(u_i)^2)
            let dmean = DVector::from_fn(mean.len(), |i, _| {
                let std = policy.log_std[i].exp();
                dlogp * (tr.action[i] - mean[i]) / (std * std)
            });
            let du = DVector::from_fn(u.len(), |i, _| {
                let t = u[i].tanh();
                dmean[i] * policy.action_scale * (1.0 - t * t)
            });
            policy.mlp.backward_into(&trace, &du, &mut mlp_grads);
            for i in 0..policy.act_dim() {
                let std = policy.log_std[i].exp();
                let z = (tr.action[i] - mean[i]) / std;
                // d logp / d log_std_i = z^2 - 1
                logstd_grads[i] += dlogp * (z * z - 1.0);
            }
        }
    }

    if entropy_coef > 0.0 {
        loss -= entropy_coef * policy.entropy();
        // d entropy / d log_std_i = 1
        for i in 0..policy.act_dim() {
            logstd_grads[i] -= entropy_coef;
        }
    }

    let mut grads = mlp_grads.flat().as_slice().to_vec();
    grads.extend_from_slice(logstd_grads.as_slice());
    (loss, DVector::from_vec(grads))
}

/// Mean squared error of value predictions against returns, with its
/// gradient with respect to the value net's flat parameters.
pub fn value_objective(value: &ValueNet, batch: &[Transition]) -> (f64, DVector<f64>) {
    assert!(!batch.is_empty(), "value objective needs a nonempty batch");
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = value.mlp.zero_grads();
    for tr in batch {
        let (v, trace) = value.forward(&tr.obs);
        let err = v - tr.ret;
        loss += err * err / n;
        let dout = DVector::from_vec(vec![2.0 * err / n]);
        value.mlp.backward_into(&trace, &dout, &mut grads);
    }
    (loss, grads.flat())
}

/// One PPO update: `epochs` full-batch gradient steps on both networks.
/// Losses are reported at the entry parameters. On any non-finite
/// parameter both networks and both optimizers roll back to their entry
/// state and `DivergedUpdate` is returned.
pub fn ppo_update(
    policy: &mut PolicyNet,
    value: &mut ValueNet,
    policy_opt: &mut Adam,
    value_opt: &mut Adam,
    batch: &[Transition],
    cfg: &PpoConfig,
) -> Result<(f64, f64), DivergedUpdate> {
    assert!(!batch.is_empty(), "ppo_update needs a nonempty batch");
    let snapshot = (policy.clone(), value.clone(), policy_opt.clone(), value_opt.clone());

    let mut entry_losses = None;
    for epoch in 0..cfg.epochs {
        let (pl, mut pg) = policy_objective(policy, batch, cfg.clip_ratio, cfg.entropy_coef);
        let (vl, mut vg) = value_objective(value, batch);
        if epoch == 0 {
            entry_losses = Some((pl, vl));
        }

        clip_global_norm(&mut pg, cfg.grad_clip);
        clip_global_norm(&mut vg, cfg.grad_clip);

        let mut pp = policy.flat();
        policy_opt.step(&mut pp, &pg);
        policy.set_flat(&pp);
        policy.clamp_log_std();

        let mut vp = value.mlp.flat();
        value_opt.step(&mut vp, &vg);
        value.mlp.set_flat(&vp);

        if !policy.all_finite() || !value.all_finite() {
            let (p, v, po, vo) = snapshot;
            *policy = p;
            *value = v;
            *policy_opt = po;
            *value_opt = vo;
            return Err(DivergedUpdate);
        }
    }

    Ok(entry_losses.expect("epochs >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_batch(
        policy: &PolicyNet,
        rng: &mut ChaCha8Rng,
        n: usize,
        logp_offset: f64,
        advantage: impl Fn(usize) -> f64,
    ) -> Vec<Transition> {
        (0..n)
            .map(|k| {
                let obs = DVector::from_fn(policy.mlp.input_dim(), |_, _| rng.gen_range(-1.0..1.0));
                let (action, logp) = policy.sample_action(&obs, rng);
                Transition {
                    obs,
                    action,
                    // Offset keeps ratios near 1: inside the clip band and
                    // away from the min() kink, where gradients are smooth.
                    logp_old: logp - logp_offset,
                    advantage: advantage(k),
                    ret: rng.gen_range(-1.0..1.0),
                }
            })
            .collect()
    }

    #[test]
    fn gae_hand_computed_example() {
        // Two steps, gamma = 0.5, lambda = 0.5, bootstrap 0 (terminal).
        // delta_1 = 2 + 0.5*0 - 1 = 1;            A_1 = 1
        // delta_0 = 1 + 0.5*1 - 3 = -1.5;         A_0 = -1.5 + 0.25*1 = -1.25
        let (adv, ret) = gae_advantages(&[1.0, 2.0], &[3.0, 1.0], 0.0, 0.5, 0.5);
        assert!((adv[1] - 1.0).abs() < 1e-12);
        assert!((adv[0] + 1.25).abs() < 1e-12);
        assert!((ret[0] - 1.75).abs() < 1e-12);
        assert!((ret[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gae_lambda_zero_is_one_step_td() {
        let rewards = [0.5, -0.2, 1.0];
        let values = [1.0, 0.3, -0.4];
        let (adv, _) = gae_advantages(&rewards, &values, 2.0, 0.9, 0.0);
        for t in 0..3 {
            let next = if t + 1 < 3 { values[t + 1] } else { 2.0 };
            let delta = rewards[t] + 0.9 * next - values[t];
            assert!((adv[t] - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn advantage_normalization_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let policy = PolicyNet::new(2, 4, 1, 1.0, &mut rng);
        let mut batch = toy_batch(&policy, &mut rng, 32, 0.0, |k| k as f64);
        normalize_advantages(&mut batch);
        let n = batch.len() as f64;
        let mean = batch.iter().map(|t| t.advantage).sum::<f64>() / n;
        let var = batch.iter().map(|t| t.advantage * t.advantage).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let policy = PolicyNet::new(2, 6, 1, 1.0, &mut rng);
        let batch = toy_batch(&policy, &mut rng, 10, 0.05, |k| if k % 2 == 0 { 1.0 } else { -0.7 });

        let (_, analytic) = policy_objective(&policy, &batch, 0.2, 0.0);
        let flat = policy.flat();
        let h = 1e-5;
        for k in 0..flat.len() {
            let mut p = policy.clone();
            let mut bumped = flat.clone();
            bumped[k] += h;
            p.set_flat(&bumped);
            let up = policy_objective(&p, &batch, 0.2, 0.0).0;
            bumped[k] -= 2.0 * h;
            p.set_flat(&bumped);
            let down = policy_objective(&p, &batch, 0.2, 0.0).0;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((analytic[k] - numeric) / denom).abs() < 1e-4,
                "param {k}: analytic {} vs numeric {numeric}",
                analytic[k]
            );
        }
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let policy = PolicyNet::new(2, 6, 1, 1.0, &mut rng);
        let value = ValueNet::new(2, 6, &mut rng);
        let batch = toy_batch(&policy, &mut rng, 10, 0.0, |_| 0.0);

        let (_, analytic) = value_objective(&value, &batch);
        let flat = value.mlp.flat();
        let h = 1e-5;
        for k in 0..flat.len() {
            let mut v = value.clone();
            let mut bumped = flat.clone();
            bumped[k] += h;
            v.mlp.set_flat(&bumped);
            let up = value_objective(&v, &batch).0;
            bumped[k] -= 2.0 * h;
            v.mlp.set_flat(&bumped);
            let down = value_objective(&v, &batch).0;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((analytic[k] - numeric) / denom).abs() < 1e-4,
                "param {k}: analytic {} vs numeric {numeric}",
                analytic[k]
            );
        }
    }

    #[test]
    fn zero_advantage_batch_leaves_policy_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut policy = PolicyNet::new(3, 8, 2, 1.0, &mut rng);
        let mut value = ValueNet::new(3, 8, &mut rng);
        let batch = toy_batch(&policy, &mut rng, 16, 0.0, |_| 0.0);
        let before = policy.flat();
        let cfg = PpoConfig::default();
        let mut po = Adam::new(policy.n_params(), cfg.learning_rate);
        let mut vo = Adam::new(value.mlp.n_params(), cfg.learning_rate);
        ppo_update(&mut policy, &mut value, &mut po, &mut vo, &batch, &cfg).unwrap();
        assert_eq!(policy.flat(), before, "zero advantages give exactly zero surrogate gradient");
    }

    #[test]
    fn repeated_update_on_frozen_batch_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut policy = PolicyNet::new(4, 16, 2, 1.0, &mut rng);
        let mut value = ValueNet::new(4, 16, &mut rng);
        let batch = toy_batch(&policy, &mut rng, 64, 0.02, |k| ((k % 5) as f64) - 2.0);
        let cfg = PpoConfig::default();
        let mut po = Adam::new(policy.n_params(), cfg.learning_rate);
        let mut vo = Adam::new(value.mlp.n_params(), cfg.learning_rate);

        let (p1, v1) =
            ppo_update(&mut policy, &mut value, &mut po, &mut vo, &batch, &cfg).unwrap();
        let (p2, v2) =
            ppo_update(&mut policy, &mut value, &mut po, &mut vo, &batch, &cfg).unwrap();
        assert!(p2 <= p1 + 1e-9, "policy loss rose: {p1} -> {p2}");
        assert!(v2 <= v1 + 1e-9, "value loss rose: {v1} -> {v2}");
    }

    #[test]
    fn diverged_update_rolls_back_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut policy = PolicyNet::new(3, 8, 2, 1.0, &mut rng);
        let mut value = ValueNet::new(3, 8, &mut rng);
        let batch = toy_batch(&policy, &mut rng, 8, 0.1, |k| k as f64 + 1.0);
        let cfg = PpoConfig { learning_rate: f64::MAX, ..PpoConfig::default() };
        let before_p = policy.flat();
        let before_v = value.mlp.flat();
        let mut po = Adam::new(policy.n_params(), cfg.learning_rate);
        let mut vo = Adam::new(value.mlp.n_params(), cfg.learning_rate);
        let result = ppo_update(&mut policy, &mut value, &mut po, &mut vo, &batch, &cfg);
        assert_eq!(result, Err(DivergedUpdate));
        assert_eq!(policy.flat(), before_p, "policy restored to entry state");
        assert_eq!(value.mlp.flat(), before_v, "value net restored to entry state");
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig { gamma: 0.0, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig { clip_ratio: 1.5, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig { epochs: 0, ..PpoConfig::default() }.validate().is_err());
    }
}
