//! Group-relative policy optimization.
//!
//! A group of rollouts is sampled for one input, rewards are normalized
//! within the group into advantages, and the policy takes a clipped
//! importance-weighted step with a per-token anchor penalty toward the
//! phase-start reference. The surrogate and its gradient operate on a raw
//! `Table` so they can be checked against finite differences on tiny
//! shapes; `Policy` callers go through thin wrappers.

use rand::Rng;

use crate::policy::{Conditioning, Generation, Policy, PolicyError, Table};

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("rollout group is empty")]
    EmptyGroup,
    #[error("rollout {index} is empty")]
    EmptyRollout { index: usize },
    #[error("rollout {index} has misaligned row/target/logprob lengths")]
    MisalignedRollout { index: usize },
    #[error("non-finite reward {reward} in rollout {index}")]
    NonFiniteReward { index: usize, reward: f64 },
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("reward computation failed: {0}")]
    Reward(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Optimizer settings for one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    /// Rollouts sampled per input.
    pub group_size: usize,
    /// Importance-ratio clip half-width.
    pub clip_eps: f64,
    /// Weight of the anchor penalty toward the reference policy.
    pub kl_beta: f64,
    pub lr: f64,
    /// Gradient steps taken per collected group.
    pub epochs_per_batch: usize,
    /// Reward spreads below this are treated as no signal.
    pub std_floor: f64,
}

impl Default for GrpoConfig {
    fn default() -> GrpoConfig {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.04,
            lr: 1.0,
            epochs_per_batch: 4,
            std_floor: 1e-8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::Config(format!(
                "group_size must be at least 2 (got {})",
                self.group_size
            )));
        }
        if !(self.clip_eps.is_finite() && self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(GrpoError::Config(format!(
                "clip_eps must lie in (0, 1) (got {})",
                self.clip_eps
            )));
        }
        if !(self.kl_beta.is_finite() && self.kl_beta >= 0.0) {
            return Err(GrpoError::Config(format!(
                "kl_beta must be non-negative (got {})",
                self.kl_beta
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(GrpoError::Config(format!(
                "lr must be positive (got {})",
                self.lr
            )));
        }
        if self.epochs_per_batch == 0 {
            return Err(GrpoError::Config("epochs_per_batch must be positive".into()));
        }
        if !(self.std_floor.is_finite() && self.std_floor > 0.0) {
            return Err(GrpoError::Config(format!(
                "std_floor must be positive (got {})",
                self.std_floor
            )));
        }
        Ok(())
    }
}

/// One sampled trajectory, frozen at collection time.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Context row visited at each step.
    pub rows: Vec<usize>,
    /// Column (token id) emitted at each step.
    pub targets: Vec<usize>,
    /// Log-probabilities under the sampling-time policy.
    pub old_logprobs: Vec<f64>,
    /// Log-probabilities under the phase-start reference policy.
    pub ref_logprobs: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    fn validate(&self) -> Result<(), GrpoError> {
        if self.rollouts.is_empty() {
            return Err(GrpoError::EmptyGroup);
        }
        for (index, r) in self.rollouts.iter().enumerate() {
            if r.targets.is_empty() {
                return Err(GrpoError::EmptyRollout { index });
            }
            let t = r.targets.len();
            if r.rows.len() != t || r.old_logprobs.len() != t || r.ref_logprobs.len() != t {
                return Err(GrpoError::MisalignedRollout { index });
            }
            if !r.reward.is_finite() {
                return Err(GrpoError::NonFiniteReward {
                    index,
                    reward: r.reward,
                });
            }
        }
        Ok(())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

/// Group-normalized advantages plus the no-signal flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub values: Vec<f64>,
    /// True when the reward spread fell below the floor; values are all
    /// zero and the step must be skipped.
    pub degenerate: bool,
}

/// Normalizes rewards within the group: `(r - mean) / std` with the
/// population standard deviation, or all zeros when the spread is below
/// `std_floor`.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<Advantages, GrpoError> {
    if rewards.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    for (index, &reward) in rewards.iter().enumerate() {
        if !reward.is_finite() {
            return Err(GrpoError::NonFiniteReward { index, reward });
        }
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < std_floor {
        return Ok(Advantages {
            values: vec![0.0; rewards.len()],
            degenerate: true,
        });
    }
    Ok(Advantages {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    })
}

/// Low-variance anchor penalty between current and reference log-probs of
/// one token: `exp(d) - d - 1` with `d = ref - cur`. Non-negative, zero
/// iff the probabilities agree.
pub fn kl_term(cur_logprob: f64, ref_logprob: f64) -> f64 {
    let d = ref_logprob - cur_logprob;
    d.exp() - d - 1.0
}

/// Everything one pass over a group produces.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub mean_reward: f64,
    /// Mean anchor penalty, weighted like the loss.
    pub mean_kl: f64,
    /// Fraction of tokens whose policy gradient was nulled by clipping.
    pub clip_fraction: f64,
    pub degenerate: bool,
}

struct Evaluation {
    loss: f64,
    grad: Vec<f64>,
    mean_kl: f64,
    clip_fraction: f64,
}

/// Single fused pass computing the surrogate loss, its exact gradient,
/// and the clip diagnostics. The loss for one group is
///
///   mean over rollouts of (1/T) * sum over tokens of
///     -min(rho * A, clip(rho, 1-eps, 1+eps) * A) + beta * k3
///
/// with `rho = exp(cur - old)` per token. The policy term contributes
/// gradient only on the unclipped branch (ties included).
fn evaluate(table: &Table, group: &RolloutGroup, adv: &[f64], cfg: &GrpoConfig) -> Evaluation {
    let n = group.rollouts.len() as f64;
    let cols = table.cols();
    let mut grad = vec![0.0; table.rows() * cols];
    let mut loss = 0.0;
    let mut kl_total = 0.0;
    let mut clipped_tokens = 0usize;
    let mut total_tokens = 0usize;

    for (r, a) in group.rollouts.iter().zip(adv) {
        let t = r.targets.len() as f64;
        let scale = 1.0 / (n * t);
        for i in 0..r.targets.len() {
            let row = r.rows[i];
            let tgt = r.targets[i];
            let logp = table.log_softmax(row);
            let cur = logp[tgt];
            let rho = (cur - r.old_logprobs[i]).exp();
            let unclipped = rho * a;
            let clipped = rho.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * a;
            let active = unclipped <= clipped;
            let d = r.ref_logprobs[i] - cur;
            let k3 = d.exp() - d - 1.0;

            loss += scale * (-unclipped.min(clipped) + cfg.kl_beta * k3);
            kl_total += scale * k3;
            total_tokens += 1;
            if !active {
                clipped_tokens += 1;
            }

            let dloss_dcur = scale
                * (-(if active { unclipped } else { 0.0 }) + cfg.kl_beta * (1.0 - d.exp()));
            let base = row * cols;
            for (c, lp) in logp.iter().enumerate() {
                grad[base + c] -= dloss_dcur * lp.exp();
            }
            grad[base + tgt] += dloss_dcur;
        }
    }

    Evaluation {
        loss,
        grad,
        mean_kl: kl_total,
        clip_fraction: clipped_tokens as f64 / total_tokens.max(1) as f64,
    }
}

/// Surrogate loss of a group at fixed advantages.
pub fn grpo_loss(table: &Table, group: &RolloutGroup, adv: &[f64], cfg: &GrpoConfig) -> f64 {
    evaluate(table, group, adv, cfg).loss
}

/// Exact gradient of `grpo_loss` with respect to every table entry.
pub fn grpo_grad(table: &Table, group: &RolloutGroup, adv: &[f64], cfg: &GrpoConfig) -> Vec<f64> {
    evaluate(table, group, adv, cfg).grad
}

/// One optimizer step on a collected group: normalizes rewards, skips the
/// update when the group carries no signal, otherwise applies
/// `epochs_per_batch` gradient steps. Reported stats describe the state
/// before the first update.
pub fn grpo_step_table(
    table: &mut Table,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
) -> Result<StepStats, GrpoError> {
    cfg.validate()?;
    group.validate()?;
    let rewards = group.rewards();
    let adv = compute_advantages(&rewards, cfg.std_floor)?;
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;

    let first = evaluate(table, group, &adv.values, cfg);
    let stats = StepStats {
        loss: first.loss,
        mean_reward,
        mean_kl: first.mean_kl,
        clip_fraction: first.clip_fraction,
        degenerate: adv.degenerate,
    };
    if adv.degenerate {
        return Ok(stats);
    }

    let mut current = first;
    for epoch in 0..cfg.epochs_per_batch {
        if epoch > 0 {
            current = evaluate(table, group, &adv.values, cfg);
        }
        for (p, g) in table.params_mut().iter_mut().zip(&current.grad) {
            *p -= cfg.lr * g;
        }
    }
    Ok(stats)
}

/// Policy-level wrapper around `grpo_step_table`.
pub fn grpo_step(
    policy: &mut Policy,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
) -> Result<StepStats, GrpoError> {
    grpo_step_table(policy.table_mut(), group, cfg)
}

/// Samples `group_size` rollouts for one conditioning and scores each with
/// `reward_fn`. Reference log-probs are taken against the phase-start
/// snapshot so the anchor penalty stays meaningful across the phase. Any
/// reward failure rejects the whole group.
pub fn collect_group<R, F>(
    policy: &Policy,
    reference: &Policy,
    cond: Conditioning,
    temperature: f64,
    max_len: usize,
    cfg: &GrpoConfig,
    rng: &mut R,
    mut reward_fn: F,
) -> Result<RolloutGroup, GrpoError>
where
    R: Rng,
    F: FnMut(&Generation) -> Result<f64, GrpoError>,
{
    cfg.validate()?;
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let gen = policy.sample(cond, temperature, max_len, rng)?;
        let reward = reward_fn(&gen)?;
        let rows = Policy::context_rows(cond, &gen.tokens);
        let ref_logprobs = reference.log_prob(cond, &gen.tokens)?;
        rollouts.push(Rollout {
            rows,
            targets: gen.tokens.iter().map(|t| t.id() as usize).collect(),
            old_logprobs: gen.logprobs,
            ref_logprobs,
            reward,
        });
    }
    Ok(RolloutGroup { rollouts })
}
