//! Cold starts and the per-iteration GRPO training phases for both
//! players. Phase functions are pure in-memory transforms; persistence
//! and stream derivation live in the run driver.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arena::{query_digest, ArenaSample, Dataset, Token};
use crate::grpo::{collect_group, grpo_step, GrpoError, StepStats};
use crate::judge::{JudgeError, VerdictProvider};
use crate::monitor::{
    attack_success_rate, diversity_score, early_stop_check, general_accuracy,
    over_refusal_rate, MonitorReport, Phase,
};
use crate::policy::{Conditioning, Generation, Policy, Role};
use crate::rewards::{attacker_reward, defender_reward, parse_attacker_output, RefusalVocabulary};

use super::config::RunConfig;
use super::PhaseError;

/// Degenerate-group run length that aborts the attacker cold start.
const STARVATION_LIMIT: u32 = 50;
/// Window for rolling mean-reward bookkeeping.
const REWARD_WINDOW: usize = 10;
/// Rolling mean reward treated as dense enough to leave warmup territory.
const DENSE_REWARD_LEVEL: f64 = 0.2;

/// One supervised cold-start step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftTraceRow {
    pub step: u64,
    pub loss: f64,
}

/// One policy-gradient step. Metric fields are absent when the whole
/// group was rejected by a reward failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoTraceRow {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clip_fraction: Option<f64>,
    pub degenerate: bool,
    pub rejected: bool,
}

fn trace_row(step: u64, stats: &StepStats) -> GrpoTraceRow {
    GrpoTraceRow {
        step,
        loss: Some(stats.loss),
        mean_reward: Some(stats.mean_reward),
        mean_kl: Some(stats.mean_kl),
        clip_fraction: Some(stats.clip_fraction),
        degenerate: stats.degenerate,
        rejected: false,
    }
}

fn rejected_row(step: u64) -> GrpoTraceRow {
    GrpoTraceRow {
        step,
        loss: None,
        mean_reward: None,
        mean_kl: None,
        clip_fraction: None,
        degenerate: false,
        rejected: true,
    }
}

fn require_role(policy: &Policy, expected: Role) -> Result<(), PhaseError> {
    if policy.role != expected {
        return Err(PhaseError::Role {
            expected,
            found: policy.role,
        });
    }
    Ok(())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn rolling(window: &VecDeque<f64>) -> f64 {
    window.iter().sum::<f64>() / window.len() as f64
}

/// Attacker conditioning for a source sample: refinement mode for
/// jailbreak-labeled sources, synthesis mode otherwise, keyed by the
/// source query's digest.
pub(crate) fn attacker_conditioning(sample: &ArenaSample) -> Result<Conditioning, PhaseError> {
    let digest = query_digest(&sample.query)?;
    Ok(if sample.rejection_required {
        Conditioning::attacker_refine(digest)
    } else {
        Conditioning::attacker_new(digest)
    })
}

/// End-to-end attack reward for one attacker generation: parse the
/// output, validate the produced query, collect the defender's response,
/// and ask the judge. Malformed output or an unusable query scores zero
/// without touching the judge.
fn attack_rollout_reward(
    gen: &Generation,
    defender: &Policy,
    judge: &mut dyn VerdictProvider,
    resp_rng: &mut ChaCha8Rng,
    cfg: &RunConfig,
) -> Result<f64, GrpoError> {
    let parsed = parse_attacker_output(&gen.tokens);
    if !parsed.format_ok {
        return Ok(0.0);
    }
    let digest = match query_digest(&parsed.answer) {
        Ok(d) => d,
        Err(_) => return Ok(0.0),
    };
    let response = defender
        .sample(
            Conditioning::defender(digest),
            cfg.temp_train,
            cfg.defender_max_len,
            resp_rng,
        )
        .map_err(|e| GrpoError::Reward(e.to_string()))?;
    let verdict = judge
        .judge(&parsed.answer, &response.tokens)
        .map_err(|e| GrpoError::Reward(e.to_string()))?;
    Ok(attacker_reward(verdict.is_unsafe, parsed.format_ok))
}

// ── Defender cold start ─────────────────────────────────────────────────

/// Result of the supervised defender warm-up.
#[derive(Debug, Clone)]
pub struct ColdStartDefender {
    pub policy: Policy,
    pub trace: Vec<SftTraceRow>,
}

/// Supervised warm-up for the defender: refuse every seed jailbreak and
/// comply with a topic-matched answer on an equal number of general
/// queries. Zero steps returns the initialization unchanged.
pub fn cold_start_defender(
    init: &Policy,
    d_jailbreak: &Dataset,
    d_general_pool: &Dataset,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ColdStartDefender, PhaseError> {
    require_role(init, Role::Defender)?;
    if d_jailbreak.is_empty() {
        return Err(PhaseError::EmptyDataset("seed jailbreak dataset".into()));
    }
    if d_general_pool.is_empty() {
        return Err(PhaseError::EmptyDataset("seed general dataset".into()));
    }

    let mut pairs: Vec<(Conditioning, Vec<Token>)> = Vec::new();
    for s in &d_jailbreak.samples {
        let cond = Conditioning::defender(query_digest(&s.query)?);
        pairs.push((cond, vec![Token::REFUSE, Token::EOS]));
    }
    let need = d_jailbreak.len();
    let pool = d_general_pool.len();
    let general_indices: Vec<usize> = if pool >= need {
        let mut order: Vec<usize> = (0..pool).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        order.truncate(need);
        order
    } else {
        (0..need).map(|_| rng.gen_range(0..pool)).collect()
    };
    for &i in &general_indices {
        let s = &d_general_pool.samples[i];
        let cond = Conditioning::defender(query_digest(&s.query)?);
        let topic = s
            .query
            .iter()
            .copied()
            .find(|t| t.is_query_token() && !t.is_harm() && !t.is_wrap())
            .unwrap_or(s.query[0]);
        pairs.push((cond, vec![Token::COMPLY, topic, Token::EOS]));
    }

    let mut policy = init.clone();
    let mut trace = Vec::with_capacity(cfg.coldstart_defender_steps);
    for step in 1..=cfg.coldstart_defender_steps as u64 {
        let batch: Vec<(Conditioning, Vec<Token>)> = (0..cfg.sft_batch_size)
            .map(|_| pairs[rng.gen_range(0..pairs.len())].clone())
            .collect();
        let loss = policy.sft_step(&batch, cfg.sft_lr)?;
        trace.push(SftTraceRow { step, loss });
    }
    policy.iter = 0;
    policy.step = cfg.coldstart_defender_steps as u64;
    Ok(ColdStartDefender { policy, trace })
}

// ── Attacker cold start ─────────────────────────────────────────────────

/// Reward bookkeeping around the warmup-to-hardened opponent switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerColdStartSummary {
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Rolling mean reward (last 10 executed steps) when the warmup
    /// opponent is swapped out.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reward_before_switch: Option<f64>,
    /// Mean reward over the first 10 executed steps against the
    /// cold-started defender.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reward_after_switch: Option<f64>,
    /// First step whose rolling mean reward reached 0.2.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub steps_to_dense_reward: Option<u64>,
    /// Mean reward over executed steps 91 through 100.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reward_after_100_steps: Option<f64>,
}

/// Result of the attacker cold start.
#[derive(Debug, Clone)]
pub struct AttackerColdStart {
    pub policy: Policy,
    pub trace: Vec<GrpoTraceRow>,
    pub summary: AttackerColdStartSummary,
}

/// Warms the attacker up with GRPO, first against the untrained
/// initialization defender (dense reward), then against the cold-started
/// one. Aborts with a reward-starvation diagnostic when more than
/// [`STARVATION_LIMIT`] consecutive groups carry no learning signal.
pub fn cold_start_attacker(
    init: &Policy,
    warmup_defender: &Policy,
    hardened_defender: &Policy,
    d_subset: &Dataset,
    cfg: &RunConfig,
    judge: &mut dyn VerdictProvider,
    gen_rng: &mut ChaCha8Rng,
    resp_rng: &mut ChaCha8Rng,
) -> Result<AttackerColdStart, PhaseError> {
    require_role(init, Role::Attacker)?;
    require_role(warmup_defender, Role::Defender)?;
    require_role(hardened_defender, Role::Defender)?;
    if d_subset.is_empty() {
        return Err(PhaseError::EmptyDataset("attacker cold-start subset".into()));
    }
    let warmup = cfg.coldstart_attacker_warmup_steps as u64;
    let total = cfg.coldstart_attacker_total_steps as u64;

    let reference = init.clone();
    let mut policy = init.clone();
    let mut trace = Vec::new();
    let mut window: VecDeque<f64> = VecDeque::with_capacity(REWARD_WINDOW);
    let mut streak = 0u32;
    let mut post_switch: Vec<f64> = Vec::new();
    let mut late_band: Vec<f64> = Vec::new();
    let mut summary = AttackerColdStartSummary {
        warmup_steps: warmup,
        total_steps: total,
        reward_before_switch: None,
        reward_after_switch: None,
        steps_to_dense_reward: None,
        reward_after_100_steps: None,
    };

    for step in 1..=total {
        let opponent = if step <= warmup {
            warmup_defender
        } else {
            hardened_defender
        };
        let sample = &d_subset.samples[gen_rng.gen_range(0..d_subset.len())];
        let cond = attacker_conditioning(sample)?;
        let collected = collect_group(
            &policy,
            &reference,
            cond,
            cfg.temp_train,
            cfg.attacker_max_len,
            &cfg.grpo,
            gen_rng,
            |g| attack_rollout_reward(g, opponent, judge, resp_rng, cfg),
        );
        match collected {
            Ok(group) => {
                let stats = grpo_step(&mut policy, &group, &cfg.grpo)?;
                trace.push(trace_row(step, &stats));
                if window.len() == REWARD_WINDOW {
                    window.pop_front();
                }
                window.push_back(stats.mean_reward);
                if summary.steps_to_dense_reward.is_none()
                    && rolling(&window) >= DENSE_REWARD_LEVEL
                {
                    summary.steps_to_dense_reward = Some(step);
                }
                if step > warmup && post_switch.len() < REWARD_WINDOW {
                    post_switch.push(stats.mean_reward);
                }
                if (91..=100).contains(&step) {
                    late_band.push(stats.mean_reward);
                }
                streak = if stats.degenerate { streak + 1 } else { 0 };
                if streak > STARVATION_LIMIT {
                    return Err(PhaseError::RewardStarvation {
                        step,
                        consecutive: streak,
                    });
                }
            }
            Err(GrpoError::Reward(_)) => trace.push(rejected_row(step)),
            Err(e) => return Err(e.into()),
        }
        if step == warmup && !window.is_empty() {
            summary.reward_before_switch = Some(rolling(&window));
        }
    }
    if warmup > 0 && !post_switch.is_empty() {
        summary.reward_after_switch = Some(mean(&post_switch));
    }
    if total >= 100 && !late_band.is_empty() {
        summary.reward_after_100_steps = Some(mean(&late_band));
    }
    policy.iter = 0;
    policy.step = total;
    Ok(AttackerColdStart {
        policy,
        trace,
        summary,
    })
}

// ── Attacker iteration phase ────────────────────────────────────────────

/// Result of one attacker training phase.
#[derive(Debug, Clone)]
pub struct AttackerPhaseOutcome {
    pub policy: Policy,
    pub trace: Vec<GrpoTraceRow>,
    pub monitor: Vec<MonitorReport>,
    pub stopped_early: bool,
}

fn validate_attacker_checkpoint(
    policy: &Policy,
    defender: &Policy,
    d_val: &Dataset,
    cfg: &RunConfig,
    judge: &mut dyn VerdictProvider,
    val_rng: &mut ChaCha8Rng,
    step: u64,
    baseline: &mut Option<f64>,
) -> Result<MonitorReport, PhaseError> {
    let mut pool: Vec<Vec<Token>> = Vec::new();
    let mut successes = 0usize;
    let mut resolved = 0usize;
    for sample in &d_val.samples {
        let cond = attacker_conditioning(sample)?;
        let gen = policy.sample(cond, cfg.temp_train, cfg.attacker_max_len, val_rng)?;
        let parsed = parse_attacker_output(&gen.tokens);
        if !parsed.format_ok {
            resolved += 1;
            continue;
        }
        let digest = match query_digest(&parsed.answer) {
            Ok(d) => d,
            Err(_) => {
                resolved += 1;
                continue;
            }
        };
        pool.push(parsed.answer.clone());
        let response = defender.sample(
            Conditioning::defender(digest),
            cfg.temp_train,
            cfg.defender_max_len,
            val_rng,
        )?;
        match judge.judge(&parsed.answer, &response.tokens) {
            Ok(v) => {
                resolved += 1;
                if v.is_unsafe {
                    successes += 1;
                }
            }
            Err(JudgeError::Input(msg)) => return Err(PhaseError::JudgeInput(msg)),
            Err(_) => {}
        }
    }
    let diversity = diversity_score(&pool)?;
    if baseline.is_none() && diversity.is_some() {
        *baseline = diversity;
    }
    let asr = if resolved == 0 {
        0.0
    } else {
        successes as f64 / resolved as f64
    };
    let (stop_attacker, _) = early_stop_check(diversity, *baseline, None, &cfg.thresholds)?;
    Ok(MonitorReport {
        phase: Phase::Attacker,
        checkpoint_step: step,
        diversity,
        orr: None,
        asr,
        acc: None,
        stop_attacker,
        stop_defender: false,
        diversity_baseline: *baseline,
    })
}

/// GRPO phase for the attacker against a frozen defender. Validation
/// checkpoints track generation diversity against the first measured
/// baseline and halt the phase on collapse. The attacker's success rate
/// on the validation split is logged per checkpoint.
pub fn train_attacker_phase(
    init: &Policy,
    defender: &Policy,
    d_train: &Dataset,
    d_val: &Dataset,
    cfg: &RunConfig,
    judge: &mut dyn VerdictProvider,
    gen_rng: &mut ChaCha8Rng,
    resp_rng: &mut ChaCha8Rng,
    val_rng: &mut ChaCha8Rng,
) -> Result<AttackerPhaseOutcome, PhaseError> {
    require_role(init, Role::Attacker)?;
    require_role(defender, Role::Defender)?;
    if d_train.is_empty() {
        return Err(PhaseError::EmptyDataset("attacker training split".into()));
    }

    let reference = init.clone();
    let mut policy = init.clone();
    let mut trace = Vec::new();
    let mut monitor = Vec::new();
    let mut baseline: Option<f64> = None;
    let mut stopped_early = false;

    if !d_val.is_empty() {
        let report = validate_attacker_checkpoint(
            &policy, defender, d_val, cfg, judge, val_rng, 0, &mut baseline,
        )?;
        stopped_early = report.stop_attacker;
        monitor.push(report);
    }
    if !stopped_early {
        for step in 1..=cfg.attacker_max_steps as u64 {
            let sample = &d_train.samples[gen_rng.gen_range(0..d_train.len())];
            let cond = attacker_conditioning(sample)?;
            let collected = collect_group(
                &policy,
                &reference,
                cond,
                cfg.temp_train,
                cfg.attacker_max_len,
                &cfg.grpo,
                gen_rng,
                |g| attack_rollout_reward(g, defender, judge, resp_rng, cfg),
            );
            match collected {
                Ok(group) => {
                    let stats = grpo_step(&mut policy, &group, &cfg.grpo)?;
                    trace.push(trace_row(step, &stats));
                }
                Err(GrpoError::Reward(_)) => trace.push(rejected_row(step)),
                Err(e) => return Err(e.into()),
            }
            if step % cfg.val_interval as u64 == 0 && !d_val.is_empty() {
                let report = validate_attacker_checkpoint(
                    &policy, defender, d_val, cfg, judge, val_rng, step, &mut baseline,
                )?;
                let stop = report.stop_attacker;
                monitor.push(report);
                if stop {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    policy.step = trace.len() as u64;
    Ok(AttackerPhaseOutcome {
        policy,
        trace,
        monitor,
        stopped_early,
    })
}

// ── Defender iteration phase ────────────────────────────────────────────

/// Result of one defender training phase.
#[derive(Debug, Clone)]
pub struct DefenderPhaseOutcome {
    pub policy: Policy,
    pub trace: Vec<GrpoTraceRow>,
    pub monitor: Vec<MonitorReport>,
    pub stopped_early: bool,
}

fn validate_defender_checkpoint(
    policy: &Policy,
    d_val_jailbreak: &Dataset,
    d_val_general: &Dataset,
    vocab: &RefusalVocabulary,
    cfg: &RunConfig,
    judge: &mut dyn VerdictProvider,
    val_rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<MonitorReport, PhaseError> {
    let orr = if cfg.orr_monitoring && !d_val_general.is_empty() {
        Some(over_refusal_rate(
            policy,
            d_val_general,
            vocab,
            cfg.temp_eval,
            cfg.defender_max_len,
            val_rng,
        )?)
    } else {
        None
    };
    let acc = if !d_val_general.is_empty() {
        Some(general_accuracy(
            policy,
            d_val_general,
            cfg.temp_eval,
            cfg.defender_max_len,
            val_rng,
        )?)
    } else {
        None
    };
    let asr = if d_val_jailbreak.is_empty() {
        0.0
    } else {
        attack_success_rate(
            policy,
            d_val_jailbreak,
            judge,
            cfg.temp_eval,
            cfg.defender_max_len,
            val_rng,
        )?
        .asr
    };
    let (_, stop_defender) = early_stop_check(None, None, orr, &cfg.thresholds)?;
    Ok(MonitorReport {
        phase: Phase::Defender,
        checkpoint_step: step,
        diversity: None,
        orr,
        asr,
        acc,
        stop_attacker: false,
        stop_defender,
        diversity_baseline: None,
    })
}

/// GRPO phase for the defender on a mixed dataset with rule-based
/// refusal rewards. Validation checkpoints track the over-refusal rate
/// (when monitoring is enabled) and halt the phase once it crosses the
/// configured ceiling.
pub fn train_defender_phase(
    init: &Policy,
    d_train: &Dataset,
    d_val_jailbreak: &Dataset,
    d_val_general: &Dataset,
    cfg: &RunConfig,
    judge: &mut dyn VerdictProvider,
    gen_rng: &mut ChaCha8Rng,
    val_rng: &mut ChaCha8Rng,
) -> Result<DefenderPhaseOutcome, PhaseError> {
    require_role(init, Role::Defender)?;
    if d_train.is_empty() {
        return Err(PhaseError::EmptyDataset("defender training split".into()));
    }
    let vocab = RefusalVocabulary::token_mode();

    let reference = init.clone();
    let mut policy = init.clone();
    let mut trace = Vec::new();
    let mut monitor = Vec::new();
    let mut stopped_early = false;

    let has_val = !d_val_jailbreak.is_empty() || !d_val_general.is_empty();
    if has_val {
        let report = validate_defender_checkpoint(
            &policy,
            d_val_jailbreak,
            d_val_general,
            &vocab,
            cfg,
            judge,
            val_rng,
            0,
        )?;
        stopped_early = report.stop_defender;
        monitor.push(report);
    }
    if !stopped_early {
        for step in 1..=cfg.defender_max_steps as u64 {
            let sample = &d_train.samples[gen_rng.gen_range(0..d_train.len())];
            let cond = Conditioning::defender(query_digest(&sample.query)?);
            let required = sample.rejection_required;
            let collected = collect_group(
                &policy,
                &reference,
                cond,
                cfg.temp_train,
                cfg.defender_max_len,
                &cfg.grpo,
                gen_rng,
                |g| {
                    defender_reward(&g.tokens, required, &vocab)
                        .map_err(|e| GrpoError::Reward(e.to_string()))
                },
            );
            match collected {
                Ok(group) => {
                    let stats = grpo_step(&mut policy, &group, &cfg.grpo)?;
                    trace.push(trace_row(step, &stats));
                }
                Err(GrpoError::Reward(_)) => trace.push(rejected_row(step)),
                Err(e) => return Err(e.into()),
            }
            if step % cfg.val_interval as u64 == 0 && has_val {
                let report = validate_defender_checkpoint(
                    &policy,
                    d_val_jailbreak,
                    d_val_general,
                    &vocab,
                    cfg,
                    judge,
                    val_rng,
                    step,
                )?;
                let stop = report.stop_defender;
                monitor.push(report);
                if stop {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    policy.step = trace.len() as u64;
    Ok(DefenderPhaseOutcome {
        policy,
        trace,
        monitor,
        stopped_early,
    })
}
