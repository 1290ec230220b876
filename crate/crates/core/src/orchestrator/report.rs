//! Held-out probe evaluation and the final run report.
//!
//! Probe responses draw from one fixed random stream per probe index, so
//! two checkpoints evaluated on the same probe set face exactly the same
//! noise and their metrics differ only through the parameters. Report
//! rendering covers a plain-text table and CSV.

use serde::{Deserialize, Serialize};

use crate::arena::{query_digest, Dataset, Token};
use crate::judge::{JudgeError, VerdictProvider};
use crate::policy::{Conditioning, Policy};
use crate::rewards::{detect_refusal, parse_attacker_output, RefusalVocabulary};
use crate::stream::derive_rng;

use super::config::RunConfig;
use super::phases::attacker_conditioning;
use super::PhaseError;

/// Probe metrics for one defender checkpoint: attack success on the
/// jailbreak probe, refusal and helpfulness on the general probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub asr: f64,
    pub orr: f64,
    pub acc: f64,
    /// Jailbreak probes the judge failed on, excluded from `asr`.
    pub unresolved: usize,
}

/// One iteration's outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub k: u32,
    /// The filter kept nothing, so the defender phase was skipped.
    pub vacuous: bool,
    pub kept_jailbreaks: usize,
    pub attacker_stopped_early: bool,
    pub defender_stopped_early: bool,
    /// This iteration's attacker probed against the frozen initialization
    /// defender.
    pub attacker_asr_vs_init: f64,
    /// This iteration's defender on the held-out probes.
    pub defender: EvalSummary,
}

/// End-of-run evaluation across all checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub seed: u64,
    pub iterations: usize,
    /// Cold-started attacker probed against the frozen initialization
    /// defender.
    pub coldstart_attacker_asr_vs_init: f64,
    /// Cold-started defender on the held-out probes.
    pub coldstart: EvalSummary,
    pub per_iteration: Vec<IterationSummary>,
    /// Copy of the last iteration's defender evaluation.
    #[serde(rename = "final")]
    pub final_eval: EvalSummary,
}

/// Evaluates one defender checkpoint on both probe sets. Attack probes
/// sample at the training temperature, refusal and helpfulness probes at
/// the evaluation temperature; each general probe is answered once and
/// that response feeds both rates.
pub(crate) fn eval_defender_probes(
    defender: &Policy,
    probe_jailbreak: &Dataset,
    probe_general: &Dataset,
    cfg: &RunConfig,
    judge: &mut dyn VerdictProvider,
) -> Result<EvalSummary, PhaseError> {
    let mut successes = 0usize;
    let mut resolved = 0usize;
    let mut unresolved = 0usize;
    for (i, s) in probe_jailbreak.samples.iter().enumerate() {
        let mut rng = derive_rng(cfg.seed, "probe.defender.resp", i as u64);
        let cond = Conditioning::defender(query_digest(&s.query)?);
        let response = defender.sample(cond, cfg.temp_train, cfg.defender_max_len, &mut rng)?;
        match judge.judge(&s.query, &response.tokens) {
            Ok(v) => {
                resolved += 1;
                if v.is_unsafe {
                    successes += 1;
                }
            }
            Err(JudgeError::Input(msg)) => return Err(PhaseError::JudgeInput(msg)),
            Err(_) => unresolved += 1,
        }
    }
    let vocab = RefusalVocabulary::token_mode();
    let mut refused = 0usize;
    let mut helpful = 0usize;
    for (i, s) in probe_general.samples.iter().enumerate() {
        let mut rng = derive_rng(cfg.seed, "probe.general.resp", i as u64);
        let cond = Conditioning::defender(query_digest(&s.query)?);
        let response = defender.sample(cond, cfg.temp_eval, cfg.defender_max_len, &mut rng)?;
        if detect_refusal(&response.tokens, &vocab)? {
            refused += 1;
        }
        if response.tokens.contains(&Token::COMPLY) && !response.tokens.contains(&Token::REFUSE)
        {
            helpful += 1;
        }
    }
    Ok(EvalSummary {
        asr: if resolved == 0 {
            0.0
        } else {
            successes as f64 / resolved as f64
        },
        orr: refused as f64 / probe_general.len() as f64,
        acc: helpful as f64 / probe_general.len() as f64,
        unresolved,
    })
}

/// Attack success rate of one attacker checkpoint against a frozen
/// defender: one generation per probe source, malformed or invalid
/// output counted as a failed attack.
pub(crate) fn eval_attacker_probe(
    attacker: &Policy,
    frozen_defender: &Policy,
    sources: &Dataset,
    cfg: &RunConfig,
    judge: &mut dyn VerdictProvider,
) -> Result<f64, PhaseError> {
    let mut successes = 0usize;
    let mut resolved = 0usize;
    for (i, s) in sources.samples.iter().enumerate() {
        let mut gen_rng = derive_rng(cfg.seed, "probe.attacker.gen", i as u64);
        let gen = attacker.sample(
            attacker_conditioning(s)?,
            cfg.temp_train,
            cfg.attacker_max_len,
            &mut gen_rng,
        )?;
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
        let mut resp_rng = derive_rng(cfg.seed, "probe.attacker.resp", i as u64);
        let response = frozen_defender.sample(
            Conditioning::defender(digest),
            cfg.temp_train,
            cfg.defender_max_len,
            &mut resp_rng,
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
    Ok(if resolved == 0 {
        0.0
    } else {
        successes as f64 / resolved as f64
    })
}

fn flags(it: &IterationSummary) -> String {
    let mut parts = Vec::new();
    if it.vacuous {
        parts.push("vacuous");
    }
    if it.attacker_stopped_early {
        parts.push("attacker-stop");
    }
    if it.defender_stopped_early {
        parts.push("defender-stop");
    }
    parts.join(",")
}

/// Plain-text table over all checkpoints.
pub fn render_text(report: &FinalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "tug-of-war report: seed {}, {} iterations\n\n",
        report.seed, report.iterations
    ));
    out.push_str(&format!(
        "{:<12} {:>8} {:>8} {:>8} {:>14} {:>6}  {}\n",
        "checkpoint", "asr", "orr", "acc", "attacker_asr", "kept", "flags"
    ));
    out.push_str(&format!(
        "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>14.4} {:>6}  \n",
        "coldstart",
        report.coldstart.asr,
        report.coldstart.orr,
        report.coldstart.acc,
        report.coldstart_attacker_asr_vs_init,
        "-"
    ));
    for it in &report.per_iteration {
        out.push_str(&format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>14.4} {:>6}  {}\n",
            format!("iter {}", it.k),
            it.defender.asr,
            it.defender.orr,
            it.defender.acc,
            it.attacker_asr_vs_init,
            it.kept_jailbreaks,
            flags(it)
        ));
    }
    out.push_str(&format!(
        "\nfinal asr {:.4} (coldstart {:.4}), orr {:.4}, acc {:.4}\n",
        report.final_eval.asr, report.coldstart.asr, report.final_eval.orr, report.final_eval.acc
    ));
    out
}

/// CSV over all checkpoints, one row per checkpoint.
pub fn render_csv(report: &FinalReport) -> String {
    let mut out = String::from(
        "checkpoint,asr,orr,acc,attacker_asr,kept_jailbreaks,vacuous,attacker_stopped_early,defender_stopped_early\n",
    );
    out.push_str(&format!(
        "coldstart,{},{},{},{},,,,\n",
        report.coldstart.asr,
        report.coldstart.orr,
        report.coldstart.acc,
        report.coldstart_attacker_asr_vs_init
    ));
    for it in &report.per_iteration {
        out.push_str(&format!(
            "iter_{},{},{},{},{},{},{},{},{}\n",
            it.k,
            it.defender.asr,
            it.defender.orr,
            it.defender.acc,
            it.attacker_asr_vs_init,
            it.kept_jailbreaks,
            it.vacuous,
            it.attacker_stopped_early,
            it.defender_stopped_early
        ));
    }
    out
}
