//! Persisted run driver. A run is a fixed sequence of stages (seed data,
//! two cold starts, five sub-steps per iteration, final evaluation), each
//! of which loads its inputs from disk, writes its artifacts atomically,
//! and is skipped when those artifacts already exist. Rerunning the same
//! configuration against the same directory therefore resumes a killed
//! run at the first incomplete stage and reproduces the exact bytes a
//! single uninterrupted run would have written.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::arena::{
    gen_eval_probes, gen_seed_datasets, partition, ArenaError, ArenaSample, Dataset, DatasetKind,
    Origin, Token,
};
use crate::augment::{
    assemble_iteration_dataset, filter_high_quality, generate_candidates, write_augment_report,
    AugmentMode, AugmentRecord,
};
use crate::judge::{JudgeEndpoint, RemoteJudge, RuleJudge, VerdictProvider};
use crate::monitor::MonitorReport;
use crate::policy::{Policy, Role};
use crate::stream::{derive_rng, mix};
use rand::Rng;

use super::config::RunConfig;
use super::phases::{
    cold_start_attacker, cold_start_defender, train_attacker_phase, train_defender_phase,
};
use super::report::{eval_attacker_probe, eval_defender_probes, FinalReport, IterationSummary};
use super::{PhaseError, RunError};

/// Fraction of held-out probe jailbreaks that wrap their harm tokens.
const PROBE_WRAPPED_FRACTION: f64 = 0.5;

/// File layout inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> RunPaths {
        RunPaths { root: root.into() }
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn final_report(&self) -> PathBuf {
        self.root.join("final_report.json")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn d_jailbreak(&self) -> PathBuf {
        self.data_dir().join("d_j.jsonl")
    }

    pub fn d_general(&self) -> PathBuf {
        self.data_dir().join("d_g.jsonl")
    }

    pub fn probe_jailbreak(&self) -> PathBuf {
        self.data_dir().join("probe_j.jsonl")
    }

    pub fn probe_general(&self) -> PathBuf {
        self.data_dir().join("probe_g.jsonl")
    }

    pub fn coldstart_dir(&self) -> PathBuf {
        self.root.join("coldstart")
    }

    pub fn coldstart_defender_trace(&self) -> PathBuf {
        self.coldstart_dir().join("defender_trace.jsonl")
    }

    pub fn coldstart_defender_ckpt(&self) -> PathBuf {
        self.coldstart_dir().join("defender.ckpt")
    }

    pub fn coldstart_attacker_trace(&self) -> PathBuf {
        self.coldstart_dir().join("attacker_trace.jsonl")
    }

    pub fn coldstart_attacker_summary(&self) -> PathBuf {
        self.coldstart_dir().join("attacker_summary.json")
    }

    pub fn coldstart_attacker_ckpt(&self) -> PathBuf {
        self.coldstart_dir().join("attacker.ckpt")
    }

    pub fn iter_dir(&self, k: usize) -> PathBuf {
        self.root.join(format!("iter_{k}"))
    }

    pub fn attacker_trace(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("attacker_trace.jsonl")
    }

    pub fn attacker_monitor(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("attacker_monitor.jsonl")
    }

    pub fn attacker_ckpt(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("attacker.ckpt")
    }

    pub fn candidates(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("candidates.jsonl")
    }

    pub fn candidates_stats(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("candidates_stats.json")
    }

    pub fn augment_report(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("augment_report.jsonl")
    }

    pub fn d_j_new(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("d_j_new.jsonl")
    }

    pub fn filter_stats(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("filter_stats.json")
    }

    pub fn d_new(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("d_new.jsonl")
    }

    pub fn assembly(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("assembly.json")
    }

    pub fn defender_trace(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("defender_trace.jsonl")
    }

    pub fn defender_monitor(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("defender_monitor.jsonl")
    }

    pub fn monitor(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("monitor.jsonl")
    }

    pub fn defender_ckpt(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("defender.ckpt")
    }
}

/// What one driver invocation did and produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub paths: RunPaths,
    /// Present once the run has completed its final evaluation.
    pub report: Option<FinalReport>,
    /// The stage a requested halt triggered after, if any.
    pub halted_after: Option<String>,
    /// Stages this invocation actually executed. Stages whose artifacts
    /// were already on disk are skipped and not listed.
    pub executed: Vec<String>,
}

/// Stage names in execution order for a run with `iterations` rounds.
/// These are the values accepted as a halt point.
pub fn stage_sequence(iterations: usize) -> Vec<String> {
    let mut names = vec![
        "data".to_string(),
        "coldstart_defender".to_string(),
        "coldstart_attacker".to_string(),
    ];
    for k in 1..=iterations {
        for sub in ["attacker", "candidates", "filter", "assemble", "defender"] {
            names.push(format!("iter{k}_{sub}"));
        }
    }
    names.push("finalize".to_string());
    names
}

/// Generates and persists the seed datasets and evaluation probes, then
/// stops. Equivalent to a full run halted after its first stage.
pub fn run_data_stage(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    run_tug_of_war_with_halt(cfg, Some("data"))
}

/// Runs (or resumes) the complete tug-of-war schedule described by `cfg`.
pub fn run_tug_of_war(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    run_tug_of_war_with_halt(cfg, None)
}

/// Like [`run_tug_of_war`], but stops after the named stage completes.
/// See [`stage_sequence`] for the accepted names. The halt point applies
/// to the schedule position, not to work done: a resumed run still halts
/// at the named stage even when it was restored from disk rather than
/// executed.
pub fn run_tug_of_war_with_halt(
    cfg: &RunConfig,
    halt_after: Option<&str>,
) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    if let Some(h) = halt_after {
        if !stage_sequence(cfg.iterations).iter().any(|s| s == h) {
            return Err(RunError::Config(format!("unknown halt stage `{h}`")));
        }
    }
    let paths = RunPaths::new(&cfg.run_dir);
    prepare_run_dir(cfg, &paths)?;

    let mut executed: Vec<String> = Vec::new();
    let mut judge = make_judge(cfg);
    let halted = |stage: &str| halt_after == Some(stage);
    let outcome = |paths: &RunPaths, report, stage: Option<&str>, executed: Vec<String>| RunOutcome {
        paths: paths.clone(),
        report,
        halted_after: stage.map(str::to_string),
        executed,
    };

    // Seed datasets and held-out probes.
    let stage = "data";
    let artifacts = [
        paths.d_jailbreak(),
        paths.d_general(),
        paths.probe_jailbreak(),
        paths.probe_general(),
    ];
    if !all_exist(&artifacts) {
        let (d_j, d_g) = gen_seed_datasets(cfg.seed, cfg.n_jailbreak, cfg.n_general)
            .map_err(PhaseError::from)
            .map_err(RunError::in_phase(stage))?;
        let (p_j, p_g) = gen_eval_probes(
            cfg.seed,
            cfg.probe_jailbreak,
            cfg.probe_general,
            PROBE_WRAPPED_FRACTION,
        )
        .map_err(PhaseError::from)
        .map_err(RunError::in_phase(stage))?;
        fs::create_dir_all(paths.data_dir())?;
        write_atomic(&paths.d_jailbreak(), d_j.to_jsonl().as_bytes())?;
        write_atomic(&paths.d_general(), d_g.to_jsonl().as_bytes())?;
        write_atomic(&paths.probe_jailbreak(), p_j.to_jsonl().as_bytes())?;
        write_atomic(&paths.probe_general(), p_g.to_jsonl().as_bytes())?;
        executed.push(stage.into());
    }
    if halted(stage) {
        return Ok(outcome(&paths, None, Some(stage), executed));
    }

    let d_j = load_dataset(&paths.d_jailbreak(), "data")?;
    let d_g = load_dataset(&paths.d_general(), "data")?;
    let jail_parts = partition(&d_j, cfg.iterations, cfg.seed)
        .map_err(PhaseError::from)
        .map_err(RunError::in_phase("data"))?;
    let gen_parts = partition(&d_g, cfg.iterations, mix(cfg.seed, "partition.general", 0))
        .map_err(PhaseError::from)
        .map_err(RunError::in_phase("data"))?;

    // Defender cold start on the full seed data.
    let stage = "coldstart_defender";
    let artifacts = [
        paths.coldstart_defender_trace(),
        paths.coldstart_defender_ckpt(),
    ];
    if !all_exist(&artifacts) {
        let mut rng = derive_rng(cfg.seed, "coldstart.sft", 0);
        let out = cold_start_defender(&Policy::defender_base(), &d_j, &d_g, cfg, &mut rng)
            .map_err(RunError::in_phase(stage))?;
        fs::create_dir_all(paths.coldstart_dir())?;
        write_atomic(&paths.coldstart_defender_trace(), jsonl(&out.trace)?.as_bytes())?;
        save_policy_atomic(&out.policy, &paths.coldstart_defender_ckpt())
            .map_err(RunError::in_phase(stage))?;
        executed.push(stage.into());
    }
    if halted(stage) {
        return Ok(outcome(&paths, None, Some(stage), executed));
    }

    // Attacker cold start: reward warmup against the pre-hardening
    // defender, then the hardened cold-start defender.
    let stage = "coldstart_attacker";
    let artifacts = [
        paths.coldstart_attacker_trace(),
        paths.coldstart_attacker_summary(),
        paths.coldstart_attacker_ckpt(),
    ];
    if !all_exist(&artifacts) {
        let hardened = load_policy(&paths.coldstart_defender_ckpt(), Role::Defender, 0, stage)?;
        let subset = coldstart_subset(
            &jail_parts[0],
            &gen_parts[0],
            cfg.attacker_coldstart_fraction,
        );
        let mut gen_rng = derive_rng(cfg.seed, "coldstart.attacker.gen", 0);
        let mut resp_rng = derive_rng(cfg.seed, "coldstart.attacker.resp", 0);
        let out = cold_start_attacker(
            &Policy::attacker_base(),
            &Policy::defender_base(),
            &hardened,
            &subset,
            cfg,
            judge.as_mut(),
            &mut gen_rng,
            &mut resp_rng,
        )
        .map_err(RunError::in_phase(stage))?;
        write_atomic(&paths.coldstart_attacker_trace(), jsonl(&out.trace)?.as_bytes())?;
        write_atomic(
            &paths.coldstart_attacker_summary(),
            (serde_json::to_string(&out.summary)? + "\n").as_bytes(),
        )?;
        save_policy_atomic(&out.policy, &paths.coldstart_attacker_ckpt())
            .map_err(RunError::in_phase(stage))?;
        executed.push(stage.into());
    }
    if halted(stage) {
        return Ok(outcome(&paths, None, Some(stage), executed));
    }

    for k in 1..=cfg.iterations {
        let d_k = iteration_dataset(&jail_parts, &gen_parts, k);
        let (train, val) = split_train_val(&d_k, cfg.train_val_split, cfg.seed, k);
        let val_jail = filter_required(&val, true);
        let val_general = filter_required(&val, false);

        // Attacker phase against the frozen previous defender.
        let stage = format!("iter{k}_attacker");
        let artifacts = [
            paths.attacker_trace(k),
            paths.attacker_monitor(k),
            paths.attacker_ckpt(k),
        ];
        if !all_exist(&artifacts) {
            let prev_attacker = load_prev(&paths, Role::Attacker, k, &stage)?;
            let prev_defender = load_prev(&paths, Role::Defender, k, &stage)?;
            let mut gen_rng = derive_rng(cfg.seed, "phase.attacker.gen", k as u64);
            let mut resp_rng = derive_rng(cfg.seed, "phase.attacker.resp", k as u64);
            let mut val_rng = derive_rng(cfg.seed, "phase.attacker.val", k as u64);
            let mut out = train_attacker_phase(
                &prev_attacker,
                &prev_defender,
                &train,
                &val,
                cfg,
                judge.as_mut(),
                &mut gen_rng,
                &mut resp_rng,
                &mut val_rng,
            )
            .map_err(RunError::in_phase(&stage))?;
            out.policy.iter = k as u32;
            fs::create_dir_all(paths.iter_dir(k))?;
            write_atomic(&paths.attacker_trace(k), jsonl(&out.trace)?.as_bytes())?;
            write_atomic(&paths.attacker_monitor(k), jsonl(&out.monitor)?.as_bytes())?;
            save_policy_atomic(&out.policy, &paths.attacker_ckpt(k))
                .map_err(RunError::in_phase(&stage))?;
            executed.push(stage.clone());
        }
        if halted(&stage) {
            return Ok(outcome(&paths, None, Some(&stage), executed));
        }

        // Candidate generation over the full iteration dataset.
        let stage = format!("iter{k}_candidates");
        let artifacts = [paths.candidates(k), paths.candidates_stats(k)];
        if !all_exist(&artifacts) {
            let attacker = load_policy(&paths.attacker_ckpt(k), Role::Attacker, k as u32, &stage)?;
            let mut rng = derive_rng(cfg.seed, "candidates", k as u64);
            let batch =
                generate_candidates(&attacker, &d_k, cfg.temp_train, cfg.attacker_max_len, &mut rng)
                    .map_err(PhaseError::from)
                    .map_err(RunError::in_phase(&stage))?;
            let lines: Vec<CandidateLine> =
                batch.records.iter().map(CandidateLine::from_record).collect();
            let stats = CandidateStats {
                generated: batch.records.len() + batch.format_dropped + batch.invalid_query_dropped,
                format_dropped: batch.format_dropped,
                invalid_query_dropped: batch.invalid_query_dropped,
            };
            write_atomic(&paths.candidates(k), jsonl(&lines)?.as_bytes())?;
            write_atomic(
                &paths.candidates_stats(k),
                (serde_json::to_string(&stats)? + "\n").as_bytes(),
            )?;
            executed.push(stage.clone());
        }
        if halted(&stage) {
            return Ok(outcome(&paths, None, Some(&stage), executed));
        }

        // Quality filtering by sampling the previous defender.
        let stage = format!("iter{k}_filter");
        let artifacts = [
            paths.augment_report(k),
            paths.d_j_new(k),
            paths.filter_stats(k),
        ];
        if !all_exist(&artifacts) {
            let prev_defender = load_prev(&paths, Role::Defender, k, &stage)?;
            let records = read_candidates(&paths.candidates(k), &stage)?;
            let total = records.len();
            let mut rng = derive_rng(cfg.seed, "filter", k as u64);
            let out = filter_high_quality(
                &prev_defender,
                records,
                cfg.filter_n,
                judge.as_mut(),
                cfg.defender_max_len,
                &mut rng,
            )
            .map_err(PhaseError::from)
            .map_err(RunError::in_phase(&stage))?;
            let report_tmp = tmp_path(&paths.augment_report(k));
            write_augment_report(&report_tmp, &out.records)
                .map_err(PhaseError::from)
                .map_err(RunError::in_phase(&stage))?;
            fs::rename(&report_tmp, paths.augment_report(k))?;
            write_atomic(&paths.d_j_new(k), out.dataset.to_jsonl().as_bytes())?;
            let stats = FilterStats {
                candidates: total,
                kept: out.dataset.len(),
                benign_discarded: out.benign_discarded,
                unresolved: out.unresolved,
            };
            write_atomic(
                &paths.filter_stats(k),
                (serde_json::to_string(&stats)? + "\n").as_bytes(),
            )?;
            executed.push(stage.clone());
        }
        if halted(&stage) {
            return Ok(outcome(&paths, None, Some(&stage), executed));
        }

        // Mix the kept jailbreaks 1:1 with training-split generals.
        let stage = format!("iter{k}_assemble");
        let artifacts = [paths.d_new(k), paths.assembly(k)];
        if !all_exist(&artifacts) {
            let d_j_new = load_dataset(&paths.d_j_new(k), &stage)?;
            let general_pool = filter_required(&train, false);
            let mut rng = derive_rng(cfg.seed, "assemble", k as u64);
            let out = assemble_iteration_dataset(&d_j_new, &general_pool, &mut rng)
                .map_err(PhaseError::from)
                .map_err(RunError::in_phase(&stage))?;
            let stats = AssemblyStats {
                size: out.dataset.len(),
                no_new_data: out.no_new_data,
                shortfall_with_replacement: out.shortfall_with_replacement,
            };
            write_atomic(&paths.d_new(k), out.dataset.to_jsonl().as_bytes())?;
            write_atomic(
                &paths.assembly(k),
                (serde_json::to_string(&stats)? + "\n").as_bytes(),
            )?;
            executed.push(stage.clone());
        }
        if halted(&stage) {
            return Ok(outcome(&paths, None, Some(&stage), executed));
        }

        // Defender phase on the assembled data; skipped entirely when no
        // jailbreak survived filtering, carrying the old weights forward.
        let stage = format!("iter{k}_defender");
        let artifacts = [
            paths.defender_trace(k),
            paths.defender_monitor(k),
            paths.monitor(k),
            paths.defender_ckpt(k),
        ];
        if !all_exist(&artifacts) {
            let prev_defender = load_prev(&paths, Role::Defender, k, &stage)?;
            let assembly: AssemblyStats = read_json(&paths.assembly(k))?;
            let (policy, trace, monitor) = if assembly.no_new_data {
                let mut p = prev_defender;
                p.iter = k as u32;
                p.step = 0;
                (p, Vec::new(), Vec::new())
            } else {
                let d_new = load_dataset(&paths.d_new(k), &stage)?;
                let mut gen_rng = derive_rng(cfg.seed, "phase.defender.gen", k as u64);
                let mut val_rng = derive_rng(cfg.seed, "phase.defender.val", k as u64);
                let mut out = train_defender_phase(
                    &prev_defender,
                    &d_new,
                    &val_jail,
                    &val_general,
                    cfg,
                    judge.as_mut(),
                    &mut gen_rng,
                    &mut val_rng,
                )
                .map_err(RunError::in_phase(&stage))?;
                out.policy.iter = k as u32;
                (out.policy, out.trace, out.monitor)
            };
            write_atomic(&paths.defender_trace(k), jsonl(&trace)?.as_bytes())?;
            write_atomic(&paths.defender_monitor(k), jsonl(&monitor)?.as_bytes())?;
            let combined = fs::read_to_string(paths.attacker_monitor(k))?
                + &fs::read_to_string(paths.defender_monitor(k))?;
            write_atomic(&paths.monitor(k), combined.as_bytes())?;
            save_policy_atomic(&policy, &paths.defender_ckpt(k))
                .map_err(RunError::in_phase(&stage))?;
            executed.push(stage.clone());
        }
        if halted(&stage) {
            return Ok(outcome(&paths, None, Some(&stage), executed));
        }
    }

    // Final evaluation of every checkpoint on the held-out probes.
    let stage = "finalize";
    let artifacts = [paths.final_report(), paths.metrics()];
    if !all_exist(&artifacts) {
        let probe_j = load_dataset(&paths.probe_jailbreak(), stage)?;
        let probe_g = load_dataset(&paths.probe_general(), stage)?;
        let m_d0 = load_policy(&paths.coldstart_defender_ckpt(), Role::Defender, 0, stage)?;
        let m_a0 = load_policy(&paths.coldstart_attacker_ckpt(), Role::Attacker, 0, stage)?;
        let coldstart = eval_defender_probes(&m_d0, &probe_j, &probe_g, cfg, judge.as_mut())
            .map_err(RunError::in_phase(stage))?;
        let coldstart_asr = eval_attacker_probe(&m_a0, &m_d0, &probe_j, cfg, judge.as_mut())
            .map_err(RunError::in_phase(stage))?;
        let mut per_iteration = Vec::new();
        for k in 1..=cfg.iterations {
            let m_dk = load_policy(&paths.defender_ckpt(k), Role::Defender, k as u32, stage)?;
            let m_ak = load_policy(&paths.attacker_ckpt(k), Role::Attacker, k as u32, stage)?;
            let defender = eval_defender_probes(&m_dk, &probe_j, &probe_g, cfg, judge.as_mut())
                .map_err(RunError::in_phase(stage))?;
            let attacker_asr = eval_attacker_probe(&m_ak, &m_d0, &probe_j, cfg, judge.as_mut())
                .map_err(RunError::in_phase(stage))?;
            let filter: FilterStats = read_json(&paths.filter_stats(k))?;
            let assembly: AssemblyStats = read_json(&paths.assembly(k))?;
            let att_monitor: Vec<MonitorReport> = read_jsonl(&paths.attacker_monitor(k))?;
            let def_monitor: Vec<MonitorReport> = read_jsonl(&paths.defender_monitor(k))?;
            per_iteration.push(IterationSummary {
                k: k as u32,
                vacuous: assembly.no_new_data,
                kept_jailbreaks: filter.kept,
                attacker_stopped_early: att_monitor.iter().any(|m| m.stop_attacker),
                defender_stopped_early: def_monitor.iter().any(|m| m.stop_defender),
                attacker_asr_vs_init: attacker_asr,
                defender,
            });
        }
        let final_eval = per_iteration
            .last()
            .map(|it| it.defender.clone())
            .unwrap_or_else(|| coldstart.clone());
        let report = FinalReport {
            seed: cfg.seed,
            iterations: cfg.iterations,
            coldstart_attacker_asr_vs_init: coldstart_asr,
            coldstart,
            per_iteration,
            final_eval,
        };
        write_atomic(
            &paths.final_report(),
            (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
        )?;
        let metrics = assemble_metrics(&paths, cfg.iterations, &report)?;
        write_atomic(&paths.metrics(), metrics.as_bytes())?;
        executed.push(stage.into());
    }

    let report: FinalReport = serde_json::from_str(&fs::read_to_string(paths.final_report())?)?;
    let halted_after = halted(stage).then(|| stage.to_string());
    Ok(RunOutcome {
        paths,
        report: Some(report),
        halted_after,
        executed,
    })
}

/// Creates the run directory and pins the configuration. A directory that
/// already holds a snapshot must have been created with the same settings
/// (the directory location itself may differ, so a moved run still
/// resumes).
fn prepare_run_dir(cfg: &RunConfig, paths: &RunPaths) -> Result<(), RunError> {
    fs::create_dir_all(&paths.root)?;
    let snap_path = paths.config_snapshot();
    if snap_path.exists() {
        let stored = fs::read_to_string(&snap_path)?;
        let mut stored_cfg = RunConfig::parse(&stored)?;
        stored_cfg.run_dir = cfg.run_dir.clone();
        if &stored_cfg != cfg {
            return Err(RunError::Config(format!(
                "run directory {} holds a run with different settings; \
                 use a fresh directory or the original configuration",
                paths.root.display()
            )));
        }
    } else {
        write_atomic(&snap_path, cfg.snapshot().as_bytes())?;
    }
    Ok(())
}

fn make_judge(cfg: &RunConfig) -> Box<dyn VerdictProvider> {
    let endpoint = JudgeEndpoint {
        url: cfg.judge_url.clone(),
        timeout_ms: cfg.judge_timeout_ms,
        max_retries: cfg.judge_max_retries,
    }
    .resolved();
    if endpoint.url.trim().is_empty() {
        Box::new(RuleJudge)
    } else {
        Box::new(RemoteJudge::new(endpoint))
    }
}

fn all_exist(paths: &[PathBuf]) -> bool {
    paths.iter().all(|p| p.exists())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .expect("artifact paths name files")
        .to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes via a sibling temp file and rename, so a killed process never
/// leaves a half-written artifact under the artifact's name.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn save_policy_atomic(policy: &Policy, path: &Path) -> Result<(), PhaseError> {
    let tmp = tmp_path(path);
    policy.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| PhaseError::Checkpoint(e.into()))?;
    Ok(())
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String, RunError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    Ok(out)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        rows.push(serde_json::from_str(line)?);
    }
    Ok(rows)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn load_dataset(path: &Path, stage: &str) -> Result<Dataset, RunError> {
    Dataset::load(path)
        .map_err(PhaseError::from)
        .map_err(RunError::in_phase(stage))
}

/// Loads a checkpoint and verifies both role and training-iteration
/// lineage, so a run never silently continues from the wrong round.
fn load_policy(path: &Path, role: Role, expect_iter: u32, stage: &str) -> Result<Policy, RunError> {
    let policy = Policy::load(path, role)
        .map_err(PhaseError::from)
        .map_err(RunError::in_phase(stage))?;
    if policy.iter != expect_iter {
        return Err(RunError::in_phase(stage)(PhaseError::Lineage {
            what: path.display().to_string(),
            expected: expect_iter,
            found: policy.iter,
        }));
    }
    Ok(policy)
}

/// The `k-1` checkpoint for a role: the cold-start checkpoint when `k`
/// is 1, the previous iteration's otherwise.
fn load_prev(paths: &RunPaths, role: Role, k: usize, stage: &str) -> Result<Policy, RunError> {
    let (path, expect) = match (role, k) {
        (Role::Defender, 1) => (paths.coldstart_defender_ckpt(), 0),
        (Role::Attacker, 1) => (paths.coldstart_attacker_ckpt(), 0),
        (Role::Defender, _) => (paths.defender_ckpt(k - 1), (k - 1) as u32),
        (Role::Attacker, _) => (paths.attacker_ckpt(k - 1), (k - 1) as u32),
    };
    load_policy(&path, role, expect, stage)
}

/// First `fraction` of each seed subset (at least one sample of each
/// kind), keeping the cold-start mix stratified like the full data.
fn coldstart_subset(jail: &Dataset, general: &Dataset, fraction: f64) -> Dataset {
    let take = |d: &Dataset| (((d.len() as f64) * fraction).floor() as usize).clamp(1, d.len());
    let mut samples: Vec<ArenaSample> = jail.samples[..take(jail)].to_vec();
    samples.extend_from_slice(&general.samples[..take(general)]);
    Dataset::new(samples, DatasetKind::Mixed)
}

fn iteration_dataset(jail_parts: &[Dataset], gen_parts: &[Dataset], k: usize) -> Dataset {
    let mut samples = jail_parts[k - 1].samples.clone();
    samples.extend(gen_parts[k - 1].samples.iter().cloned());
    Dataset::new(samples, DatasetKind::Mixed)
}

/// Shuffled train/validation split. The validation side receives the
/// complement of `split`, rounded, but never the whole dataset; a
/// single-sample dataset trains on that sample and validates on nothing.
fn split_train_val(d: &Dataset, split: f64, seed: u64, k: usize) -> (Dataset, Dataset) {
    let mut rng = derive_rng(seed, "split.iter", k as u64);
    let mut order: Vec<usize> = (0..d.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let val_n = if d.len() < 2 {
        0
    } else {
        ((d.len() as f64) * (1.0 - split)).round() as usize
    }
    .clamp(0, d.len().saturating_sub(1));
    let pick = |idx: &[usize]| {
        idx.iter()
            .map(|&i| d.samples[i].clone())
            .collect::<Vec<_>>()
    };
    let (val_idx, train_idx) = order.split_at(val_n);
    (
        Dataset::new(pick(train_idx), DatasetKind::Mixed),
        Dataset::new(pick(val_idx), DatasetKind::Mixed),
    )
}

fn filter_required(d: &Dataset, rejection_required: bool) -> Dataset {
    let samples: Vec<ArenaSample> = d
        .samples
        .iter()
        .filter(|s| s.rejection_required == rejection_required)
        .cloned()
        .collect();
    let kind = if rejection_required {
        DatasetKind::Jailbreak
    } else {
        DatasetKind::General
    };
    Dataset::new(samples, kind)
}

/// One generated candidate, persisted with enough of its source sample
/// to rebuild the augmentation record on resume.
#[derive(Debug, Serialize, Deserialize)]
struct CandidateLine {
    source_digest: u8,
    source_query: Vec<u8>,
    source_origin: Origin,
    mode: AugmentMode,
    produced_query: Vec<u8>,
    image_digest: u8,
}

impl CandidateLine {
    fn from_record(record: &AugmentRecord) -> CandidateLine {
        CandidateLine {
            source_digest: record.source.image_digest,
            source_query: record.source.query.iter().map(|t| t.id()).collect(),
            source_origin: record.source.origin,
            mode: record.mode,
            produced_query: record.produced_query.iter().map(|t| t.id()).collect(),
            image_digest: record.image_digest,
        }
    }

    fn into_record(self) -> Result<AugmentRecord, ArenaError> {
        let source = ArenaSample::new(
            self.source_digest,
            tokens_from_ids(&self.source_query)?,
            self.source_origin,
        )?;
        Ok(AugmentRecord {
            source,
            mode: self.mode,
            produced_query: tokens_from_ids(&self.produced_query)?,
            image_digest: self.image_digest,
            success_count: 0,
            n: 0,
            kept: false,
            unresolved: false,
        })
    }
}

fn tokens_from_ids(ids: &[u8]) -> Result<Vec<Token>, ArenaError> {
    ids.iter().map(|&id| Token::from_id(id)).collect()
}

fn read_candidates(path: &Path, stage: &str) -> Result<Vec<AugmentRecord>, RunError> {
    let lines: Vec<CandidateLine> = read_jsonl(path)?;
    lines
        .into_iter()
        .map(|line| {
            line.into_record()
                .map_err(PhaseError::from)
                .map_err(RunError::in_phase(stage))
        })
        .collect()
}

/// Candidate generation tallies for one iteration.
#[derive(Debug, Serialize, Deserialize)]
struct CandidateStats {
    generated: usize,
    format_dropped: usize,
    invalid_query_dropped: usize,
}

/// Filtering tallies for one iteration.
#[derive(Debug, Serialize, Deserialize)]
struct FilterStats {
    candidates: usize,
    kept: usize,
    benign_discarded: usize,
    unresolved: usize,
}

/// Assembly tallies for one iteration.
#[derive(Debug, Serialize, Deserialize)]
struct AssemblyStats {
    size: usize,
    no_new_data: bool,
    shortfall_with_replacement: bool,
}

/// Builds `metrics.jsonl` by splicing the persisted per-stage artifact
/// lines verbatim into section-tagged rows, so the combined log is
/// byte-identical however many processes the run was spread across.
fn assemble_metrics(paths: &RunPaths, iterations: usize, report: &FinalReport) -> Result<String, RunError> {
    let mut out = String::new();
    let splice = |out: &mut String, section: &str, k: Option<usize>, text: &str| {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match k {
                Some(k) => out.push_str(&format!(
                    "{{\"section\":\"{section}\",\"k\":{k},\"row\":{line}}}\n"
                )),
                None => out.push_str(&format!("{{\"section\":\"{section}\",\"row\":{line}}}\n")),
            }
        }
    };
    let read = fs::read_to_string;
    splice(&mut out, "coldstart_defender", None, &read(paths.coldstart_defender_trace())?);
    splice(&mut out, "coldstart_attacker", None, &read(paths.coldstart_attacker_trace())?);
    splice(
        &mut out,
        "coldstart_attacker_summary",
        None,
        &read(paths.coldstart_attacker_summary())?,
    );
    for k in 1..=iterations {
        splice(&mut out, "attacker_trace", Some(k), &read(paths.attacker_trace(k))?);
        splice(&mut out, "attacker_monitor", Some(k), &read(paths.attacker_monitor(k))?);
        splice(&mut out, "candidates", Some(k), &read(paths.candidates_stats(k))?);
        splice(&mut out, "filter", Some(k), &read(paths.filter_stats(k))?);
        splice(&mut out, "assembly", Some(k), &read(paths.assembly(k))?);
        splice(&mut out, "defender_trace", Some(k), &read(paths.defender_trace(k))?);
        splice(&mut out, "defender_monitor", Some(k), &read(paths.defender_monitor(k))?);
    }
    out.push_str(&format!(
        "{{\"section\":\"final\",\"row\":{}}}\n",
        serde_json::to_string(report)?
    ));
    Ok(out)
}
