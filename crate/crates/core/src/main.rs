//! Command-line entry point: seed-data generation, running or resuming
//! the alternating training schedule, scoring a defender checkpoint
//! against a dataset, and rendering a finished run's report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use sectow::arena::{Dataset, DatasetKind};
use sectow::judge::{JudgeEndpoint, RemoteJudge, RuleJudge, VerdictProvider};
use sectow::monitor::{attack_success_rate, general_accuracy, over_refusal_rate};
use sectow::orchestrator::{
    render_csv, render_text, run_data_stage, run_tug_of_war, FinalReport, PhaseError, RunConfig,
    RunError, RunPaths,
};
use sectow::policy::{Policy, Role};
use sectow::rewards::RefusalVocabulary;
use sectow::stream::derive_rng;

#[derive(Parser)]
#[command(name = "sectow", version, about = "Adversarial tug-of-war training sandbox")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seed datasets and held-out probes for a run.
    GenData {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Execute the full training schedule, resuming any finished stages.
    Run {
        /// Run configuration file.
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Existing run directory to continue. Its pinned configuration
        /// is used, and must match `--config` when both are given.
        #[arg(long, value_name = "RUN_DIR")]
        resume: Option<PathBuf>,
    },
    /// Score a defender checkpoint against a dataset.
    Eval {
        /// Defender checkpoint file.
        #[arg(long)]
        defender: PathBuf,
        /// Dataset file to evaluate on.
        #[arg(long)]
        dataset: PathBuf,
        /// Sampling seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Sampling temperature.
        #[arg(long, default_value_t = 0.2)]
        temperature: f64,
        /// Response length cap.
        #[arg(long, default_value_t = 8)]
        max_len: usize,
    },
    /// Print the final evaluation report of a completed run.
    Report {
        /// Run directory.
        run_dir: PathBuf,
        /// Emit CSV instead of the text table.
        #[arg(long)]
        csv: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sectow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::GenData { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = run_data_stage(&cfg)?;
            println!("seed data written under {}", out.paths.data_dir().display());
            Ok(())
        }
        Command::Run { config, resume } => {
            let cfg = resolve_run_config(config.as_deref(), resume.as_deref())?;
            let out = run_tug_of_war(&cfg)?;
            let report = out.report.expect("a completed run carries a report");
            print!("{}", render_text(&report));
            Ok(())
        }
        Command::Eval {
            defender,
            dataset,
            seed,
            temperature,
            max_len,
        } => eval(&defender, &dataset, seed, temperature, max_len),
        Command::Report { run_dir, csv } => {
            let path = RunPaths::new(&run_dir).final_report();
            let text = std::fs::read_to_string(&path).map_err(|e| {
                RunError::Config(format!(
                    "cannot read {}: {e}; has the run finished?",
                    path.display()
                ))
            })?;
            let report: FinalReport = serde_json::from_str(&text)?;
            if csv {
                print!("{}", render_csv(&report));
            } else {
                print!("{}", render_text(&report));
            }
            Ok(())
        }
    }
}

/// Picks the effective configuration for `run`. A resume directory wins
/// and supplies its pinned snapshot; a config file given alongside it is
/// only checked for agreement.
fn resolve_run_config(
    config: Option<&Path>,
    resume: Option<&Path>,
) -> Result<RunConfig, RunError> {
    match (config, resume) {
        (Some(path), None) => RunConfig::load(path),
        (config, Some(dir)) => {
            let snap = RunPaths::new(dir).config_snapshot();
            let text = std::fs::read_to_string(&snap).map_err(|e| {
                RunError::Config(format!(
                    "cannot read {}: {e}; is this a run directory?",
                    snap.display()
                ))
            })?;
            let mut cfg = RunConfig::parse(&text)?;
            cfg.run_dir = dir.to_string_lossy().into_owned();
            if let Some(path) = config {
                let mut given = RunConfig::load(path)?;
                given.run_dir = cfg.run_dir.clone();
                if given != cfg {
                    return Err(RunError::Config(format!(
                        "{} does not match the configuration pinned in {}",
                        path.display(),
                        dir.display()
                    )));
                }
            }
            Ok(cfg)
        }
        (None, None) => Err(RunError::Config(
            "either --config or --resume is required".into(),
        )),
    }
}

#[derive(Serialize)]
struct JailbreakEval {
    samples: usize,
    asr: f64,
    resolved: usize,
    unresolved: usize,
}

#[derive(Serialize)]
struct GeneralEval {
    samples: usize,
    orr: f64,
    acc: f64,
}

#[derive(Serialize)]
struct EvalLine {
    checkpoint: String,
    dataset: String,
    samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    jailbreak: Option<JailbreakEval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    general: Option<GeneralEval>,
}

/// Scores a checkpoint on the jailbreak and general halves of a dataset
/// and prints one JSON line. The judge comes from the environment
/// override when set, the built-in rule judge otherwise.
fn eval(
    defender: &Path,
    dataset: &Path,
    seed: u64,
    temperature: f64,
    max_len: usize,
) -> Result<(), RunError> {
    let in_eval =
        |source: PhaseError| RunError::Phase { phase: "eval".into(), source };
    let policy = Policy::load(defender, Role::Defender).map_err(|e| in_eval(e.into()))?;
    let data = Dataset::load(dataset).map_err(|e| in_eval(e.into()))?;
    let jailbreaks: Vec<_> = data
        .samples
        .iter()
        .filter(|s| s.rejection_required)
        .cloned()
        .collect();
    let generals: Vec<_> = data
        .samples
        .iter()
        .filter(|s| !s.rejection_required)
        .cloned()
        .collect();
    let mut judge = judge_from_env();
    let mut line = EvalLine {
        checkpoint: policy.version(),
        dataset: dataset.display().to_string(),
        samples: data.len(),
        jailbreak: None,
        general: None,
    };
    if !jailbreaks.is_empty() {
        let d = Dataset::new(jailbreaks, DatasetKind::Jailbreak);
        let mut rng = derive_rng(seed, "eval.jailbreak", 0);
        let out = attack_success_rate(&policy, &d, judge.as_mut(), temperature, max_len, &mut rng)
            .map_err(|e| in_eval(e.into()))?;
        line.jailbreak = Some(JailbreakEval {
            samples: d.len(),
            asr: out.asr,
            resolved: out.resolved,
            unresolved: out.unresolved,
        });
    }
    if !generals.is_empty() {
        let d = Dataset::new(generals, DatasetKind::General);
        let vocab = RefusalVocabulary::token_mode();
        let mut orr_rng = derive_rng(seed, "eval.general.orr", 0);
        let orr = over_refusal_rate(&policy, &d, &vocab, temperature, max_len, &mut orr_rng)
            .map_err(|e| in_eval(e.into()))?;
        let mut acc_rng = derive_rng(seed, "eval.general.acc", 0);
        let acc = general_accuracy(&policy, &d, temperature, max_len, &mut acc_rng)
            .map_err(|e| in_eval(e.into()))?;
        line.general = Some(GeneralEval {
            samples: d.len(),
            orr,
            acc,
        });
    }
    println!("{}", serde_json::to_string(&line)?);
    Ok(())
}

fn judge_from_env() -> Box<dyn VerdictProvider> {
    let endpoint = JudgeEndpoint::new("").resolved();
    if endpoint.url.trim().is_empty() {
        Box::new(RuleJudge)
    } else {
        Box::new(RemoteJudge::new(endpoint))
    }
}
