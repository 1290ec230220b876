//! End-to-end run driver: configuration, cold starts, the alternating
//! attacker/defender training loop, persistence with resume, and final
//! evaluation reports.

mod config;
mod phases;
mod report;
mod run;

pub use config::RunConfig;
pub use phases::{
    cold_start_attacker, cold_start_defender, train_attacker_phase, train_defender_phase,
    AttackerColdStart, AttackerPhaseOutcome, ColdStartDefender, DefenderPhaseOutcome,
    GrpoTraceRow, SftTraceRow,
};
pub use report::{render_csv, render_text, EvalSummary, FinalReport, IterationSummary};
pub use run::{
    run_data_stage, run_tug_of_war, run_tug_of_war_with_halt, stage_sequence, RunOutcome, RunPaths,
};

use crate::arena::ArenaError;
use crate::augment::AugmentError;
use crate::grpo::GrpoError;
use crate::judge::JudgeError;
use crate::monitor::MonitorError;
use crate::policy::{CheckpointError, PolicyError};
use crate::rewards::RewardError;

/// Failure inside one training or evaluation phase.
#[derive(Debug, thiserror::Error)]
pub enum PhaseError {
    #[error(
        "reward_starvation: {consecutive} consecutive degenerate groups, aborted at step {step}"
    )]
    RewardStarvation { step: u64, consecutive: u32 },
    #[error("lineage mismatch in {what}: expected iteration {expected}, found {found}")]
    Lineage {
        what: String,
        expected: u32,
        found: u32,
    },
    #[error("expected a {expected} policy, found {found}")]
    Role {
        expected: crate::policy::Role,
        found: crate::policy::Role,
    },
    #[error("{0} is empty")]
    EmptyDataset(String),
    #[error("judge rejected evaluation input: {0}")]
    JudgeInput(String),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Top-level run failure, mapped onto process exit codes by the CLI.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("phase `{phase}` aborted: {source}")]
    Phase {
        phase: String,
        #[source]
        source: PhaseError,
    },
    #[error("judge failure: {0}")]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl RunError {
    pub(crate) fn in_phase(phase: &str) -> impl Fn(PhaseError) -> RunError + '_ {
        move |source| RunError::Phase {
            phase: phase.to_string(),
            source,
        }
    }

    /// Process exit code for this failure class: 2 for configuration
    /// problems, 4 for judge failures, 3 for everything that aborts a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Judge(_) => 4,
            _ => 3,
        }
    }
}
