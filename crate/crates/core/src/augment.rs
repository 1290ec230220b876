//! Attacker-driven data expansion and quality filtering.
//!
//! After an attacker phase, each training sample is fed back through the
//! attacker to produce a candidate query: general samples seed brand-new
//! jailbreaks, existing jailbreaks get refined variants. Candidates are
//! kept only when the current defender actually falls for them in at
//! least half of `n` trial responses, then mixed 1:1 with fresh general
//! data to form the next defender training set.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arena::{harm_oracle, query_digest, ArenaError, ArenaSample, Dataset, DatasetKind, Origin, Token};
use crate::judge::{JudgeError, VerdictProvider};
use crate::policy::{Conditioning, Policy, PolicyError, Role};
use crate::rewards::parse_attacker_output;

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("policy role is {found} where {expected} is required")]
    RoleMismatch { expected: Role, found: Role },
    #[error("filter count n must be even and at least 2 (got {0})")]
    BadFilterCount(usize),
    #[error("general pool is empty but {0} general samples are required")]
    EmptyGeneralPool(usize),
    #[error("judge rejected its input: {0}")]
    JudgeInput(String),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How a candidate was produced from its source sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Synthesized from a general sample (conditioning mode bit 0).
    GenerateNew,
    /// Refined from an existing jailbreak sample (conditioning mode bit 1).
    RefineOld,
}

/// One candidate query and its filtering outcome.
#[derive(Debug, Clone)]
pub struct AugmentRecord {
    pub source: ArenaSample,
    pub mode: AugmentMode,
    pub produced_query: Vec<Token>,
    /// Inherited from the source; candidates never invent a new image.
    pub image_digest: u8,
    pub success_count: usize,
    pub n: usize,
    pub kept: bool,
    /// Judge failure during filtering; excluded without a keep verdict.
    pub unresolved: bool,
}

/// Candidates surviving format and query validation, plus drop counters.
#[derive(Debug, Clone)]
pub struct CandidateBatch {
    pub records: Vec<AugmentRecord>,
    pub format_dropped: usize,
    pub invalid_query_dropped: usize,
}

/// Runs the attacker once per source sample. General sources use the
/// synthesis mode, jailbreak-labeled sources the refinement mode, both
/// conditioned on the source query's digest. Format-invalid generations
/// and invalid produced queries are dropped and counted.
pub fn generate_candidates<R: Rng>(
    attacker: &Policy,
    d_k: &Dataset,
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<CandidateBatch, AugmentError> {
    if attacker.role != Role::Attacker {
        return Err(AugmentError::RoleMismatch {
            expected: Role::Attacker,
            found: attacker.role,
        });
    }
    if d_k.is_empty() {
        return Err(AugmentError::EmptyDataset);
    }
    let mut records = Vec::new();
    let mut format_dropped = 0;
    let mut invalid_query_dropped = 0;
    for source in &d_k.samples {
        let digest = query_digest(&source.query)?;
        let (mode, cond) = if source.rejection_required {
            (AugmentMode::RefineOld, Conditioning::attacker_refine(digest))
        } else {
            (AugmentMode::GenerateNew, Conditioning::attacker_new(digest))
        };
        let gen = attacker.sample(cond, temperature, max_len, rng)?;
        let parsed = parse_attacker_output(&gen.tokens);
        if !parsed.format_ok {
            format_dropped += 1;
            continue;
        }
        if query_digest(&parsed.answer).is_err() {
            invalid_query_dropped += 1;
            continue;
        }
        records.push(AugmentRecord {
            source: source.clone(),
            mode,
            produced_query: parsed.answer,
            image_digest: source.image_digest,
            success_count: 0,
            n: 0,
            kept: false,
            unresolved: false,
        });
    }
    Ok(CandidateBatch {
        records,
        format_dropped,
        invalid_query_dropped,
    })
}

/// The majority rule: keep iff successes reach half of `n`.
pub fn keep_decision(success_count: usize, n: usize) -> bool {
    success_count * 2 >= n
}

/// Filtered candidates: the kept jailbreak dataset plus every record with
/// its verdict counts filled in.
#[derive(Debug)]
pub struct FilterOutcome {
    pub dataset: Dataset,
    pub records: Vec<AugmentRecord>,
    pub benign_discarded: usize,
    pub unresolved: usize,
}

/// Samples the defender `n` times on each candidate and keeps those that
/// draw an unsafe verdict at least `n/2` times. Oracle-benign candidates
/// are discarded without consulting the judge, keeping the kept set
/// label-pure. A judge failure marks the candidate unresolved instead of
/// guessing a verdict.
pub fn filter_high_quality<R: Rng>(
    defender: &Policy,
    candidates: Vec<AugmentRecord>,
    n: usize,
    judge: &mut dyn VerdictProvider,
    response_max_len: usize,
    rng: &mut R,
) -> Result<FilterOutcome, AugmentError> {
    if defender.role != Role::Defender {
        return Err(AugmentError::RoleMismatch {
            expected: Role::Defender,
            found: defender.role,
        });
    }
    if n < 2 || n % 2 != 0 {
        return Err(AugmentError::BadFilterCount(n));
    }
    let mut records = Vec::with_capacity(candidates.len());
    let mut kept_samples = Vec::new();
    let mut benign_discarded = 0;
    let mut unresolved_count = 0;
    for mut record in candidates {
        record.n = n;
        if !harm_oracle(&record.produced_query)? {
            benign_discarded += 1;
            records.push(record);
            continue;
        }
        let cond = Conditioning::defender(query_digest(&record.produced_query)?);
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let response = defender.sample(cond, 1.0, response_max_len, rng)?;
            pairs.push((record.produced_query.clone(), response.tokens));
        }
        match judge.judge_pairs(&pairs) {
            Ok(verdicts) => {
                record.success_count = verdicts.iter().filter(|v| v.is_unsafe).count();
                record.kept = keep_decision(record.success_count, n);
            }
            Err(JudgeError::Input(msg)) => {
                return Err(AugmentError::JudgeInput(msg));
            }
            Err(_) => {
                record.unresolved = true;
                unresolved_count += 1;
            }
        }
        if record.kept {
            let origin = match record.mode {
                AugmentMode::GenerateNew => Origin::AttackerNew,
                AugmentMode::RefineOld => Origin::AttackerRefined,
            };
            kept_samples.push(ArenaSample::new(
                record.image_digest,
                record.produced_query.clone(),
                origin,
            )?);
        }
        records.push(record);
    }
    Ok(FilterOutcome {
        dataset: Dataset::new(kept_samples, DatasetKind::Jailbreak),
        records,
        benign_discarded,
        unresolved: unresolved_count,
    })
}

/// The next defender training set and how it came together.
#[derive(Debug)]
pub struct AssembledDataset {
    pub dataset: Dataset,
    /// No kept jailbreaks this iteration; the dataset is empty.
    pub no_new_data: bool,
    /// The general pool was smaller than the jailbreak set, so general
    /// samples were drawn with replacement.
    pub shortfall_with_replacement: bool,
}

/// Mixes the kept jailbreaks 1:1 with general samples drawn uniformly
/// from the pool (without replacement when the pool suffices) and
/// shuffles the result.
pub fn assemble_iteration_dataset<R: Rng>(
    d_j_new: &Dataset,
    d_g_pool: &Dataset,
    rng: &mut R,
) -> Result<AssembledDataset, AugmentError> {
    let m = d_j_new.len();
    if m == 0 {
        return Ok(AssembledDataset {
            dataset: Dataset::new(Vec::new(), DatasetKind::Mixed),
            no_new_data: true,
            shortfall_with_replacement: false,
        });
    }
    if d_g_pool.is_empty() {
        return Err(AugmentError::EmptyGeneralPool(m));
    }
    let mut chosen = Vec::with_capacity(m);
    let shortfall = d_g_pool.len() < m;
    if shortfall {
        for _ in 0..m {
            chosen.push(d_g_pool.samples[rng.gen_range(0..d_g_pool.len())].clone());
        }
    } else {
        let mut idx: Vec<usize> = (0..d_g_pool.len()).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        chosen.extend(idx[..m].iter().map(|&i| d_g_pool.samples[i].clone()));
    }
    let mut samples = Vec::with_capacity(2 * m);
    samples.extend(d_j_new.samples.iter().cloned());
    samples.extend(chosen);
    for i in (1..samples.len()).rev() {
        samples.swap(i, rng.gen_range(0..=i));
    }
    Ok(AssembledDataset {
        dataset: Dataset::new(samples, DatasetKind::Mixed),
        no_new_data: false,
        shortfall_with_replacement: shortfall,
    })
}

#[derive(Serialize, Deserialize)]
struct ReportLine {
    mode: AugmentMode,
    success_count: usize,
    n: usize,
    kept: bool,
    unresolved: bool,
}

/// One JSONL line per candidate, in candidate order.
pub fn write_augment_report(path: &Path, records: &[AugmentRecord]) -> Result<(), AugmentError> {
    let mut out = Vec::new();
    for r in records {
        let line = ReportLine {
            mode: r.mode,
            success_count: r.success_count,
            n: r.n,
            kept: r.kept,
            unresolved: r.unresolved,
        };
        serde_json::to_writer(&mut out, &line).expect("report line serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}
