//! Tabular autoregressive policies.
//!
//! A policy is a logit table with one row per context. A context is the
//! triple (input digest, mode bit, previous token), so generation is a
//! first-order walk: sample a token from the softmax of the current row,
//! move to the row keyed by that token, stop at `<eos>` or the length cap.
//!
//! The raw table and its loss/gradient helpers are exposed separately from
//! the arena-shaped `Policy` so the calculus can be verified on tiny shapes.

use std::fmt;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;

use crate::arena::{Token, DIGESTS, VOCAB};

/// Rows in an arena policy table: 16 digests x 2 modes x 28 previous tokens.
pub const CONTEXT_ROWS: usize = DIGESTS * 2 * VOCAB;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("max_len must be positive")]
    ZeroMaxLen,
    #[error("temperature must be positive and finite (got {0})")]
    BadTemperature(f64),
    #[error("non-finite logits in context row {row}")]
    NonFiniteLogits { row: usize },
    #[error("learning rate must be positive and finite (got {0})")]
    BadLearningRate(f64),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("digest {0} out of range (must be < {DIGESTS})")]
    BadDigest(u8),
    #[error("mode {0} out of range (must be 0 or 1)")]
    BadMode(u8),
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint shape {rows}x{cols} does not match the arena policy shape")]
    ShapeMismatch { rows: usize, cols: usize },
    #[error("checkpoint contains non-finite parameters")]
    NonFinite,
    #[error("checkpoint role {found} does not match expected role {expected}")]
    RoleMismatch { expected: Role, found: Role },
}

/// Which side of the game a policy plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Defender,
    Attacker,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Defender => "defender",
            Role::Attacker => "attacker",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// ── Raw logit table ─────────────────────────────────────────────────────

/// Dense logit matrix with simple stable softmax helpers.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    rows: usize,
    cols: usize,
    theta: Vec<f64>,
}

impl Table {
    pub fn zeros(rows: usize, cols: usize) -> Table {
        assert!(rows > 0 && cols > 0);
        Table {
            rows,
            cols,
            theta: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.theta[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.theta[row * self.cols + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.theta[row * self.cols..(row + 1) * self.cols]
    }

    fn check_row_finite(&self, row: usize) -> Result<(), PolicyError> {
        if self.row(row).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(PolicyError::NonFiniteLogits { row })
        }
    }

    /// Log-probabilities of one row at temperature 1.
    pub fn log_softmax(&self, row: usize) -> Vec<f64> {
        let logits = self.row(row);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
        logits.iter().map(|&l| l - log_z).collect()
    }

    /// Log-probability of choosing `col` from `row` at temperature 1.
    pub fn log_prob_at(&self, row: usize, col: usize) -> f64 {
        self.log_softmax(row)[col]
    }

    /// Samples a column from `row` at the given temperature. The returned
    /// log-probability is always evaluated at temperature 1.
    pub fn sample_from_row(
        &self,
        row: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<(usize, f64), PolicyError> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(PolicyError::BadTemperature(temperature));
        }
        self.check_row_finite(row)?;
        let logits = self.row(row);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits
            .iter()
            .map(|&l| ((l - max) / temperature).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let draw = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = self.cols - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if draw < acc {
                chosen = i;
                break;
            }
        }
        Ok((chosen, self.log_prob_at(row, chosen)))
    }
}

// ── Supervised loss on a table ──────────────────────────────────────────

/// One supervised example: aligned context rows and target columns.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
}

fn sft_token_count(batch: &[SftExample]) -> usize {
    batch.iter().map(|e| e.targets.len()).sum()
}

/// Mean per-token cross-entropy of a batch.
pub fn sft_loss(table: &Table, batch: &[SftExample]) -> f64 {
    let n = sft_token_count(batch);
    assert!(n > 0, "sft batch must contain at least one token");
    let mut total = 0.0;
    for ex in batch {
        for (&row, &tgt) in ex.rows.iter().zip(&ex.targets) {
            total -= table.log_prob_at(row, tgt);
        }
    }
    total / n as f64
}

/// Gradient of `sft_loss` with respect to every table entry:
/// `(softmax(row) - onehot(target)) / token_count` accumulated per visit.
pub fn sft_grad(table: &Table, batch: &[SftExample]) -> Vec<f64> {
    let n = sft_token_count(batch);
    assert!(n > 0, "sft batch must contain at least one token");
    let scale = 1.0 / n as f64;
    let mut grad = vec![0.0; table.rows * table.cols];
    for ex in batch {
        for (&row, &tgt) in ex.rows.iter().zip(&ex.targets) {
            let logp = table.log_softmax(row);
            let base = row * table.cols;
            for (c, lp) in logp.iter().enumerate() {
                grad[base + c] += lp.exp() * scale;
            }
            grad[base + tgt] -= scale;
        }
    }
    grad
}

// ── Arena policy ────────────────────────────────────────────────────────

/// Conditioning for one generation: a 4-bit digest plus a mode bit.
/// Defenders always run mode 0; attackers use mode 0 to synthesize from a
/// general source and mode 1 to refine a jailbreak source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conditioning {
    pub digest: u8,
    pub mode: u8,
}

impl Conditioning {
    pub fn new(digest: u8, mode: u8) -> Result<Conditioning, PolicyError> {
        if digest as usize >= DIGESTS {
            return Err(PolicyError::BadDigest(digest));
        }
        if mode > 1 {
            return Err(PolicyError::BadMode(mode));
        }
        Ok(Conditioning { digest, mode })
    }

    pub fn defender(digest: u8) -> Conditioning {
        Conditioning::new(digest, 0).expect("digest comes from query_digest")
    }

    pub fn attacker_new(digest: u8) -> Conditioning {
        Conditioning::new(digest, 0).expect("digest comes from query_digest")
    }

    pub fn attacker_refine(digest: u8) -> Conditioning {
        Conditioning::new(digest, 1).expect("digest comes from query_digest")
    }
}

/// One sampled sequence with its per-token log-probabilities (temperature 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<Token>,
    pub logprobs: Vec<f64>,
}

impl Generation {
    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

// Base-policy priors. These stand in for the pretrained models the arena
// abstracts away: an undefended responder that answers by default, and a
// prompted generator that already knows the tag grammar but not what to
// put inside it.
const PRIOR_NEVER_BOS: f64 = -4.0;
const DEFENDER_PRIOR_REFUSE: f64 = -2.0;
const DEFENDER_PRIOR_COMPLY: f64 = 4.0;
const DEFENDER_PRIOR_FIRST_EOS: f64 = -2.0;
const DEFENDER_PRIOR_STOP: f64 = 1.2;
const ATTACKER_PRIOR_GRAMMAR: f64 = 6.0;
const ATTACKER_PRIOR_NO_EMPTY_ANSWER: f64 = -4.0;
const ATTACKER_PRIOR_CLOSE_ANSWER: f64 = 1.5;
const ATTACKER_PRIOR_NO_STRAY: f64 = -4.0;
const ATTACKER_PRIOR_SOFT_THINK_CLOSE: f64 = -2.0;

/// A role-tagged arena policy with checkpoint lineage metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub role: Role,
    /// Training iteration this policy belongs to (0 = cold start).
    pub iter: u32,
    /// Optimizer steps taken within that iteration.
    pub step: u64,
    table: Table,
}

impl Policy {
    /// Uniform policy: all logits zero.
    pub fn uniform(role: Role) -> Policy {
        Policy {
            role,
            iter: 0,
            step: 0,
            table: Table::zeros(CONTEXT_ROWS, VOCAB),
        }
    }

    /// Undefended responder prior: complies first, rarely refuses, wraps up
    /// with `<eos>` after a couple of tokens.
    pub fn defender_base() -> Policy {
        let mut p = Policy::uniform(Role::Defender);
        for row in 0..CONTEXT_ROWS {
            let prev = (row % VOCAB) as u8;
            p.table.set(row, Token::BOS.id() as usize, PRIOR_NEVER_BOS);
            p.table
                .set(row, Token::REFUSE.id() as usize, DEFENDER_PRIOR_REFUSE);
            if prev == Token::BOS.id() {
                p.table
                    .set(row, Token::COMPLY.id() as usize, DEFENDER_PRIOR_COMPLY);
                p.table
                    .set(row, Token::EOS.id() as usize, DEFENDER_PRIOR_FIRST_EOS);
            } else {
                p.table
                    .set(row, Token::EOS.id() as usize, DEFENDER_PRIOR_STOP);
            }
        }
        p
    }

    /// Prompted generator prior: knows the think/answer tag skeleton,
    /// avoids stray tags and response-channel tokens inside bodies,
    /// refuses to close an empty answer, knows nothing about content.
    pub fn attacker_base() -> Policy {
        let mut p = Policy::uniform(Role::Attacker);
        for row in 0..CONTEXT_ROWS {
            let prev = Token::from_id((row % VOCAB) as u8).expect("row index in range");
            p.table.set(row, Token::BOS.id() as usize, PRIOR_NEVER_BOS);
            for t in [Token::REFUSE, Token::COMPLY] {
                p.table.set(row, t.id() as usize, ATTACKER_PRIOR_NO_STRAY);
            }
            if prev == Token::BOS {
                p.table
                    .set(row, Token::THINK_OPEN.id() as usize, ATTACKER_PRIOR_GRAMMAR);
                for t in [
                    Token::EOS,
                    Token::THINK_CLOSE,
                    Token::ANSWER_OPEN,
                    Token::ANSWER_CLOSE,
                ] {
                    p.table.set(row, t.id() as usize, ATTACKER_PRIOR_NO_STRAY);
                }
            } else if prev == Token::THINK_OPEN {
                p.table.set(
                    row,
                    Token::THINK_CLOSE.id() as usize,
                    ATTACKER_PRIOR_GRAMMAR,
                );
                for t in [
                    Token::EOS,
                    Token::THINK_OPEN,
                    Token::ANSWER_OPEN,
                    Token::ANSWER_CLOSE,
                ] {
                    p.table.set(row, t.id() as usize, ATTACKER_PRIOR_NO_STRAY);
                }
            } else if prev == Token::THINK_CLOSE {
                p.table.set(
                    row,
                    Token::ANSWER_OPEN.id() as usize,
                    ATTACKER_PRIOR_GRAMMAR,
                );
                for t in [
                    Token::EOS,
                    Token::THINK_OPEN,
                    Token::THINK_CLOSE,
                    Token::ANSWER_CLOSE,
                ] {
                    p.table.set(row, t.id() as usize, ATTACKER_PRIOR_NO_STRAY);
                }
            } else if prev == Token::ANSWER_OPEN {
                p.table.set(
                    row,
                    Token::ANSWER_CLOSE.id() as usize,
                    ATTACKER_PRIOR_NO_EMPTY_ANSWER,
                );
                for t in [
                    Token::EOS,
                    Token::THINK_OPEN,
                    Token::THINK_CLOSE,
                    Token::ANSWER_OPEN,
                ] {
                    p.table.set(row, t.id() as usize, ATTACKER_PRIOR_NO_STRAY);
                }
            } else if prev == Token::ANSWER_CLOSE {
                p.table
                    .set(row, Token::EOS.id() as usize, ATTACKER_PRIOR_GRAMMAR);
                for t in [
                    Token::THINK_OPEN,
                    Token::THINK_CLOSE,
                    Token::ANSWER_OPEN,
                    Token::ANSWER_CLOSE,
                ] {
                    p.table.set(row, t.id() as usize, ATTACKER_PRIOR_NO_STRAY);
                }
            } else if prev.is_query_token() {
                p.table.set(
                    row,
                    Token::ANSWER_CLOSE.id() as usize,
                    ATTACKER_PRIOR_CLOSE_ANSWER,
                );
                for t in [Token::EOS, Token::THINK_OPEN, Token::ANSWER_OPEN] {
                    p.table.set(row, t.id() as usize, ATTACKER_PRIOR_NO_STRAY);
                }
                p.table.set(
                    row,
                    Token::THINK_CLOSE.id() as usize,
                    ATTACKER_PRIOR_SOFT_THINK_CLOSE,
                );
            }
        }
        p
    }

    pub fn table(&self) -> &Table {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Table {
        &mut self.table
    }

    /// Lineage string recorded in checkpoints.
    pub fn version(&self) -> String {
        format!("{} iter={} step={}", self.role, self.iter, self.step)
    }

    /// Deterministic context row for (conditioning, previous token).
    pub fn context_row(cond: Conditioning, prev: Token) -> usize {
        ((cond.digest as usize * 2) + cond.mode as usize) * VOCAB + prev.id() as usize
    }

    /// Context rows visited when emitting `tokens` after `<bos>`.
    pub fn context_rows(cond: Conditioning, tokens: &[Token]) -> Vec<usize> {
        let mut prev = Token::BOS;
        tokens
            .iter()
            .map(|&t| {
                let row = Policy::context_row(cond, prev);
                prev = t;
                row
            })
            .collect()
    }

    /// Samples one sequence, stopping at `<eos>` or after `max_len` tokens.
    pub fn sample(
        &self,
        cond: Conditioning,
        temperature: f64,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<Generation, PolicyError> {
        if max_len == 0 {
            return Err(PolicyError::ZeroMaxLen);
        }
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut prev = Token::BOS;
        while tokens.len() < max_len {
            let row = Policy::context_row(cond, prev);
            let (col, logp) = self.table.sample_from_row(row, temperature, rng)?;
            let tok = Token::from_id(col as u8).expect("column index in range");
            tokens.push(tok);
            logprobs.push(logp);
            if tok == Token::EOS {
                break;
            }
            prev = tok;
        }
        Ok(Generation { tokens, logprobs })
    }

    /// Exact per-token log-probabilities (temperature 1) of an existing
    /// sequence under this policy.
    pub fn log_prob(&self, cond: Conditioning, tokens: &[Token]) -> Result<Vec<f64>, PolicyError> {
        let rows = Policy::context_rows(cond, tokens);
        for &row in &rows {
            self.table.check_row_finite(row)?;
        }
        Ok(rows
            .iter()
            .zip(tokens)
            .map(|(&row, &t)| self.table.log_prob_at(row, t.id() as usize))
            .collect())
    }

    /// One supervised gradient step on a batch of (conditioning, target)
    /// pairs. Returns the pre-step mean per-token cross-entropy.
    pub fn sft_step(
        &mut self,
        batch: &[(Conditioning, Vec<Token>)],
        lr: f64,
    ) -> Result<f64, PolicyError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(PolicyError::BadLearningRate(lr));
        }
        if batch.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let mut examples = Vec::with_capacity(batch.len());
        for (cond, targets) in batch {
            if targets.is_empty() {
                return Err(PolicyError::EmptyTarget);
            }
            examples.push(SftExample {
                rows: Policy::context_rows(*cond, targets),
                targets: targets.iter().map(|t| t.id() as usize).collect(),
            });
        }
        let loss = sft_loss(&self.table, &examples);
        let grad = sft_grad(&self.table, &examples);
        for (p, g) in self.table.params_mut().iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        Ok(loss)
    }

    // ── Checkpoints ─────────────────────────────────────────────────

    /// Writes `SECTOW-CKPT v1 <role> <iter> <step> <rows> <cols>`, the
    /// little-endian f64 matrix, and a trailing CRC32 of everything above.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let header = format!(
            "SECTOW-CKPT v1 {} {} {} {} {}\n",
            self.role, self.iter, self.step, self.table.rows, self.table.cols
        );
        let mut bytes = Vec::with_capacity(header.len() + self.table.theta.len() * 8 + 4);
        bytes.extend_from_slice(header.as_bytes());
        for v in &self.table.theta {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&bytes);
        bytes.extend_from_slice(&hasher.finalize().to_le_bytes());
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Loads and fully validates a checkpoint written by `save`.
    pub fn load(path: &Path, expected_role: Role) -> Result<Policy, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Corrupt("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| CheckpointError::Corrupt("header is not UTF-8".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 7 || fields[0] != "SECTOW-CKPT" || fields[1] != "v1" {
            return Err(CheckpointError::Corrupt(format!(
                "unrecognized header {header:?}"
            )));
        }
        let role = match fields[2] {
            "defender" => Role::Defender,
            "attacker" => Role::Attacker,
            other => {
                return Err(CheckpointError::Corrupt(format!("unknown role {other:?}")));
            }
        };
        let parse_num = |s: &str, what: &str| -> Result<u64, CheckpointError> {
            s.parse::<u64>()
                .map_err(|_| CheckpointError::Corrupt(format!("bad {what} field {s:?}")))
        };
        let iter = parse_num(fields[3], "iter")? as u32;
        let step = parse_num(fields[4], "step")?;
        let rows = parse_num(fields[5], "rows")? as usize;
        let cols = parse_num(fields[6], "cols")? as usize;

        let body = &bytes[newline + 1..];
        let matrix_len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CheckpointError::Corrupt("matrix size overflows".into()))?;
        if body.len() != matrix_len + 4 {
            return Err(CheckpointError::Corrupt(format!(
                "expected {} body bytes, found {}",
                matrix_len + 4,
                body.len()
            )));
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&bytes[..newline + 1 + matrix_len]);
        let stored = u32::from_le_bytes(body[matrix_len..].try_into().expect("4 bytes"));
        if hasher.finalize() != stored {
            return Err(CheckpointError::Corrupt("CRC32 mismatch".into()));
        }
        if rows != CONTEXT_ROWS || cols != VOCAB {
            return Err(CheckpointError::ShapeMismatch { rows, cols });
        }
        if role != expected_role {
            return Err(CheckpointError::RoleMismatch {
                expected: expected_role,
                found: role,
            });
        }
        let mut theta = Vec::with_capacity(rows * cols);
        for chunk in body[..matrix_len].chunks_exact(8) {
            theta.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(CheckpointError::NonFinite);
        }
        Ok(Policy {
            role,
            iter,
            step,
            table: Table { rows, cols, theta },
        })
    }
}
