//! Run configuration: defaults, the flat key/value file format, and the
//! canonical snapshot rendering used for resume checks.

use std::fmt::Write as _;
use std::path::Path;

use crate::grpo::GrpoConfig;
use crate::judge::{DEFAULT_JUDGE_MAX_RETRIES, DEFAULT_JUDGE_TIMEOUT_MS};
use crate::monitor::StopThresholds;

use super::RunError;

/// Full configuration for one tug-of-war run.
///
/// Every field maps to one dotted key in the config file; see
/// [`RunConfig::parse`] for the file format and [`RunConfig::snapshot`]
/// for the canonical rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed; every random stream in the run derives from it.
    pub seed: u64,
    /// Number of tug-of-war iterations.
    pub iterations: usize,
    /// Sampling count for candidate filtering (even, at least 2).
    pub filter_n: usize,
    /// Fraction of each phase dataset used for training (rest validates).
    pub train_val_split: f64,
    /// Fraction of the first iteration subset used for attacker cold start.
    pub attacker_coldstart_fraction: f64,
    /// Supervised steps for the defender cold start.
    pub coldstart_defender_steps: usize,
    /// Attacker cold-start steps played against the untrained defender
    /// before switching to the cold-started one.
    pub coldstart_attacker_warmup_steps: usize,
    /// Total attacker cold-start steps (warmup included).
    pub coldstart_attacker_total_steps: usize,
    /// Learning rate for supervised cold-start updates.
    pub sft_lr: f64,
    /// Batch size for supervised cold-start updates.
    pub sft_batch_size: usize,
    /// Policy-gradient settings shared by both players.
    pub grpo: GrpoConfig,
    /// Step cap for each attacker training phase.
    pub attacker_max_steps: usize,
    /// Step cap for each defender training phase.
    pub defender_max_steps: usize,
    /// Steps between validation checkpoints inside a phase.
    pub val_interval: usize,
    /// Seed jailbreak dataset size.
    pub n_jailbreak: usize,
    /// Seed general dataset size.
    pub n_general: usize,
    /// Held-out jailbreak probe size.
    pub probe_jailbreak: usize,
    /// Held-out general probe size.
    pub probe_general: usize,
    /// Sampling temperature during training and attack evaluation.
    pub temp_train: f64,
    /// Sampling temperature for refusal/accuracy evaluation.
    pub temp_eval: f64,
    /// Maximum defender response length.
    pub defender_max_len: usize,
    /// Maximum attacker generation length.
    pub attacker_max_len: usize,
    /// Remote judge URL; empty selects the built-in rule judge.
    pub judge_url: String,
    /// Remote judge overall deadline per batch, in milliseconds.
    pub judge_timeout_ms: u64,
    /// Remote judge retry budget per batch.
    pub judge_max_retries: u32,
    /// Early-stop thresholds for the quality monitor.
    pub thresholds: StopThresholds,
    /// Whether defender phases compute and act on the over-refusal rate.
    pub orr_monitoring: bool,
    /// Output directory for the run.
    pub run_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            iterations: 3,
            filter_n: 6,
            train_val_split: 0.8,
            attacker_coldstart_fraction: 0.3,
            coldstart_defender_steps: 300,
            coldstart_attacker_warmup_steps: 100,
            coldstart_attacker_total_steps: 200,
            sft_lr: 1.0,
            sft_batch_size: 16,
            grpo: GrpoConfig::default(),
            attacker_max_steps: 500,
            defender_max_steps: 500,
            val_interval: 20,
            n_jailbreak: 120,
            n_general: 240,
            probe_jailbreak: 160,
            probe_general: 120,
            temp_train: 1.0,
            temp_eval: 0.2,
            defender_max_len: 8,
            attacker_max_len: 28,
            judge_url: String::new(),
            judge_timeout_ms: DEFAULT_JUDGE_TIMEOUT_MS,
            judge_max_retries: DEFAULT_JUDGE_MAX_RETRIES,
            thresholds: StopThresholds::default(),
            orr_monitoring: true,
            run_dir: "sectow-run".to_string(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> RunError {
    RunError::Config(msg.into())
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, RunError> {
    value
        .parse::<T>()
        .map_err(|_| config_err(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, RunError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err(format!(
            "key `{key}`: expected `true` or `false`, got `{value}`"
        ))),
    }
}

impl RunConfig {
    /// Parses the flat config file format: one `dotted.key = value` pair
    /// per line, `#` starts a comment, blank lines are skipped. Unknown
    /// and repeated keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig, RunError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                config_err(format!("line {}: expected `key = value`", idx + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(config_err(format!("line {}: duplicate key `{key}`", idx + 1)));
            }
            seen.push(key.to_string());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<RunConfig, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            config_err(format!("cannot read config {}: {e}", path.display()))
        })?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), RunError> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "filter_n" => self.filter_n = parse_num(key, value)?,
            "train_val_split" => self.train_val_split = parse_num(key, value)?,
            "attacker_coldstart_fraction" => {
                self.attacker_coldstart_fraction = parse_num(key, value)?
            }
            "coldstart.defender_steps" => {
                self.coldstart_defender_steps = parse_num(key, value)?
            }
            "coldstart.attacker_warmup_steps" => {
                self.coldstart_attacker_warmup_steps = parse_num(key, value)?
            }
            "coldstart.attacker_total_steps" => {
                self.coldstart_attacker_total_steps = parse_num(key, value)?
            }
            "sft.lr" => self.sft_lr = parse_num(key, value)?,
            "sft.batch_size" => self.sft_batch_size = parse_num(key, value)?,
            "grpo.group_size" => self.grpo.group_size = parse_num(key, value)?,
            "grpo.clip_eps" => self.grpo.clip_eps = parse_num(key, value)?,
            "grpo.kl_beta" => self.grpo.kl_beta = parse_num(key, value)?,
            "grpo.lr" => self.grpo.lr = parse_num(key, value)?,
            "grpo.epochs_per_batch" => self.grpo.epochs_per_batch = parse_num(key, value)?,
            "grpo.std_floor" => self.grpo.std_floor = parse_num(key, value)?,
            "phase.attacker_max_steps" => self.attacker_max_steps = parse_num(key, value)?,
            "phase.defender_max_steps" => self.defender_max_steps = parse_num(key, value)?,
            "phase.val_interval" => self.val_interval = parse_num(key, value)?,
            "data.n_jailbreak" => self.n_jailbreak = parse_num(key, value)?,
            "data.n_general" => self.n_general = parse_num(key, value)?,
            "probe.n_jailbreak" => self.probe_jailbreak = parse_num(key, value)?,
            "probe.n_general" => self.probe_general = parse_num(key, value)?,
            "temp.train" => self.temp_train = parse_num(key, value)?,
            "temp.eval" => self.temp_eval = parse_num(key, value)?,
            "gen.defender_max_len" => self.defender_max_len = parse_num(key, value)?,
            "gen.attacker_max_len" => self.attacker_max_len = parse_num(key, value)?,
            "judge.url" => self.judge_url = value.to_string(),
            "judge.timeout_ms" => self.judge_timeout_ms = parse_num(key, value)?,
            "judge.max_retries" => self.judge_max_retries = parse_num(key, value)?,
            "monitor.diversity_drop" => {
                self.thresholds.diversity_drop = parse_num(key, value)?
            }
            "monitor.orr_max" => self.thresholds.orr_max = parse_num(key, value)?,
            "monitor.orr_enabled" => self.orr_monitoring = parse_bool(key, value)?,
            "run.dir" => self.run_dir = value.to_string(),
            _ => return Err(config_err(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Checks cross-field invariants.
    pub fn validate(&self) -> Result<(), RunError> {
        if self.iterations == 0 {
            return Err(config_err("iterations must be at least 1"));
        }
        if !(self.train_val_split > 0.0 && self.train_val_split < 1.0) {
            return Err(config_err("train_val_split must lie in (0, 1)"));
        }
        if !(self.attacker_coldstart_fraction > 0.0 && self.attacker_coldstart_fraction < 1.0)
        {
            return Err(config_err("attacker_coldstart_fraction must lie in (0, 1)"));
        }
        if self.filter_n < 2 || self.filter_n % 2 != 0 {
            return Err(config_err("filter_n must be an even number of at least 2"));
        }
        if !(self.sft_lr > 0.0 && self.sft_lr.is_finite()) {
            return Err(config_err("sft.lr must be positive and finite"));
        }
        if self.sft_batch_size == 0 {
            return Err(config_err("sft.batch_size must be positive"));
        }
        self.grpo
            .validate()
            .map_err(|e| config_err(format!("grpo: {e}")))?;
        if self.val_interval == 0 {
            return Err(config_err("phase.val_interval must be positive"));
        }
        if self.n_jailbreak < self.iterations || self.n_general < self.iterations {
            return Err(config_err(
                "data sizes must be at least the iteration count so every \
                 iteration receives a nonempty subset",
            ));
        }
        if self.probe_jailbreak == 0 || self.probe_general == 0 {
            return Err(config_err("probe sizes must be positive"));
        }
        for (name, t) in [("temp.train", self.temp_train), ("temp.eval", self.temp_eval)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(config_err(format!("{name} must be positive and finite")));
            }
        }
        if self.defender_max_len == 0 || self.attacker_max_len == 0 {
            return Err(config_err("generation length caps must be positive"));
        }
        if !(self.thresholds.diversity_drop > 0.0 && self.thresholds.diversity_drop < 1.0) {
            return Err(config_err("monitor.diversity_drop must lie in (0, 1)"));
        }
        if !(self.thresholds.orr_max > 0.0 && self.thresholds.orr_max < 1.0) {
            return Err(config_err("monitor.orr_max must lie in (0, 1)"));
        }
        if self.run_dir.is_empty() {
            return Err(config_err("run.dir must not be empty"));
        }
        Ok(())
    }

    /// Renders the configuration in canonical key order. Parsing the
    /// snapshot reproduces the config exactly, which lets a resumed run
    /// verify it was handed the same settings.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let kv: &[(&str, String)] = &[
            ("seed", self.seed.to_string()),
            ("iterations", self.iterations.to_string()),
            ("filter_n", self.filter_n.to_string()),
            ("train_val_split", self.train_val_split.to_string()),
            (
                "attacker_coldstart_fraction",
                self.attacker_coldstart_fraction.to_string(),
            ),
            (
                "coldstart.defender_steps",
                self.coldstart_defender_steps.to_string(),
            ),
            (
                "coldstart.attacker_warmup_steps",
                self.coldstart_attacker_warmup_steps.to_string(),
            ),
            (
                "coldstart.attacker_total_steps",
                self.coldstart_attacker_total_steps.to_string(),
            ),
            ("sft.lr", self.sft_lr.to_string()),
            ("sft.batch_size", self.sft_batch_size.to_string()),
            ("grpo.group_size", self.grpo.group_size.to_string()),
            ("grpo.clip_eps", self.grpo.clip_eps.to_string()),
            ("grpo.kl_beta", self.grpo.kl_beta.to_string()),
            ("grpo.lr", self.grpo.lr.to_string()),
            ("grpo.epochs_per_batch", self.grpo.epochs_per_batch.to_string()),
            ("grpo.std_floor", self.grpo.std_floor.to_string()),
            ("phase.attacker_max_steps", self.attacker_max_steps.to_string()),
            ("phase.defender_max_steps", self.defender_max_steps.to_string()),
            ("phase.val_interval", self.val_interval.to_string()),
            ("data.n_jailbreak", self.n_jailbreak.to_string()),
            ("data.n_general", self.n_general.to_string()),
            ("probe.n_jailbreak", self.probe_jailbreak.to_string()),
            ("probe.n_general", self.probe_general.to_string()),
            ("temp.train", self.temp_train.to_string()),
            ("temp.eval", self.temp_eval.to_string()),
            ("gen.defender_max_len", self.defender_max_len.to_string()),
            ("gen.attacker_max_len", self.attacker_max_len.to_string()),
            ("judge.url", self.judge_url.clone()),
            ("judge.timeout_ms", self.judge_timeout_ms.to_string()),
            ("judge.max_retries", self.judge_max_retries.to_string()),
            (
                "monitor.diversity_drop",
                self.thresholds.diversity_drop.to_string(),
            ),
            ("monitor.orr_max", self.thresholds.orr_max.to_string()),
            ("monitor.orr_enabled", self.orr_monitoring.to_string()),
            ("run.dir", self.run_dir.clone()),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn snapshot_round_trips_exactly() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.snapshot()).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.snapshot(), cfg.snapshot());
    }

    #[test]
    fn parse_overrides_and_comments() {
        let text = "\
# comment line
seed = 9
grpo.group_size = 4   # trailing comment
monitor.orr_enabled = false

temp.eval = 0.5
judge.url = http://127.0.0.1:9/v1/judge
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.grpo.group_size, 4);
        assert!(!cfg.orr_monitoring);
        assert_eq!(cfg.temp_eval, 0.5);
        assert_eq!(cfg.judge_url, "http://127.0.0.1:9/v1/judge");
        assert_eq!(cfg.iterations, 3);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("grpo.groupsize = 4").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn duplicate_key_is_an_error() {
        let err = RunConfig::parse("seed = 1\nseed = 2").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn malformed_line_and_value_are_errors() {
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("seed = banana").is_err());
        assert!(RunConfig::parse("monitor.orr_enabled = yes").is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        for bad in [
            "iterations = 0",
            "train_val_split = 1.0",
            "attacker_coldstart_fraction = 0",
            "filter_n = 5",
            "filter_n = 0",
            "sft.lr = 0",
            "phase.val_interval = 0",
            "data.n_jailbreak = 2\niterations = 3",
            "temp.train = 0",
            "monitor.orr_max = 1.0",
            "run.dir =",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "accepted: {bad}");
        }
    }

    #[test]
    fn scientific_notation_floats_parse() {
        let cfg = RunConfig::parse("grpo.std_floor = 1e-6").unwrap();
        assert_eq!(cfg.grpo.std_floor, 1e-6);
    }
}
