//! Run configuration: defaults, flat `key = value` files and per-field
//! validation. Keys are the long flag names of the `run` command.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::blockindex::PruneSchedule;
use crate::engine::{EngineConfig, EngineMode};
use crate::model::{ModelConfig, XorShift64Star};
use crate::swap::SwapPolicy;

/// Environment variable naming the default directory for trace and report files.
pub const TRACE_DIR_ENV: &str = "TIERPRUNE_TRACE_DIR";

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid `{field}`: {msg}")]
pub struct ConfigError {
    pub field: String,
    pub msg: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    /// Representative-key scores.
    RepKeys,
    /// Seeded pseudo-random scores that force candidate churn.
    Churn,
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScorerKind::RepKeys => "repkeys",
            ScorerKind::Churn => "churn",
        })
    }
}

impl FromStr for ScorerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "repkeys" => Ok(ScorerKind::RepKeys),
            "churn" => Ok(ScorerKind::Churn),
            _ => Err(format!("unknown scorer `{s}` (expected repkeys or churn)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub kv_bytes: usize,
    pub seed: u64,
    pub prompt_file: Option<PathBuf>,
    pub prompt_len: usize,
    pub schedule: PruneSchedule,
    pub block_size: usize,
    pub unit_size: usize,
    pub gamma: f64,
    pub window: usize,
    pub mode: EngineMode,
    pub decode_budget: Option<Vec<usize>>,
    pub steps: usize,
    pub scorer: ScorerKind,
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub slow_ns_per_byte: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            layers: 32,
            heads: 2,
            head_dim: 8,
            ffn_dim: 32,
            vocab: 256,
            kv_bytes: 2,
            seed: 0,
            prompt_file: None,
            prompt_len: 8192,
            schedule: PruneSchedule::reference(),
            block_size: 64,
            unit_size: 8,
            gamma: SwapPolicy::DEFAULT_GAMMA,
            window: 4,
            mode: EngineMode::Revival,
            decode_budget: None,
            steps: 16,
            scorer: ScorerKind::RepKeys,
            trace: None,
            report: None,
            slow_ns_per_byte: 0,
        }
    }
}

fn parse_num<T: FromStr>(field: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError::new(field, format!("`{value}` is not a valid number")))
}

fn parse_positive(field: &str, value: &str) -> Result<usize, ConfigError> {
    match parse_num::<usize>(field, value)? {
        0 => Err(ConfigError::new(field, "must be >= 1")),
        n => Ok(n),
    }
}

/// Accepts `none`, `reference` (layers 10/20/30 at 8k/4k/2k) or `layer:budget,...`.
pub fn parse_schedule(field: &str, value: &str) -> Result<PruneSchedule, ConfigError> {
    if value.trim().eq_ignore_ascii_case("reference") {
        return Ok(PruneSchedule::reference());
    }
    PruneSchedule::parse(value).map_err(|e| ConfigError::new(field, e.to_string()))
}

/// Parses comma-separated lengths with an optional `k` suffix.
pub fn parse_lengths(field: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|p| {
            let p = p.trim();
            match p.strip_suffix(['k', 'K']) {
                Some(n) => parse_num::<usize>(field, n).map(|n| n * 1024),
                None => parse_num(field, p),
            }
        })
        .collect()
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "layers",
        "heads",
        "head-dim",
        "ffn-dim",
        "vocab",
        "kv-bytes",
        "seed",
        "prompt-file",
        "prompt-len",
        "schedule",
        "block-size",
        "unit-size",
        "gamma",
        "window",
        "mode",
        "decode-budget",
        "steps",
        "scorer",
        "trace",
        "report",
        "slow-ns-per-byte",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "layers" => self.layers = parse_positive(key, v)?,
            "heads" => self.heads = parse_positive(key, v)?,
            "head-dim" => self.head_dim = parse_positive(key, v)?,
            "ffn-dim" => self.ffn_dim = parse_positive(key, v)?,
            "vocab" => self.vocab = parse_positive(key, v)?,
            "kv-bytes" => self.kv_bytes = parse_positive(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "prompt-file" => self.prompt_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "prompt-len" => self.prompt_len = parse_positive(key, v)?,
            "schedule" => self.schedule = parse_schedule(key, v)?,
            "block-size" => self.block_size = parse_positive(key, v)?,
            "unit-size" => self.unit_size = parse_positive(key, v)?,
            "gamma" => {
                let g: f64 = parse_num(key, v)?;
                SwapPolicy::new(g).map_err(|e| ConfigError::new(key, e.to_string()))?;
                self.gamma = g;
            }
            "window" => self.window = parse_positive(key, v)?,
            "mode" => self.mode = v.parse().map_err(|e: String| ConfigError::new(key, e))?,
            "decode-budget" => {
                self.decode_budget = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(
                        v.split(',')
                            .map(|p| parse_positive(key, p.trim()))
                            .collect::<Result<_, _>>()?,
                    )
                }
            }
            "steps" => self.steps = parse_num(key, v)?,
            "scorer" => self.scorer = v.parse().map_err(|e: String| ConfigError::new(key, e))?,
            "trace" => self.trace = (!v.is_empty()).then(|| PathBuf::from(v)),
            "report" => self.report = (!v.is_empty()).then(|| PathBuf::from(v)),
            "slow-ns-per-byte" => self.slow_ns_per_byte = parse_num(key, v)?,
            _ => return Err(ConfigError::new(key, "unknown key")),
        }
        Ok(())
    }

    /// Every set key with its canonical value, in [`Self::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let all: Vec<(&'static str, Option<String>)> = vec![
            ("layers", Some(self.layers.to_string())),
            ("heads", Some(self.heads.to_string())),
            ("head-dim", Some(self.head_dim.to_string())),
            ("ffn-dim", Some(self.ffn_dim.to_string())),
            ("vocab", Some(self.vocab.to_string())),
            ("kv-bytes", Some(self.kv_bytes.to_string())),
            ("seed", Some(self.seed.to_string())),
            ("prompt-file", path(&self.prompt_file)),
            ("prompt-len", Some(self.prompt_len.to_string())),
            ("schedule", Some(self.schedule.to_string())),
            ("block-size", Some(self.block_size.to_string())),
            ("unit-size", Some(self.unit_size.to_string())),
            ("gamma", Some(self.gamma.to_string())),
            ("window", Some(self.window.to_string())),
            ("mode", Some(self.mode.to_string())),
            (
                "decode-budget",
                self.decode_budget.as_ref().map(|v| {
                    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                }),
            ),
            ("steps", Some(self.steps.to_string())),
            ("scorer", Some(self.scorer.to_string())),
            ("trace", path(&self.trace)),
            ("report", path(&self.report)),
            ("slow-ns-per-byte", Some(self.slow_ns_per_byte.to_string())),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.map(|v| (k, v)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ConfigError::new(format!("line {}", i + 1), "expected key = value")
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Cross-field checks not covered by [`Self::set`].
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.head_dim.is_multiple_of(2) {
            return Err(ConfigError::new("head-dim", "must be even for rotary embedding"));
        }
        self.schedule
            .validate(self.layers)
            .map_err(|e| ConfigError::new("schedule", e.to_string()))?;
        if self.prompt_file.is_none() {
            let n_blocks = self.prompt_len.div_ceil(self.block_size);
            for (s, st) in self.schedule.stages.iter().enumerate() {
                if n_blocks >= 2 && st.token_budget.div_ceil(self.block_size) < 2 {
                    return Err(ConfigError::new(
                        "schedule",
                        format!(
                            "stage {s} budget {} keeps fewer than 2 blocks of {}",
                            st.token_budget, self.block_size
                        ),
                    ));
                }
            }
        }
        if let Some(d) = &self.decode_budget {
            if d.len() != self.schedule.len() {
                return Err(ConfigError::new(
                    "decode-budget",
                    format!("{} entries for {} stages", d.len(), self.schedule.len()),
                ));
            }
            for (s, &b) in d.iter().enumerate() {
                let max = self.schedule.block_budget(s, self.block_size);
                if b > max {
                    return Err(ConfigError::new(
                        "decode-budget",
                        format!("stage {s}: {b} blocks exceeds the prefill budget of {max}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.layers,
            n_heads: self.heads,
            head_dim: self.head_dim,
            ffn_dim: self.ffn_dim,
            vocab_size: self.vocab,
            kv_bytes_per_elem: self.kv_bytes,
            seed: self.seed,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            schedule: self.schedule.clone(),
            block_size: self.block_size,
            unit_size: self.unit_size,
            window: self.window,
            policy: SwapPolicy::new(self.gamma).expect("gamma checked by set"),
            mode: self.mode,
            decode_budget_override: self.decode_budget.clone(),
            fast_cap: None,
            slow_ns_per_byte: self.slow_ns_per_byte,
        }
    }

    /// Token ids from `prompt-file`, or `prompt-len` seeded uniform ids.
    pub fn prompt(&self) -> Result<Vec<u32>, ConfigError> {
        match &self.prompt_file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError::new("prompt-file", format!("{}: {e}", path.display())))?;
                let ids: Vec<u32> = text
                    .split_whitespace()
                    .map(|t| {
                        let id: u32 = parse_num("prompt-file", t)?;
                        if id as usize >= self.vocab {
                            return Err(ConfigError::new(
                                "prompt-file",
                                format!("token {id} outside vocab of {}", self.vocab),
                            ));
                        }
                        Ok(id)
                    })
                    .collect::<Result<_, _>>()?;
                if ids.is_empty() {
                    return Err(ConfigError::new("prompt-file", "no token ids"));
                }
                Ok(ids)
            }
            None => Ok(synthetic_prompt(self.seed, self.prompt_len, self.vocab)),
        }
    }

    pub fn trace_path(&self) -> PathBuf {
        self.trace
            .clone()
            .unwrap_or_else(|| default_dir().join("tierprune-trace.ndjson"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.report
            .clone()
            .unwrap_or_else(|| default_dir().join("tierprune-report.json"))
    }
}

fn default_dir() -> PathBuf {
    std::env::var_os(TRACE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn synthetic_prompt(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    let mut rng = XorShift64Star::for_tensor(seed, "prompt");
    (0..len).map(|_| (rng.next_u64() % vocab as u64) as u32).collect()
}
