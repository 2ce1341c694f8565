//! Command implementations behind the `tierprune` binary.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::blockindex::PruneSchedule;
use crate::config::{parse_lengths, parse_schedule, ConfigError, RunConfig, ScorerKind};
use crate::costmodel::{
    memtable, prefill_flops, prompt_kv_bytes, render_memtable, render_timeline, simulate_timeline,
    FlopReport, FlopSpec, LayerCost, MemRow, MemSpec, Placement, TimelineParams,
};
use crate::engine::{Engine, EngineReport, ScriptedChurn};
use crate::model::Model;
use crate::probe::{probe, ProbeError, ProbeResult};
use crate::trace::{check_order, check_transfer_provenance, replay_swaps, Payload, TraceLog};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "tierprune", version, about = "Block-pruned long-prompt inference toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prefill a prompt, decode N tokens, write a trace and a JSON report.
    Run(RunArgs),
    /// Print the prompt-KV memory table for a set of prompt lengths.
    Memtable(MemtableArgs),
    /// Simulate the compute/transfer timeline of one decode pass.
    Timeline(TimelineArgs),
    /// Remove one prompt token's hidden state and report logit divergence.
    Probe(ProbeArgs),
    /// Run quick built-in consistency checks.
    Selftest,
}

/// Flags shared by `run` and `probe`. Every value is validated by the
/// config parser so errors name the offending field.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// Flat `key = value` file; flags given on the command line win.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long = "head-dim")]
    pub head_dim: Option<String>,
    #[arg(long = "ffn-dim")]
    pub ffn_dim: Option<String>,
    #[arg(long)]
    pub vocab: Option<String>,
    #[arg(long = "kv-bytes")]
    pub kv_bytes: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long = "prompt-file")]
    pub prompt_file: Option<String>,
    #[arg(long = "prompt-len")]
    pub prompt_len: Option<String>,
    /// `none`, `reference` or `layer:budget,...` (budgets accept a k suffix).
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long = "block-size")]
    pub block_size: Option<String>,
    #[arg(long = "unit-size")]
    pub unit_size: Option<String>,
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long)]
    pub window: Option<String>,
    /// `revival` or `strict`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Per-stage decode block budgets, comma separated.
    #[arg(long = "decode-budget")]
    pub decode_budget: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    /// `repkeys` or `churn`.
    #[arg(long)]
    pub scorer: Option<String>,
    #[arg(long)]
    pub trace: Option<String>,
    #[arg(long)]
    pub report: Option<String>,
    #[arg(long = "slow-ns-per-byte")]
    pub slow_ns_per_byte: Option<String>,
}

impl RunFlags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("layers", &self.layers),
            ("heads", &self.heads),
            ("head-dim", &self.head_dim),
            ("ffn-dim", &self.ffn_dim),
            ("vocab", &self.vocab),
            ("kv-bytes", &self.kv_bytes),
            ("seed", &self.seed),
            ("prompt-file", &self.prompt_file),
            ("prompt-len", &self.prompt_len),
            ("schedule", &self.schedule),
            ("block-size", &self.block_size),
            ("unit-size", &self.unit_size),
            ("gamma", &self.gamma),
            ("window", &self.window),
            ("mode", &self.mode),
            ("decode-budget", &self.decode_budget),
            ("steps", &self.steps),
            ("scorer", &self.scorer),
            ("trace", &self.trace),
            ("report", &self.report),
            ("slow-ns-per-byte", &self.slow_ns_per_byte),
        ]
    }

    /// Defaults, then the config file, then explicit flags.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::new("config", format!("{path}: {e}")))?;
            cfg.apply_text(&text)?;
        }
        for (key, value) in self.pairs() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub flags: RunFlags,
}

#[derive(Debug, Clone, Args)]
pub struct MemtableArgs {
    #[arg(long, default_value = "32")]
    pub layers: String,
    #[arg(long = "kv-heads", default_value = "8")]
    pub kv_heads: String,
    #[arg(long = "head-dim", default_value = "128")]
    pub head_dim: String,
    #[arg(long = "kv-bytes", default_value = "2")]
    pub kv_bytes: String,
    #[arg(long, default_value = "reference")]
    pub schedule: String,
    #[arg(long, default_value = "8k,16k,24k,28k,32k")]
    pub lengths: String,
    /// Round budgets to whole blocks of this size, as the engine keeps them.
    #[arg(long = "block-size")]
    pub block_size: Option<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlacementArg {
    Overlapped,
    Serialized,
    Both,
}

#[derive(Debug, Clone, Args)]
pub struct TimelineArgs {
    #[arg(long, default_value = "4")]
    pub layers: String,
    #[arg(long, default_value = "3")]
    pub qkv: String,
    #[arg(long, default_value = "5")]
    pub attn: String,
    #[arg(long, default_value = "7")]
    pub ffn: String,
    /// Transfer cost of one block.
    #[arg(long = "fetch-blk", default_value = "1")]
    pub fetch_blk: String,
    /// Blocks fetched after a layer's attention: `layer:blocks,...`.
    #[arg(long, default_value = "")]
    pub fetch: String,
    #[arg(long, value_enum, default_value = "both")]
    pub placement: PlacementArg,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub flags: RunFlags,
    #[arg(long = "prune-token")]
    pub prune_token: Option<String>,
    /// Layer from which the token is removed; equal to the layer count
    /// removes nothing.
    #[arg(long = "prune-layer")]
    pub prune_layer: Option<String>,
    /// Report every layer from 0 to the layer count.
    #[arg(long)]
    pub sweep: bool,
}

fn num<T: std::str::FromStr>(field: &str, v: &str) -> Result<T, ConfigError> {
    v.trim()
        .parse()
        .map_err(|_| ConfigError::new(field, format!("`{v}` is not a valid number")))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(CliError::runtime)
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => cmd_run(&a.flags.resolve()?, out).map(|_| ()),
        Command::Memtable(a) => cmd_memtable(&a, out).map(|_| ()),
        Command::Timeline(a) => cmd_timeline(&a, out),
        Command::Probe(a) => cmd_probe(&a, out).map(|_| ()),
        Command::Selftest => cmd_selftest(out),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Footprint {
    /// Fast-tier prompt K/V bytes right after prefill.
    pub measured_bytes: u64,
    /// Closed-form bytes for the same schedule, block-rounded.
    pub model_bytes: u64,
    pub matches: bool,
    pub measured_gib: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: Vec<(String, String)>,
    pub footprint: Footprint,
    pub flops: FlopReport,
    pub engine: EngineReport,
    pub trace_records: usize,
    pub swap_records_replayed: usize,
}

pub fn cmd_run(cfg: &RunConfig, out: &mut dyn Write) -> Result<RunReport, CliError> {
    let prompt = cfg.prompt()?;
    let mc = cfg.model_config();
    let model = Arc::new(Model::seeded(mc.clone()).map_err(CliError::runtime)?);
    let mut engine = Engine::new(Arc::clone(&model), cfg.engine_config())
        .map_err(|e| ConfigError::new("schedule", e.to_string()))?;
    if cfg.scorer == ScorerKind::Churn {
        engine = engine.with_scorer(Box::new(ScriptedChurn { seed: cfg.seed }));
    }
    let trace_path = cfg.trace_path();
    let file = std::fs::File::create(&trace_path).map_err(|e| io_err(&trace_path, e))?;
    engine
        .trace_mut()
        .set_sink(Box::new(std::io::BufWriter::new(file)));

    let mut logits = engine.prefill(&prompt).map_err(CliError::runtime)?;
    let measured = engine.stats().prefill_fast_bytes;
    engine.trace_mut().flush().map_err(|e| io_err(&trace_path, e))?;
    for _ in 0..cfg.steps {
        let next = argmax(&logits);
        logits = engine.decode_step(next).map_err(CliError::runtime)?;
        engine.trace_mut().flush().map_err(|e| io_err(&trace_path, e))?;
    }
    engine.audit().map_err(CliError::Runtime)?;

    let records = engine.trace().records();
    check_order(records).map_err(CliError::runtime)?;
    let replayed = replay_swaps(records).map_err(CliError::runtime)?;
    check_transfer_provenance(records).map_err(CliError::runtime)?;

    let spec = MemSpec {
        n_layers: mc.n_layers,
        kv_heads: mc.n_heads,
        head_dim: mc.head_dim,
        kv_bytes_per_elem: mc.kv_bytes_per_elem,
        schedule: cfg.schedule.clone(),
        prompt_len: prompt.len(),
        block_size: Some(cfg.block_size),
    };
    let model_bytes = prompt_kv_bytes(&spec).bytes;
    let flops = prefill_flops(&FlopSpec {
        n_layers: mc.n_layers,
        hidden: mc.hidden(),
        ffn_dim: mc.ffn_dim,
        schedule: cfg.schedule.clone(),
        prompt_len: prompt.len(),
        block_size: Some(cfg.block_size),
    });
    let report = RunReport {
        config: cfg
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        footprint: Footprint {
            measured_bytes: measured,
            model_bytes,
            matches: measured == model_bytes,
            measured_gib: measured as f64 / crate::costmodel::GIB,
        },
        flops,
        engine: engine.report(),
        trace_records: records.len(),
        swap_records_replayed: replayed,
    };
    let report_path = cfg.report_path();
    let json = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
    std::fs::write(&report_path, json + "\n").map_err(|e| io_err(&report_path, e))?;

    let s = &report.engine.stats;
    let mut text = String::new();
    text.push_str(&format!(
        "prompt {} tokens in {} blocks; schedule {}; mode {}\n",
        report.engine.prompt_len, report.engine.n_blocks, report.engine.schedule, report.engine.mode
    ));
    text.push_str(&format!(
        "prompt KV after prefill: {} bytes (closed form {}, {})\n",
        measured,
        model_bytes,
        if report.footprint.matches { "match" } else { "MISMATCH" }
    ));
    text.push_str(&format!("prefill FLOP ratio: {:.4}\n", report.flops.ratio));
    text.push_str(&format!(
        "decode: {} steps, {} swap decisions, {} triggered, overlap mean {}\n",
        s.decode_steps,
        s.swap_decisions,
        s.swaps_triggered,
        s.overlap_mean().map_or("n/a".into(), |m| format!("{m:.4}"))
    ));
    text.push_str(&format!(
        "decode transfers: {} ({} loads / {} B, {} offloads / {} B, {} evicts), {} revivals\n",
        s.decode_transfers(),
        s.decode_loads,
        s.decode_load_bytes,
        s.decode_offloads,
        s.decode_offload_bytes,
        s.decode_evicts,
        s.revivals
    ));
    text.push_str(&format!(
        "trace: {} ({} records)\nreport: {}\n",
        trace_path.display(),
        report.trace_records,
        report_path.display()
    ));
    emit(out, &text)?;
    Ok(report)
}

fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u32
}

pub fn cmd_memtable(a: &MemtableArgs, out: &mut dyn Write) -> Result<Vec<MemRow>, CliError> {
    let spec = MemSpec {
        n_layers: num("layers", &a.layers)?,
        kv_heads: num("kv-heads", &a.kv_heads)?,
        head_dim: num("head-dim", &a.head_dim)?,
        kv_bytes_per_elem: num("kv-bytes", &a.kv_bytes)?,
        schedule: parse_schedule("schedule", &a.schedule)?,
        prompt_len: 0,
        block_size: a
            .block_size
            .as_deref()
            .map(|b| num("block-size", b))
            .transpose()?,
    };
    spec.schedule
        .validate(spec.n_layers)
        .map_err(|e| ConfigError::new("schedule", e.to_string()))?;
    if spec.block_size == Some(0) {
        return Err(ConfigError::new("block-size", "must be >= 1").into());
    }
    let lengths = parse_lengths("lengths", &a.lengths)?;
    let rows = memtable(&spec, &lengths);
    if a.json {
        let json = serde_json::to_string_pretty(&rows).map_err(CliError::runtime)?;
        emit(out, &(json + "\n"))?;
    } else {
        emit(out, &render_memtable(&rows))?;
    }
    Ok(rows)
}

/// Parses `layer:blocks,...` into a per-layer vector.
fn parse_fetch(v: &str, n_layers: usize) -> Result<Vec<u64>, ConfigError> {
    let mut blocks = vec![0; n_layers];
    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (l, b) = part
            .split_once(':')
            .ok_or_else(|| ConfigError::new("fetch", format!("`{part}` is not layer:blocks")))?;
        let l: usize = num("fetch", l)?;
        if l >= n_layers {
            return Err(ConfigError::new("fetch", format!("layer {l} >= layers {n_layers}")));
        }
        blocks[l] = num("fetch", b)?;
    }
    Ok(blocks)
}

pub fn timeline_params(a: &TimelineArgs) -> Result<TimelineParams, ConfigError> {
    let layers: usize = num("layers", &a.layers)?;
    if layers == 0 {
        return Err(ConfigError::new("layers", "must be >= 1"));
    }
    let cost = LayerCost {
        t_qkv: num("qkv", &a.qkv)?,
        t_attn: num("attn", &a.attn)?,
        t_ffn: num("ffn", &a.ffn)?,
    };
    let mut p = TimelineParams::uniform(layers, cost, num("fetch-blk", &a.fetch_blk)?);
    p.fetch_blocks = parse_fetch(&a.fetch, layers)?;
    Ok(p)
}

pub fn cmd_timeline(a: &TimelineArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let params = timeline_params(a)?;
    let placements: &[Placement] = match a.placement {
        PlacementArg::Overlapped => &[Placement::Overlapped],
        PlacementArg::Serialized => &[Placement::Serialized],
        PlacementArg::Both => &[Placement::Overlapped, Placement::Serialized],
    };
    let tls: Vec<_> = placements
        .iter()
        .map(|&p| simulate_timeline(&params, p))
        .collect();
    if a.json {
        let json = serde_json::to_string_pretty(&tls).map_err(CliError::runtime)?;
        return emit(out, &(json + "\n"));
    }
    let mut text = String::new();
    for tl in &tls {
        text.push_str(&render_timeline(tl));
    }
    if let [o, s] = &tls[..] {
        text.push_str(&format!(
            "serialized - overlapped = {}\n",
            s.makespan - o.makespan
        ));
    }
    emit(out, &text)
}

pub fn cmd_probe(a: &ProbeArgs, out: &mut dyn Write) -> Result<Vec<ProbeResult>, CliError> {
    let cfg = a.flags.resolve()?;
    let prompt = cfg.prompt()?;
    let model = Model::seeded(cfg.model_config()).map_err(CliError::runtime)?;
    let token: usize = match &a.prune_token {
        Some(v) => num("prune-token", v)?,
        None => prompt.len() / 2,
    };
    let layers: Vec<usize> = if a.sweep {
        (0..=cfg.layers).collect()
    } else {
        vec![match &a.prune_layer {
            Some(v) => num("prune-layer", v)?,
            None => 0,
        }]
    };
    let mut results = Vec::new();
    let mut log = TraceLog::new();
    let mut text = String::from("prune_token prune_layer      max_abs    1-cos\n");
    for &l in &layers {
        let r = probe(&model, &prompt, token, l).map_err(|e| match e {
            ProbeError::Token(..) => ConfigError::new("prune-token", e.to_string()).into(),
            ProbeError::Layer(..) => ConfigError::new("prune-layer", e.to_string()).into(),
            ProbeError::Empty => ConfigError::new("prune-token", e.to_string()).into(),
            ProbeError::Model(m) => CliError::runtime(m),
        })?;
        text.push_str(&format!(
            "{:>11} {:>11} {:>12.6e} {:>8.2e}\n",
            r.prune_token, r.prune_layer, r.max_abs, r.cosine_divergence
        ));
        log.emit(
            0,
            l,
            None,
            Payload::Probe {
                prune_token: r.prune_token,
                prune_layer: r.prune_layer,
                max_abs: r.max_abs,
                cosine_divergence: r.cosine_divergence,
            },
        );
        results.push(r);
    }
    if let Some(path) = &cfg.trace {
        std::fs::write(path, log.to_ndjson()).map_err(|e| io_err(path, e))?;
    }
    emit(out, &text)?;
    Ok(results)
}

/// Small built-in checks; exit code 3 when any fails.
pub fn cmd_selftest(out: &mut dyn Write) -> Result<(), CliError> {
    let mut failures = 0;
    let mut report = |name: &str, ok: bool, out: &mut dyn Write| -> Result<(), CliError> {
        if !ok {
            failures += 1;
        }
        emit(out, &format!("{} {name}\n", if ok { "PASS" } else { "FAIL" }))
    };

    let rows = memtable(
        &MemSpec::reference(0, PruneSchedule::reference()),
        &[8192, 16384, 24576, 28672, 32768],
    );
    let want = [0.80, 1.11, 1.42, 1.58, 1.73];
    let ok = rows
        .iter()
        .zip(want)
        .all(|(r, w)| (r.pruned_gib - w).abs() <= 0.01);
    report("memory table", ok, out)?;

    let ok = (|| -> Result<bool, Box<dyn std::error::Error>> {
        let mc = crate::model::ModelConfig {
            n_layers: 2,
            n_heads: 2,
            head_dim: 4,
            ffn_dim: 16,
            vocab_size: 32,
            kv_bytes_per_elem: 2,
            seed: 1,
        };
        let model = Arc::new(Model::seeded(mc)?);
        let prompt: Vec<u32> = (0..40).map(|i| (i * 5 % 32) as u32).collect();
        let mut engine = Engine::new(Arc::clone(&model), Default::default())?;
        let got = engine.prefill(&prompt)?;
        let want = crate::probe::forward_logits(&model, &prompt, None)?;
        Ok(got
            .iter()
            .zip(&want)
            .all(|(a, b)| (a - b).abs() <= 1e-5))
    })()
    .unwrap_or(false);
    report("dense prefill equivalence", ok, out)?;

    let mut p = TimelineParams::uniform(
        3,
        LayerCost {
            t_qkv: 3,
            t_attn: 5,
            t_ffn: 7,
        },
        1,
    );
    p.fetch_blocks[1] = 10;
    let tl = simulate_timeline(&p, Placement::Overlapped);
    report("fetch hidden behind compute", tl.stall_total == 0 && tl.makespan == 45, out)?;

    if failures > 0 {
        return Err(CliError::Runtime(format!("{failures} self-test check(s) failed")));
    }
    Ok(())
}
