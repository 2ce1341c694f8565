//! Closed-form prompt-KV accounting, prefill FLOP counts and a two-track
//! compute/transfer timeline.

use serde::{Deserialize, Serialize};

use crate::blockindex::PruneSchedule;

pub const GIB: f64 = (1u64 << 30) as f64;

/// Inputs of the prompt-KV memory formula.
#[derive(Debug, Clone, PartialEq)]
pub struct MemSpec {
    pub n_layers: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub kv_bytes_per_elem: usize,
    pub schedule: PruneSchedule,
    pub prompt_len: usize,
    /// When set, budgets are rounded to whole blocks the way the engine keeps
    /// them: the sink and `k - 2` other full blocks plus the final block.
    pub block_size: Option<usize>,
}

impl MemSpec {
    /// 32 layers, 8 KV heads of 128, 2-byte elements.
    pub fn reference(prompt_len: usize, schedule: PruneSchedule) -> Self {
        Self {
            n_layers: 32,
            kv_heads: 8,
            head_dim: 128,
            kv_bytes_per_elem: 2,
            schedule,
            prompt_len,
            block_size: None,
        }
    }

    pub fn bytes_per_token_layer(&self) -> u64 {
        (self.kv_heads * self.head_dim * 2 * self.kv_bytes_per_elem) as u64
    }

    pub fn retained(&self, layer: usize) -> usize {
        retained_tokens(&self.schedule, self.prompt_len, self.block_size, layer)
    }
}

/// Prompt tokens whose KV is kept at `layer`. A pruning layer counts at its
/// new budget; layers before the first pruning layer keep everything.
pub fn retained_tokens(
    schedule: &PruneSchedule,
    prompt_len: usize,
    block_size: Option<usize>,
    layer: usize,
) -> usize {
    let Some(s) = schedule.stage_of(layer) else {
        return prompt_len;
    };
    let budget = schedule.stages[s].token_budget;
    match block_size {
        None => budget.min(prompt_len),
        Some(bs) => {
            let n_blocks = prompt_len.div_ceil(bs);
            let k = budget.div_ceil(bs);
            if k >= n_blocks {
                prompt_len
            } else {
                let tail = prompt_len - (n_blocks - 1) * bs;
                (k.max(2) - 1) * bs + tail
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemReport {
    pub bytes: u64,
    pub gib: f64,
    pub per_layer: Vec<u64>,
}

pub fn prompt_kv_bytes(spec: &MemSpec) -> MemReport {
    let per = spec.bytes_per_token_layer();
    let per_layer: Vec<u64> = (0..spec.n_layers)
        .map(|l| spec.retained(l) as u64 * per)
        .collect();
    let bytes = per_layer.iter().sum();
    MemReport {
        bytes,
        gib: bytes as f64 / GIB,
        per_layer,
    }
}

pub fn saving_pct(full: u64, pruned: u64) -> f64 {
    if full == 0 {
        return 0.0;
    }
    100.0 * (1.0 - pruned as f64 / full as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemRow {
    pub prompt_len: usize,
    pub full_bytes: u64,
    pub pruned_bytes: u64,
    pub full_gib: f64,
    pub pruned_gib: f64,
    pub saving_pct: f64,
}

/// One row per prompt length: full KV, pruned KV and the saving.
pub fn memtable(base: &MemSpec, lengths: &[usize]) -> Vec<MemRow> {
    lengths
        .iter()
        .map(|&n| {
            let pruned = prompt_kv_bytes(&MemSpec {
                prompt_len: n,
                ..base.clone()
            });
            let full = prompt_kv_bytes(&MemSpec {
                prompt_len: n,
                schedule: PruneSchedule::empty(),
                ..base.clone()
            });
            MemRow {
                prompt_len: n,
                full_bytes: full.bytes,
                pruned_bytes: pruned.bytes,
                full_gib: full.gib,
                pruned_gib: pruned.gib,
                saving_pct: saving_pct(full.bytes, pruned.bytes),
            }
        })
        .collect()
}

pub fn render_memtable(rows: &[MemRow]) -> String {
    let label = |n: usize| {
        if n.is_multiple_of(1024) {
            format!("{}k", n / 1024)
        } else {
            n.to_string()
        }
    };
    let mut out = format!("{:<12}", "Prompt");
    for r in rows {
        out.push_str(&format!("{:>9}", label(r.prompt_len)));
    }
    out.push('\n');
    let mut line = |name: &str, f: &dyn Fn(&MemRow) -> String| {
        out.push_str(&format!("{name:<12}"));
        for r in rows {
            out.push_str(&format!("{:>9}", f(r)));
        }
        out.push('\n');
    };
    line("Full KV", &|r| format!("{:.2}", r.full_gib));
    line("Pruned", &|r| format!("{:.2}", r.pruned_gib));
    line("Saving (%)", &|r| format!("{:.1}", r.saving_pct));
    out
}

/// Dimensions for prefill FLOP counting.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopSpec {
    pub n_layers: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub schedule: PruneSchedule,
    pub prompt_len: usize,
    pub block_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopTerms {
    pub qkv: u128,
    pub attention: u128,
    pub out_proj: u128,
    pub ffn: u128,
}

impl FlopTerms {
    pub fn total(&self) -> u128 {
        self.qkv + self.attention + self.out_proj + self.ffn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub dense: FlopTerms,
    pub pruned: FlopTerms,
    pub ratio: f64,
    pub ffn_ratio: f64,
}

/// Terms for one layer that reads `n_in` rows and keeps `n_out` for its FFN.
pub fn layer_flops(hidden: usize, ffn_dim: usize, n_in: usize, n_out: usize) -> FlopTerms {
    let (h, f, n, m) = (hidden as u128, ffn_dim as u128, n_in as u128, n_out as u128);
    FlopTerms {
        qkv: 2 * n * h * 3 * h,
        // QK^T and PV over the causal triangle.
        attention: 4 * h * n * (n + 1) / 2,
        out_proj: 2 * n * h * h,
        ffn: 2 * m * 2 * h * f,
    }
}

fn sum_flops(spec: &FlopSpec, schedule: &PruneSchedule) -> FlopTerms {
    let mut acc = FlopTerms::default();
    let mut n_in = spec.prompt_len;
    for l in 0..spec.n_layers {
        let n_out = retained_tokens(schedule, spec.prompt_len, spec.block_size, l).min(n_in);
        let t = layer_flops(spec.hidden, spec.ffn_dim, n_in, n_out);
        acc.qkv += t.qkv;
        acc.attention += t.attention;
        acc.out_proj += t.out_proj;
        acc.ffn += t.ffn;
        n_in = n_out;
    }
    acc
}

pub fn prefill_flops(spec: &FlopSpec) -> FlopReport {
    let dense = sum_flops(spec, &PruneSchedule::empty());
    let pruned = sum_flops(spec, &spec.schedule);
    let div = |a: u128, b: u128| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    FlopReport {
        ratio: div(pruned.total(), dense.total()),
        ffn_ratio: div(pruned.ffn, dense.ffn),
        dense,
        pruned,
    }
}

/// Abstract-unit compute costs of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub t_qkv: u64,
    pub t_attn: u64,
    pub t_ffn: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineParams {
    pub layers: Vec<LayerCost>,
    pub t_fetch_blk: u64,
    /// Blocks fetched after the attention of each layer.
    pub fetch_blocks: Vec<u64>,
}

impl TimelineParams {
    pub fn uniform(n_layers: usize, cost: LayerCost, t_fetch_blk: u64) -> Self {
        Self {
            layers: vec![cost; n_layers],
            t_fetch_blk,
            fetch_blocks: vec![0; n_layers],
        }
    }

    pub fn fetch_cost(&self, layer: usize) -> u64 {
        self.fetch_blocks.get(layer).copied().unwrap_or(0) * self.t_fetch_blk
    }

    pub fn compute_sum(&self) -> u64 {
        self.layers.iter().map(|c| c.t_qkv + c.t_attn + c.t_ffn).sum()
    }

    /// Compute time available to hide a fetch issued after attention of `layer`.
    pub fn hide_window(&self, layer: usize) -> u64 {
        self.layers[layer].t_ffn + self.layers.get(layer + 1).map_or(0, |c| c.t_qkv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Fetch runs on the transfer track during FFN and the next QKV.
    Overlapped,
    /// Fetch blocks compute between selection and the next attention.
    Serialized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Compute,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Qkv,
    Attention,
    Ffn,
    Fetch,
    Stall,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub ordinal: usize,
    pub track: Track,
    pub layer: usize,
    pub op: Op,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub placement: Placement,
    pub events: Vec<TimelineEvent>,
    pub makespan: u64,
    pub stall_total: u64,
    pub compute_sum: u64,
}

struct Recorder {
    events: Vec<TimelineEvent>,
}

impl Recorder {
    fn push(&mut self, track: Track, layer: usize, op: Op, start: u64, end: u64) {
        let ordinal = self.events.len();
        self.events.push(TimelineEvent {
            ordinal,
            track,
            layer,
            op,
            start,
            end,
        });
    }
}

/// Waits for an outstanding fetch; returns the stall inserted.
fn await_fetch(rec: &mut Recorder, t: &mut u64, layer: usize, pending: &mut Option<u64>) -> u64 {
    match pending.take() {
        Some(end) if end > *t => {
            rec.push(Track::Compute, layer, Op::Stall, *t, end);
            let stall = end - *t;
            *t = end;
            stall
        }
        _ => 0,
    }
}

/// Simulates one decode pass. A fetch planned at layer `l` must finish before
/// the attention of layer `l + 1` (or before the pass ends).
pub fn simulate_timeline(params: &TimelineParams, placement: Placement) -> Timeline {
    let mut rec = Recorder { events: Vec::new() };
    let mut t = 0u64;
    let mut stall_total = 0u64;
    let mut pending: Option<u64> = None;
    for (l, c) in params.layers.iter().enumerate() {
        rec.push(Track::Compute, l, Op::Qkv, t, t + c.t_qkv);
        t += c.t_qkv;
        stall_total += await_fetch(&mut rec, &mut t, l, &mut pending);
        rec.push(Track::Compute, l, Op::Attention, t, t + c.t_attn);
        t += c.t_attn;
        let f = params.fetch_cost(l);
        if f > 0 {
            match placement {
                Placement::Overlapped => {
                    rec.push(Track::Transfer, l, Op::Fetch, t, t + f);
                    pending = Some(t + f);
                }
                Placement::Serialized => {
                    rec.push(Track::Compute, l, Op::Stall, t, t + f);
                    stall_total += f;
                    t += f;
                }
            }
        }
        rec.push(Track::Compute, l, Op::Ffn, t, t + c.t_ffn);
        t += c.t_ffn;
    }
    let last = params.layers.len().saturating_sub(1);
    stall_total += await_fetch(&mut rec, &mut t, last, &mut pending);
    Timeline {
        placement,
        events: rec.events,
        makespan: t,
        stall_total,
        compute_sum: params.compute_sum(),
    }
}

pub fn render_timeline(tl: &Timeline) -> String {
    let mut out = String::new();
    for e in &tl.events {
        out.push_str(&format!(
            "{:>4} {:<8} layer {:>3} {:<9} {:>8} {:>8}\n",
            e.ordinal,
            format!("{:?}", e.track).to_lowercase(),
            e.layer,
            format!("{:?}", e.op).to_lowercase(),
            e.start,
            e.end
        ));
    }
    out.push_str(&format!(
        "placement {:?}: makespan {} stall {} compute {}\n",
        tl.placement, tl.makespan, tl.stall_total, tl.compute_sum
    ));
    out
}
