//! Prefill and decode orchestration over the two-tier KV store.
//!
//! Prefill runs every layer over the surviving prompt rows. At each pruning
//! layer the rows of non-selected blocks are dropped right after attention and
//! their K/V at that layer is offloaded. Decode passes one token through all
//! layers; at each pruning layer it rescores the stage's eligible blocks,
//! plans a swap and lets the transfer run while FFN and the next layer's QKV
//! are computed.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::blockindex::{
    partition_blocks, score_blocks, select_candidates, select_with_pins, BlockId, BlockSet,
    BlockTable, IndexError, LocalQueryWindow, PruneSchedule, RepKeys, ScoreVector,
};
use crate::kernels::{KernelError, Matrix};
use crate::model::{splitmix64, Model, ModelError};
use crate::swap::{plan_swap, SwapError, SwapPolicy};
use crate::tiermem::{
    Direction, KvBlockEntry, KvKey, Residency, TierError, TierOptions, TierStore, TransferBatch,
    TransferTicket,
};
use crate::trace::{Payload, Phase, TraceLog};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Tier(#[from] TierError),
    #[error(transparent)]
    Swap(#[from] SwapError),
    #[error("config: {0}")]
    Config(String),
    #[error("engine state: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Where deep-layer K/V of a re-selected block comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    /// Only blocks that kept K/V through the whole stage are eligible.
    Strict,
    /// Every block with K/V at the pruning layer is eligible; missing deeper
    /// layers are recomputed from a checkpoint on first use.
    #[default]
    Revival,
}

impl fmt::Display for EngineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineMode::Strict => "strict",
            EngineMode::Revival => "revival",
        })
    }
}

impl FromStr for EngineMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "strict" => Ok(EngineMode::Strict),
            "revival" => Ok(EngineMode::Revival),
            _ => Err(format!("unknown mode `{s}` (expected strict or revival)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub schedule: PruneSchedule,
    pub block_size: usize,
    pub unit_size: usize,
    pub window: usize,
    pub policy: SwapPolicy,
    pub mode: EngineMode,
    /// Decode-time block budget per stage; must not exceed the prefill budget.
    pub decode_budget_override: Option<Vec<usize>>,
    pub fast_cap: Option<u64>,
    pub slow_ns_per_byte: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            schedule: PruneSchedule::empty(),
            block_size: 64,
            unit_size: 8,
            window: 4,
            policy: SwapPolicy::default(),
            mode: EngineMode::default(),
            decode_budget_override: None,
            fast_cap: None,
            slow_ns_per_byte: 0,
        }
    }
}

/// What a score source sees at one pruning layer.
#[derive(Debug)]
pub struct ScoreContext<'a> {
    pub step: u64,
    pub stage: usize,
    pub layer: usize,
    pub eligible: &'a BlockSet,
    /// Scores from the representative keys and the local query window.
    pub computed: &'a ScoreVector,
}

/// Supplies the block scores used for selection.
pub trait ScoreSource: Send {
    fn scores(&mut self, ctx: &ScoreContext<'_>) -> ScoreVector;
}

/// Uses the computed scores unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct RepKeyScores;

impl ScoreSource for RepKeyScores {
    fn scores(&mut self, ctx: &ScoreContext<'_>) -> ScoreVector {
        ctx.computed.clone()
    }
}

/// Pseudo-random scores keyed by `(seed, step, stage, block)`, which makes the
/// candidate set churn from step to step.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedChurn {
    pub seed: u64,
}

impl ScoreSource for ScriptedChurn {
    fn scores(&mut self, ctx: &ScoreContext<'_>) -> ScoreVector {
        ctx.eligible
            .iter()
            .map(|&b| {
                let h = splitmix64(
                    self.seed
                        ^ splitmix64(ctx.step)
                        ^ splitmix64((ctx.stage as u64) << 32 | b.0 as u64),
                );
                (b, (h >> 11) as f64 / (1u64 << 53) as f64)
            })
            .collect()
    }
}

#[derive(Debug)]
struct Pending {
    ticket: Option<TransferTicket>,
    /// Layer whose attention first needs the result.
    due: usize,
    revive: BlockSet,
}

#[derive(Debug)]
struct StageState {
    layer: usize,
    end: usize,
    prefill_blocks: usize,
    decode_blocks: usize,
    active: BlockSet,
    eligible: BlockSet,
    /// Blocks with K/V at every layer of the stage.
    complete: BlockSet,
    reps: RepKeys,
    window: LocalQueryWindow,
    revived: BlockSet,
    pending: Option<Pending>,
}

/// Read-only view of one stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageView {
    pub layer: usize,
    /// One past the stage's last layer.
    pub end: usize,
    pub prefill_blocks: usize,
    pub decode_blocks: usize,
    pub active: BlockSet,
    pub eligible: BlockSet,
    pub complete: BlockSet,
    pub revived: BlockSet,
}

#[derive(Debug, Default)]
struct ResponseKv {
    keys: Vec<f32>,
    values: Vec<f32>,
    positions: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EngineStats {
    pub prefill_fast_bytes: u64,
    pub decode_steps: u64,
    pub swap_decisions: u64,
    pub swaps_triggered: u64,
    pub overlap_sum: f64,
    pub overlap_min: Option<f64>,
    pub decode_loads: u64,
    pub decode_load_bytes: u64,
    pub decode_offloads: u64,
    pub decode_offload_bytes: u64,
    pub decode_evicts: u64,
    pub revivals: u64,
    pub revived_layers: u64,
}

impl EngineStats {
    pub fn overlap_mean(&self) -> Option<f64> {
        (self.swap_decisions > 0).then(|| self.overlap_sum / self.swap_decisions as f64)
    }

    pub fn decode_transfers(&self) -> u64 {
        self.decode_loads + self.decode_offloads + self.decode_evicts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineReport {
    pub prompt_len: usize,
    pub n_blocks: usize,
    pub block_size: usize,
    pub mode: EngineMode,
    pub schedule: String,
    pub gamma: f64,
    pub fast_bytes: u64,
    pub fast_bytes_per_layer: Vec<u64>,
    pub response_bytes: u64,
    pub rep_bytes: u64,
    pub checkpoints: usize,
    pub stats: EngineStats,
    pub stages: Vec<StageView>,
}

pub struct Engine {
    model: Arc<Model>,
    cfg: EngineConfig,
    store: TierStore,
    scorer: Box<dyn ScoreSource>,
    trace: TraceLog,
    table: Option<BlockTable>,
    stages: Vec<StageState>,
    response: Vec<ResponseKv>,
    last_attention: Vec<Vec<usize>>,
    checksums: BTreeMap<KvKey, u64>,
    step: u64,
    next_pos: usize,
    stats: EngineStats,
    poisoned: Option<String>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("step", &self.step)
            .field("stages", &self.stages.len())
            .field("store", &self.store)
            .finish()
    }
}

/// Row ranges of `blocks` when their tokens are stacked in ascending order.
fn block_spans(table: &BlockTable, blocks: &[BlockId]) -> Vec<(BlockId, Range<usize>)> {
    let mut start = 0;
    blocks
        .iter()
        .map(|&b| {
            let len = table.block(b).expect("block in table").len();
            let span = (b, start..start + len);
            start += len;
            span
        })
        .collect()
}

impl Engine {
    pub fn new(model: Arc<Model>, cfg: EngineConfig) -> Result<Self> {
        let mc = model.config();
        cfg.schedule
            .validate(mc.n_layers)
            .map_err(|e| EngineError::Config(e.to_string()))?;
        if cfg.block_size == 0 || cfg.unit_size == 0 || cfg.window == 0 {
            return Err(EngineError::Config(
                "block_size, unit_size and window must be >= 1".into(),
            ));
        }
        if let Some(o) = &cfg.decode_budget_override {
            if o.len() != cfg.schedule.len() {
                return Err(EngineError::Config(format!(
                    "decode_budget_override has {} entries for {} stages",
                    o.len(),
                    cfg.schedule.len()
                )));
            }
        }
        let store = TierStore::new(TierOptions {
            kv_bytes_per_elem: mc.kv_bytes_per_elem,
            fast_cap: cfg.fast_cap,
            slow_ns_per_byte: cfg.slow_ns_per_byte,
        });
        let n_layers = mc.n_layers;
        Ok(Self {
            model,
            cfg,
            store,
            scorer: Box::new(RepKeyScores),
            trace: TraceLog::new(),
            table: None,
            stages: Vec::new(),
            response: (0..n_layers).map(|_| ResponseKv::default()).collect(),
            last_attention: vec![Vec::new(); n_layers],
            checksums: BTreeMap::new(),
            step: 0,
            next_pos: 0,
            stats: EngineStats::default(),
            poisoned: None,
        })
    }

    pub fn with_scorer(mut self, scorer: Box<dyn ScoreSource>) -> Self {
        self.scorer = scorer;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn store(&self) -> &TierStore {
        &self.store
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut TraceLog {
        &mut self.trace
    }

    pub fn table(&self) -> Option<&BlockTable> {
        self.table.as_ref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn response_len(&self) -> usize {
        self.response.first().map_or(0, |r| r.positions.len())
    }

    /// Key positions seen by the last decode token's attention at `layer`.
    pub fn last_attention_positions(&self, layer: usize) -> &[usize] {
        &self.last_attention[layer]
    }

    pub fn stages(&self) -> Vec<StageView> {
        self.stages
            .iter()
            .map(|s| StageView {
                layer: s.layer,
                end: s.end,
                prefill_blocks: s.prefill_blocks,
                decode_blocks: s.decode_blocks,
                active: s.active.clone(),
                eligible: s.eligible.clone(),
                complete: s.complete.clone(),
                revived: s.revived.clone(),
            })
            .collect()
    }

    /// Blocks whose prompt K/V `layer`'s attention reads.
    pub fn attended_blocks(&self, layer: usize) -> BlockSet {
        match self.cfg.schedule.stage_of(layer) {
            Some(s) => self.stages[s].active.clone(),
            None => self.table.as_ref().map(BlockTable::ids).unwrap_or_default(),
        }
    }

    /// Bytes of representative keys kept for scoring.
    pub fn rep_bytes(&self) -> u64 {
        let mc = self.model.config();
        self.stages
            .iter()
            .map(|s| {
                let units: usize = s
                    .eligible
                    .iter()
                    .filter_map(|b| s.reps.units(*b).map(<[_]>::len))
                    .sum();
                (units * mc.hidden() * mc.kv_bytes_per_elem) as u64
            })
            .sum()
    }

    fn check_usable(&self) -> Result<()> {
        match &self.poisoned {
            Some(msg) => Err(EngineError::State(format!("engine unusable after error: {msg}"))),
            None => Ok(()),
        }
    }

    fn poison<T>(&mut self, r: Result<T>) -> Result<T> {
        if let Err(e) = &r {
            self.poisoned = Some(e.to_string());
        }
        r
    }

    fn last_layer(&self) -> usize {
        self.model.config().n_layers - 1
    }

    fn emit(&mut self, layer: usize, stage: Option<usize>, payload: Payload) {
        self.trace.emit(self.step, layer, stage, payload);
    }

    fn put_fast(&mut self, entry: KvBlockEntry) -> Result<()> {
        self.checksums.insert(entry.key(), entry.checksum());
        self.store.put_fast(entry)?;
        Ok(())
    }

    fn init_stages(&mut self, table: &BlockTable) -> Result<()> {
        let mc = self.model.config();
        let (n_layers, n_heads, head_dim, hidden) =
            (mc.n_layers, mc.n_heads, mc.head_dim, mc.hidden());
        let sched = &self.cfg.schedule;
        let mut stages = Vec::with_capacity(sched.len());
        for (s, st) in sched.stages.iter().enumerate() {
            let prefill_blocks = sched.block_budget(s, self.cfg.block_size);
            if table.len() >= 2 && prefill_blocks < 2 {
                return Err(EngineError::Config(format!(
                    "stage {s} budget of {} tokens keeps fewer than 2 blocks of {}; \
                     prefill must keep the first and the final block",
                    st.token_budget, self.cfg.block_size
                )));
            }
            let decode_blocks = match &self.cfg.decode_budget_override {
                Some(o) if o[s] == 0 || o[s] > prefill_blocks => {
                    return Err(EngineError::Config(format!(
                        "decode budget {} for stage {s} must be in 1..={prefill_blocks}",
                        o[s]
                    )))
                }
                Some(o) => o[s],
                None => prefill_blocks,
            };
            stages.push(StageState {
                layer: st.layer,
                end: sched.stages.get(s + 1).map_or(n_layers, |n| n.layer),
                prefill_blocks,
                decode_blocks,
                active: BlockSet::new(),
                eligible: BlockSet::new(),
                complete: BlockSet::new(),
                reps: RepKeys::new(st.layer, self.cfg.unit_size, n_heads, head_dim),
                window: LocalQueryWindow::new(self.cfg.window, hidden)?,
                revived: BlockSet::new(),
                pending: None,
            });
        }
        self.stages = stages;
        Ok(())
    }

    fn checked_scores(&mut self, ctx: &ScoreContext<'_>) -> Result<ScoreVector> {
        let scores = self.scorer.scores(ctx);
        if scores.keys().ne(ctx.eligible.iter()) || scores.values().any(|v| !v.is_finite()) {
            return Err(EngineError::State(format!(
                "score source must return one finite score per eligible block at stage {}",
                ctx.stage
            )));
        }
        Ok(scores)
    }

    /// Runs the prompt through every layer and returns the logits of its final
    /// position.
    pub fn prefill(&mut self, prompt: &[u32]) -> Result<Vec<f32>> {
        self.check_usable()?;
        if self.table.is_some() {
            return Err(EngineError::State("prefill already ran".into()));
        }
        if prompt.is_empty() {
            return Err(EngineError::Config("prompt must hold at least one token".into()));
        }
        let r = self.prefill_inner(prompt);
        self.poison(r)
    }

    fn prefill_inner(&mut self, prompt: &[u32]) -> Result<Vec<f32>> {
        let table = partition_blocks(prompt.len(), self.cfg.block_size)?;
        self.init_stages(&table)?;
        self.step = 1;
        let model = Arc::clone(&self.model);
        let n_layers = model.config().n_layers;
        let mut hidden = model.embed(prompt)?;
        let mut retained: Vec<BlockId> = table.ids().into_iter().collect();
        let mut positions: Vec<usize> = (0..prompt.len()).collect();
        for layer in 0..n_layers {
            self.await_due(layer)?;
            let qkv = model.qkv(layer, &hidden, &positions)?;
            let attended =
                model.attend(layer, &hidden, &qkv.q, &positions, &qkv.k, &qkv.v, &positions)?;
            let spans = block_spans(&table, &retained);
            let entries: Vec<KvBlockEntry> = spans
                .iter()
                .map(|(b, r)| KvBlockEntry {
                    layer,
                    block: *b,
                    positions: positions[r.clone()].to_vec(),
                    keys: qkv.k.slice_rows(r.clone()),
                    values: qkv.v.slice_rows(r.clone()),
                })
                .collect();
            let rows_in = positions.len();
            let stage_here = self.stages.iter().position(|s| s.layer == layer);
            let Some(s) = stage_here else {
                for e in entries {
                    self.put_fast(e)?;
                }
                self.emit(
                    layer,
                    self.cfg.schedule.stage_of(layer),
                    Payload::Layer {
                        rows_in,
                        rows_out: rows_in,
                        kv_rows: rows_in,
                        attn_keys: rows_in,
                    },
                );
                hidden = model.ffn(layer, &attended)?;
                continue;
            };

            let mut reps = RepKeys::new(
                layer,
                self.cfg.unit_size,
                model.config().n_heads,
                model.config().head_dim,
            );
            for e in &entries {
                reps.insert_block(table.block(e.block).expect("block in table"), &e.keys)?;
            }
            let mut window = LocalQueryWindow::new(self.cfg.window, model.config().hidden())?;
            for r in rows_in.saturating_sub(self.cfg.window)..rows_in {
                window.push(qkv.q.row(r))?;
            }
            let q_l = window.mean().expect("window holds at least one query");
            let scoreable: BlockSet = retained.iter().copied().collect();
            let computed = score_blocks(&q_l, &reps, &scoreable)?;
            let scores = self.checked_scores(&ScoreContext {
                step: self.step,
                stage: s,
                layer,
                eligible: &scoreable,
                computed: &computed,
            })?;
            let pins = BlockSet::from([BlockId::SINK, table.last()]);
            let k_blk = self.stages[s].prefill_blocks;
            let candidate = select_with_pins(&scores, k_blk, &pins);
            let dropped: BlockSet = scoreable.difference(&candidate).copied().collect();
            self.emit(
                layer,
                Some(s),
                Payload::Select {
                    phase: Phase::Prefill,
                    k_blk,
                    scores: scores.into_iter().collect(),
                    candidate: candidate.clone(),
                    prev_active: None,
                    b_memory: BlockSet::new(),
                    gamma: self.cfg.policy.gamma(),
                },
            );
            self.emit(
                layer,
                Some(s),
                Payload::Swap {
                    phase: Phase::Prefill,
                    overlap: None,
                    triggered: true,
                    new_active: candidate.clone(),
                    load: BlockSet::new(),
                    offload: dropped.clone(),
                    evict: BlockSet::new(),
                },
            );
            for e in entries {
                self.put_fast(e)?;
            }
            let mut keep_rows = Vec::new();
            for (b, r) in &spans {
                if candidate.contains(b) {
                    keep_rows.extend(r.clone());
                } else if self.cfg.mode == EngineMode::Revival {
                    self.store
                        .checkpoint_boundary(layer, *b, attended.slice_rows(r.clone()))?;
                }
            }
            if !dropped.is_empty() {
                let ticket = self.store.submit_transfers(TransferBatch {
                    step: self.step,
                    stage: s,
                    offloads: dropped.iter().map(|&b| KvKey::new(layer, b)).collect(),
                    ..Default::default()
                })?;
                self.stages[s].pending = Some(Pending {
                    ticket: Some(ticket),
                    due: layer + 1,
                    revive: BlockSet::new(),
                });
            }
            let kept = attended.select_rows(&keep_rows);
            positions = keep_rows.iter().map(|&r| positions[r]).collect();
            retained = candidate.iter().copied().collect();
            let st = &mut self.stages[s];
            st.complete = if st.end == st.layer + 1 {
                scoreable.clone()
            } else {
                candidate.clone()
            };
            st.eligible = match self.cfg.mode {
                EngineMode::Revival => scoreable,
                EngineMode::Strict => candidate.clone(),
            };
            st.active = candidate;
            st.reps = reps;
            st.window = window;
            self.emit(
                layer,
                Some(s),
                Payload::Layer {
                    rows_in,
                    rows_out: kept.rows(),
                    kv_rows: rows_in,
                    attn_keys: rows_in,
                },
            );
            hidden = model.ffn(layer, &kept)?;
        }
        self.await_all()?;
        self.stats.prefill_fast_bytes = self.store.fast_bytes();
        self.emit_footprint();
        self.next_pos = prompt.len();
        debug_assert_eq!(positions.last(), Some(&(prompt.len() - 1)));
        self.table = Some(table);
        Ok(model.logits(hidden.row(hidden.rows() - 1))?)
    }

    /// Feeds one generated token and returns the logits for the next one.
    pub fn decode_step(&mut self, token: u32) -> Result<Vec<f32>> {
        self.check_usable()?;
        if self.table.is_none() {
            return Err(EngineError::State("decode_step before prefill".into()));
        }
        let r = self.decode_inner(token);
        self.poison(r)
    }

    fn decode_inner(&mut self, token: u32) -> Result<Vec<f32>> {
        self.step += 1;
        let model = Arc::clone(&self.model);
        let mc = model.config().clone();
        let h = mc.hidden();
        let pos = self.next_pos;
        let mut x = model.embed(&[token])?;
        for layer in 0..mc.n_layers {
            let qkv = model.qkv(layer, &x, &[pos])?;
            self.await_due(layer)?;
            let blocks = self.attended_blocks(layer);
            let resp = &self.response[layer];
            let cap = resp.positions.len() + 1;
            let (mut kd, mut vd, mut kpos) = (
                Vec::with_capacity(cap * h),
                Vec::with_capacity(cap * h),
                Vec::with_capacity(cap),
            );
            for &b in &blocks {
                let e = self.store.get_fast(KvKey::new(layer, b)).ok_or_else(|| {
                    EngineError::State(format!(
                        "active block {b} has no fast-tier K/V at layer {layer}"
                    ))
                })?;
                kd.extend_from_slice(e.keys.data());
                vd.extend_from_slice(e.values.data());
                kpos.extend_from_slice(&e.positions);
            }
            kd.extend_from_slice(&resp.keys);
            vd.extend_from_slice(&resp.values);
            kpos.extend_from_slice(&resp.positions);
            kd.extend_from_slice(qkv.k.row(0));
            vd.extend_from_slice(qkv.v.row(0));
            kpos.push(pos);
            let n_keys = kpos.len();
            let keys = Matrix::new(n_keys, h, kd)?;
            let values = Matrix::new(n_keys, h, vd)?;
            let attended = model.attend(layer, &x, &qkv.q, &[pos], &keys, &values, &kpos)?;
            self.last_attention[layer] = kpos;
            let resp = &mut self.response[layer];
            resp.keys.extend_from_slice(qkv.k.row(0));
            resp.values.extend_from_slice(qkv.v.row(0));
            resp.positions.push(pos);
            self.store
                .add_response_bytes((2 * h * mc.kv_bytes_per_elem) as u64);
            let stage = self.cfg.schedule.stage_of(layer);
            self.emit(
                layer,
                stage,
                Payload::Layer {
                    rows_in: 1,
                    rows_out: 1,
                    kv_rows: 1,
                    attn_keys: n_keys,
                },
            );
            if let Some(s) = stage.filter(|&s| self.stages[s].layer == layer) {
                self.decode_select(s, layer, qkv.q.row(0))?;
            }
            x = model.ffn(layer, &attended)?;
        }
        self.await_all()?;
        self.emit_footprint();
        self.next_pos += 1;
        self.stats.decode_steps += 1;
        Ok(model.logits(x.row(0))?)
    }

    /// Active blocks of stage `s` whose every stage-layer entry has a slow copy.
    fn stage_b_memory(&self, s: usize) -> BlockSet {
        let st = &self.stages[s];
        st.active
            .iter()
            .copied()
            .filter(|&b| {
                (st.layer..st.end)
                    .all(|l| self.store.residency(KvKey::new(l, b)) != Residency::Fast)
            })
            .collect()
    }

    fn decode_select(&mut self, s: usize, layer: usize, query: &[f32]) -> Result<()> {
        let st = &mut self.stages[s];
        st.window.push(query)?;
        let q_l = st.window.mean().expect("window holds at least one query");
        let computed = score_blocks(&q_l, &st.reps, &st.eligible)?;
        let eligible = st.eligible.clone();
        let k_blk = st.decode_blocks;
        let scores = self.checked_scores(&ScoreContext {
            step: self.step,
            stage: s,
            layer,
            eligible: &eligible,
            computed: &computed,
        })?;
        let candidate = select_candidates(&scores, k_blk);
        let b_memory = self.stage_b_memory(s);
        let prev = self.stages[s].active.clone();
        let plan = plan_swap(s, &candidate, &prev, &b_memory, &self.cfg.policy)?;
        self.emit(
            layer,
            Some(s),
            Payload::Select {
                phase: Phase::Decode,
                k_blk,
                scores: scores.into_iter().collect(),
                candidate,
                prev_active: Some(prev),
                b_memory,
                gamma: self.cfg.policy.gamma(),
            },
        );
        self.emit(
            layer,
            Some(s),
            Payload::Swap {
                phase: Phase::Decode,
                overlap: Some(plan.overlap),
                triggered: plan.triggered,
                new_active: plan.new_active.clone(),
                load: plan.load.clone(),
                offload: plan.offload.clone(),
                evict: plan.evict.clone(),
            },
        );
        self.stats.swap_decisions += 1;
        self.stats.overlap_sum += plan.overlap;
        self.stats.overlap_min = Some(self.stats.overlap_min.map_or(plan.overlap, |m| m.min(plan.overlap)));
        if !plan.triggered {
            return Ok(());
        }
        self.stats.swaps_triggered += 1;
        let st = &self.stages[s];
        let mut batch = TransferBatch {
            step: self.step,
            stage: s,
            ..Default::default()
        };
        let mut revive = BlockSet::new();
        for l in st.layer..st.end {
            for &b in &plan.load {
                let key = KvKey::new(l, b);
                match self.store.residency(key) {
                    Residency::Slow => batch.loads.push(key),
                    Residency::Unmaterialized if l > st.layer => {
                        if self.cfg.mode == EngineMode::Strict {
                            return Err(EngineError::State(format!(
                                "strict mode selected block {b} without K/V at layer {l}"
                            )));
                        }
                        revive.insert(b);
                    }
                    r => {
                        return Err(EngineError::State(format!(
                            "cannot load {key}: residency {r:?}"
                        )))
                    }
                }
            }
            for &b in plan.offload.iter().chain(&plan.evict) {
                let key = KvKey::new(l, b);
                match self.store.residency(key) {
                    Residency::Fast => batch.offloads.push(key),
                    Residency::Both => batch.evicts.push(key),
                    r => {
                        return Err(EngineError::State(format!(
                            "cannot release {key}: residency {r:?}"
                        )))
                    }
                }
            }
        }
        let ticket = if batch.is_empty() {
            None
        } else {
            Some(self.store.submit_transfers(batch)?)
        };
        let st = &mut self.stages[s];
        st.active = plan.new_active;
        st.pending = Some(Pending {
            ticket,
            due: layer + 1,
            revive,
        });
        Ok(())
    }

    fn await_due(&mut self, layer: usize) -> Result<()> {
        for s in 0..self.stages.len() {
            if self.stages[s].pending.as_ref().is_some_and(|p| p.due <= layer) {
                self.complete_pending(s, layer)?;
            }
        }
        Ok(())
    }

    fn await_all(&mut self) -> Result<()> {
        let last = self.last_layer();
        for s in 0..self.stages.len() {
            if self.stages[s].pending.is_some() {
                self.complete_pending(s, last)?;
            }
        }
        Ok(())
    }

    fn complete_pending(&mut self, s: usize, at_layer: usize) -> Result<()> {
        let Some(p) = self.stages[s].pending.take() else {
            return Ok(());
        };
        if let Some(mut ticket) = p.ticket {
            let events = self.store.await_ticket(&mut ticket)?.to_vec();
            for ev in events {
                if self.step > 1 {
                    match ev.direction {
                        Direction::Load => {
                            self.stats.decode_loads += 1;
                            self.stats.decode_load_bytes += ev.bytes;
                        }
                        Direction::Offload => {
                            self.stats.decode_offloads += 1;
                            self.stats.decode_offload_bytes += ev.bytes;
                        }
                        Direction::Evict => self.stats.decode_evicts += 1,
                    }
                }
                self.emit(
                    at_layer,
                    Some(s),
                    Payload::Transfer {
                        ticket: ev.ticket,
                        direction: ev.direction,
                        kv_layer: ev.key.layer,
                        block: ev.key.block,
                        bytes: ev.bytes,
                        enqueue_ordinal: ev.enqueue_ordinal,
                        complete_ordinal: ev.complete_ordinal,
                    },
                );
            }
        }
        for b in p.revive {
            self.revive_block(s, b, at_layer)?;
        }
        Ok(())
    }

    /// Recomputes the missing stage-layer K/V of `block` from its checkpoint,
    /// attending to the stage's current active blocks. No-op when the block
    /// already has K/V at every stage layer.
    pub fn revive_block(&mut self, s: usize, block: BlockId, at_layer: usize) -> Result<()> {
        if self.cfg.mode == EngineMode::Strict {
            return Err(EngineError::State("revival is disabled in strict mode".into()));
        }
        let st = self
            .stages
            .get(s)
            .ok_or_else(|| EngineError::State(format!("no stage {s}")))?;
        if st.complete.contains(&block) {
            return Ok(());
        }
        let table = self.table.as_ref().ok_or_else(|| EngineError::State("no prompt".into()))?;
        let positions: Vec<usize> = table
            .block(block)
            .ok_or_else(|| EngineError::State(format!("block {block} outside the prompt")))?
            .tokens
            .clone()
            .collect();
        let (p, end) = (st.layer, st.end);
        let context: Vec<BlockId> = st.active.range(..block).copied().collect();
        let model = Arc::clone(&self.model);
        let h = model.config().hidden();
        let checkpoint = self.store.fetch_checkpoint(p, block)?.clone();
        let mut hidden = model.ffn(p, &checkpoint)?;
        let mut layers = Vec::new();
        for l in p + 1..end {
            let qkv = model.qkv(l, &hidden, &positions)?;
            let (mut kd, mut vd, mut kpos) = (Vec::new(), Vec::new(), Vec::new());
            for &a in &context {
                let e = self.store.get_fast(KvKey::new(l, a)).ok_or_else(|| {
                    EngineError::State(format!("revival context block {a} missing at layer {l}"))
                })?;
                kd.extend_from_slice(e.keys.data());
                vd.extend_from_slice(e.values.data());
                kpos.extend_from_slice(&e.positions);
            }
            kd.extend_from_slice(qkv.k.data());
            vd.extend_from_slice(qkv.v.data());
            kpos.extend_from_slice(&positions);
            let keys = Matrix::new(kpos.len(), h, kd)?;
            let values = Matrix::new(kpos.len(), h, vd)?;
            let attended = model.attend(l, &hidden, &qkv.q, &positions, &keys, &values, &kpos)?;
            let key = KvKey::new(l, block);
            if self.store.residency(key) != Residency::Unmaterialized {
                return Err(EngineError::State(format!("{key} already materialized")));
            }
            self.put_fast(KvBlockEntry {
                layer: l,
                block,
                positions: positions.clone(),
                keys: qkv.k,
                values: qkv.v,
            })?;
            layers.push(l);
            if l + 1 < end {
                hidden = model.ffn(l, &attended)?;
            }
        }
        let st = &mut self.stages[s];
        st.complete.insert(block);
        st.revived.insert(block);
        self.stats.revivals += 1;
        self.stats.revived_layers += layers.len() as u64;
        self.emit(
            at_layer,
            Some(s),
            Payload::Revive {
                block,
                layers,
                rows: positions.len(),
            },
        );
        Ok(())
    }

    fn emit_footprint(&mut self) {
        let per_layer = self.fast_bytes_per_layer();
        let payload = Payload::Footprint {
            fast_prompt_bytes: self.store.fast_bytes(),
            per_layer,
            response_bytes: self.store.response_bytes(),
            rep_bytes: self.rep_bytes(),
            checkpoints: self.store.checkpoint_count(),
        };
        let last = self.last_layer();
        self.emit(last, None, payload);
    }

    pub fn fast_bytes_per_layer(&self) -> Vec<u64> {
        let by_layer = self.store.fast_bytes_by_layer();
        (0..self.model.config().n_layers)
            .map(|l| by_layer.get(&l).copied().unwrap_or(0))
            .collect()
    }

    /// Checks the store against the engine's view: the fast tier holds exactly
    /// the attended blocks at every layer, byte counts agree, and every copy
    /// still carries the checksum it had when first written.
    pub fn audit(&self) -> std::result::Result<(), String> {
        if self.stages.iter().any(|s| s.pending.is_some()) {
            return Err("transfers still pending".into());
        }
        for layer in 0..self.model.config().n_layers {
            let expected = self.attended_blocks(layer);
            let actual = self.store.fast_blocks_at(layer);
            if expected != actual {
                return Err(format!(
                    "layer {layer}: fast tier holds {actual:?}, active {expected:?}"
                ));
            }
        }
        if self.store.fast_bytes() != self.store.recount_fast_bytes() {
            return Err("fast byte counter drifted".into());
        }
        for (key, sum) in &self.checksums {
            for copy in [self.store.get_fast(*key), self.store.get_slow(*key)]
                .into_iter()
                .flatten()
            {
                if copy.checksum() != *sum {
                    return Err(format!("torn entry at {key}"));
                }
                let len = copy.positions.len();
                if copy.keys.rows() != len || copy.values.rows() != len {
                    return Err(format!("row count mismatch at {key}"));
                }
            }
        }
        for s in &self.stages {
            if !s.active.contains(&BlockId::SINK) {
                return Err(format!("stage at layer {} lost the sink block", s.layer));
            }
        }
        Ok(())
    }

    pub fn report(&self) -> EngineReport {
        let table = self.table.as_ref();
        EngineReport {
            prompt_len: table.map_or(0, |t| t.prompt_len),
            n_blocks: table.map_or(0, BlockTable::len),
            block_size: self.cfg.block_size,
            mode: self.cfg.mode,
            schedule: self.cfg.schedule.to_string(),
            gamma: self.cfg.policy.gamma(),
            fast_bytes: self.store.fast_bytes(),
            fast_bytes_per_layer: self.fast_bytes_per_layer(),
            response_bytes: self.store.response_bytes(),
            rep_bytes: self.rep_bytes(),
            checkpoints: self.store.checkpoint_count(),
            stats: self.stats.clone(),
            stages: self.stages(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(n_layers: usize) -> Arc<Model> {
        Arc::new(
            Model::seeded(ModelConfig {
                n_layers,
                n_heads: 2,
                head_dim: 4,
                ffn_dim: 16,
                vocab_size: 32,
                kv_bytes_per_elem: 2,
                seed: 11,
            })
            .unwrap(),
        )
    }

    fn prompt(n: usize) -> Vec<u32> {
        (0..n).map(|i| (i * 7 % 32) as u32).collect()
    }

    fn cfg(schedule: &str) -> EngineConfig {
        EngineConfig {
            schedule: PruneSchedule::parse(schedule).unwrap(),
            block_size: 4,
            unit_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn toy_budgets_shrink_rows() {
        let mut e = Engine::new(model(4), cfg("1:16,2:8")).unwrap();
        e.prefill(&prompt(24)).unwrap();
        let rows: Vec<(usize, usize)> = e
            .trace()
            .records()
            .iter()
            .filter_map(|r| match r.payload {
                Payload::Layer { rows_in, rows_out, .. } => Some((rows_in, rows_out)),
                _ => None,
            })
            .collect();
        assert_eq!(rows, vec![(24, 24), (24, 16), (16, 8), (8, 8)]);
        assert_eq!(e.fast_bytes_per_layer(), vec![24 * 32, 16 * 32, 8 * 32, 8 * 32]);
        e.audit().unwrap();
    }

    #[test]
    fn gamma_zero_never_swaps() {
        let mut c = cfg("1:8");
        c.policy = SwapPolicy::new(0.0).unwrap();
        let mut e = Engine::new(model(3), c)
            .unwrap()
            .with_scorer(Box::new(ScriptedChurn { seed: 3 }));
        e.prefill(&prompt(20)).unwrap();
        let active = e.stages()[0].active.clone();
        for t in 0..5 {
            e.decode_step(t).unwrap();
        }
        assert_eq!(e.stages()[0].active, active);
        assert_eq!(e.stats().decode_transfers(), 0);
        e.audit().unwrap();
    }

    #[test]
    fn churn_keeps_store_consistent() {
        let mut e = Engine::new(model(4), cfg("1:12,3:8"))
            .unwrap()
            .with_scorer(Box::new(ScriptedChurn { seed: 9 }));
        e.prefill(&prompt(32)).unwrap();
        for t in 0..12 {
            e.decode_step(t % 32).unwrap();
            e.audit().unwrap();
        }
        assert!(e.stats().swaps_triggered > 0);
        assert!(e.stats().revivals > 0);
    }

    #[test]
    fn strict_mode_only_rotates_prefill_blocks() {
        let mut c = cfg("1:16");
        c.mode = EngineMode::Strict;
        c.decode_budget_override = Some(vec![2]);
        let mut e = Engine::new(model(3), c)
            .unwrap()
            .with_scorer(Box::new(ScriptedChurn { seed: 1 }));
        e.prefill(&prompt(32)).unwrap();
        let eligible = e.stages()[0].eligible.clone();
        for t in 0..8 {
            e.decode_step(t).unwrap();
            assert!(e.stages()[0].active.is_subset(&eligible));
            e.audit().unwrap();
        }
        assert_eq!(e.stats().revivals, 0);
    }

    #[test]
    fn attention_reads_active_blocks_and_responses() {
        let mut c = cfg("1:8");
        c.policy = SwapPolicy::new(0.0).unwrap();
        let mut e = Engine::new(model(3), c).unwrap();
        e.prefill(&prompt(16)).unwrap();
        e.decode_step(1).unwrap();
        e.decode_step(2).unwrap();
        for layer in 0..3 {
            let table = e.table().unwrap();
            let mut want: Vec<usize> = e
                .attended_blocks(layer)
                .iter()
                .flat_map(|b| table.block(*b).unwrap().tokens.clone())
                .collect();
            want.extend([16, 17]);
            if layer == 0 {
                // Layer 0 precedes the pruning layer: the whole prompt.
                assert_eq!(want.len(), 18);
            }
            assert_eq!(e.last_attention_positions(layer), &want[..]);
        }
    }

    #[test]
    fn one_block_budget_is_rejected() {
        let mut e = Engine::new(model(2), cfg("1:4")).unwrap();
        assert!(matches!(e.prefill(&prompt(16)), Err(EngineError::Config(_))));
    }

    #[test]
    fn decode_before_prefill_fails() {
        let mut e = Engine::new(model(2), cfg("")).unwrap();
        assert!(matches!(e.decode_step(0), Err(EngineError::State(_))));
    }

    #[test]
    fn mode_parse() {
        assert_eq!("strict".parse::<EngineMode>().unwrap(), EngineMode::Strict);
        assert!("loose".parse::<EngineMode>().is_err());
    }
}
