//! Append-only NDJSON event log.
//!
//! Every record carries `seq`, `step`, `layer`, `stage` and a `kind` tag; the
//! remaining fields depend on the kind. The full line schema is documented in
//! `docs/trace-schema.md`. Records are ordered by `(step, layer, seq)`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockindex::{BlockId, BlockSet};
use crate::swap::{plan_swap, SwapPolicy};
use crate::tiermem::Direction;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("trace sink: {0}")]
    Io(#[from] io::Error),
    #[error("record {seq}: {msg}")]
    Inconsistent { seq: u64, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    /// Candidate selection at a pruning layer, with every input `plan_swap` needs.
    Select {
        phase: Phase,
        k_blk: usize,
        /// `(block, score)` pairs in ascending block order.
        scores: Vec<(BlockId, f64)>,
        candidate: BlockSet,
        prev_active: Option<BlockSet>,
        b_memory: BlockSet,
        gamma: f64,
    },
    Swap {
        phase: Phase,
        overlap: Option<f64>,
        triggered: bool,
        new_active: BlockSet,
        load: BlockSet,
        offload: BlockSet,
        evict: BlockSet,
    },
    Transfer {
        ticket: u64,
        direction: Direction,
        kv_layer: usize,
        block: BlockId,
        bytes: u64,
        enqueue_ordinal: u64,
        complete_ordinal: u64,
    },
    Revive {
        block: BlockId,
        layers: Vec<usize>,
        rows: usize,
    },
    Layer {
        rows_in: usize,
        rows_out: usize,
        kv_rows: usize,
        attn_keys: usize,
    },
    Footprint {
        fast_prompt_bytes: u64,
        per_layer: Vec<u64>,
        response_bytes: u64,
        rep_bytes: u64,
        checkpoints: usize,
    },
    Probe {
        prune_token: usize,
        prune_layer: usize,
        max_abs: f64,
        cosine_divergence: f64,
    },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Select { .. } => "select",
            Payload::Swap { .. } => "swap",
            Payload::Transfer { .. } => "transfer",
            Payload::Revive { .. } => "revive",
            Payload::Layer { .. } => "layer",
            Payload::Footprint { .. } => "footprint",
            Payload::Probe { .. } => "probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub step: u64,
    pub layer: usize,
    pub stage: Option<usize>,
    #[serde(flatten)]
    pub payload: Payload,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records serialise")
    }
}

pub fn parse_line(line: &str) -> Result<TraceRecord, serde_json::Error> {
    serde_json::from_str(line)
}

pub fn parse_ndjson(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l).map_err(|source| TraceError::Parse { line: i + 1, source }))
        .collect()
}

/// In-memory log with an optional line sink.
pub struct TraceLog {
    records: Vec<TraceRecord>,
    next_seq: u64,
    flushed: usize,
    sink: Option<Box<dyn Write + Send>>,
}

impl Default for TraceLog {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for TraceLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TraceLog")
            .field("records", &self.records.len())
            .field("flushed", &self.flushed)
            .finish()
    }
}

impl TraceLog {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            next_seq: 0,
            flushed: 0,
            sink: None,
        }
    }

    pub fn with_sink(sink: Box<dyn Write + Send>) -> Self {
        Self {
            sink: Some(sink),
            ..Self::new()
        }
    }

    pub fn set_sink(&mut self, sink: Box<dyn Write + Send>) {
        self.sink = Some(sink);
    }

    pub fn emit(&mut self, step: u64, layer: usize, stage: Option<usize>, payload: Payload) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.records.push(TraceRecord {
            seq,
            step,
            layer,
            stage,
            payload,
        });
        seq
    }

    /// Writes every record not yet flushed. On error nothing is marked flushed.
    pub fn flush(&mut self) -> io::Result<usize> {
        let Some(sink) = self.sink.as_mut() else {
            return Ok(0);
        };
        let pending = &self.records[self.flushed..];
        let mut buf = String::new();
        for r in pending {
            buf.push_str(&r.to_line());
            buf.push('\n');
        }
        sink.write_all(buf.as_bytes())?;
        sink.flush()?;
        let n = pending.len();
        self.flushed += n;
        Ok(n)
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }
}

/// Checks `(step, layer, seq)` strictly increases and every set is sorted
/// (guaranteed by `BTreeSet`, re-checked on parsed input).
pub fn check_order(records: &[TraceRecord]) -> Result<(), TraceError> {
    for w in records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if (a.step, a.layer, a.seq) >= (b.step, b.layer, b.seq) {
            return Err(TraceError::Inconsistent {
                seq: b.seq,
                msg: format!(
                    "out of order after ({}, {}, {})",
                    a.step, a.layer, a.seq
                ),
            });
        }
    }
    Ok(())
}

/// Re-derives every decode swap record from the select record before it.
/// Prefill installs are checked against their own rule: the candidate becomes
/// active and everything else scored is offloaded. Returns the number of
/// swap records checked.
pub fn replay_swaps(records: &[TraceRecord]) -> Result<usize, TraceError> {
    let mut checked = 0;
    let mut last_select: Option<&TraceRecord> = None;
    for r in records {
        match &r.payload {
            Payload::Select { .. } => last_select = Some(r),
            Payload::Swap {
                phase,
                overlap,
                triggered,
                new_active,
                load,
                offload,
                evict,
            } => {
                let bad = |msg: String| TraceError::Inconsistent { seq: r.seq, msg };
                let sel = last_select
                    .filter(|s| s.step == r.step && s.stage == r.stage)
                    .ok_or_else(|| bad("swap without a matching select".into()))?;
                let Payload::Select {
                    scores,
                    candidate,
                    prev_active,
                    b_memory,
                    gamma,
                    ..
                } = &sel.payload
                else {
                    unreachable!()
                };
                match (phase, prev_active) {
                    (Phase::Prefill, None) => {
                        let dropped: BlockSet = scores
                            .iter()
                            .map(|(b, _)| *b)
                            .filter(|b| !candidate.contains(b))
                            .collect();
                        if new_active != candidate
                            || offload != &dropped
                            || !load.is_empty()
                            || !evict.is_empty()
                            || !*triggered
                        {
                            return Err(bad("prefill install does not match its select".into()));
                        }
                    }
                    (Phase::Decode, Some(prev)) => {
                        let policy = SwapPolicy::new(*gamma).map_err(|e| bad(e.to_string()))?;
                        let plan = plan_swap(r.stage.unwrap_or(0), candidate, prev, b_memory, &policy)
                            .map_err(|e| bad(e.to_string()))?;
                        if plan.triggered != *triggered
                            || Some(plan.overlap) != *overlap
                            || &plan.new_active != new_active
                            || &plan.load != load
                            || &plan.offload != offload
                            || &plan.evict != evict
                        {
                            return Err(bad(format!("replayed plan differs: {plan:?}")));
                        }
                    }
                    _ => return Err(bad("phase and prev_active disagree".into())),
                }
                checked += 1;
            }
            _ => {}
        }
    }
    Ok(checked)
}

/// Every transfer record must follow exactly one swap record of the same step
/// and stage, and that record must name the moved block.
pub fn check_transfer_provenance(records: &[TraceRecord]) -> Result<(), TraceError> {
    let mut swaps: BTreeMap<(u64, Option<usize>), Vec<&TraceRecord>> = BTreeMap::new();
    for r in records {
        match &r.payload {
            Payload::Swap { .. } => swaps.entry((r.step, r.stage)).or_default().push(r),
            Payload::Transfer {
                block, direction, ..
            } => {
                let bad = |msg: String| TraceError::Inconsistent { seq: r.seq, msg };
                let found = swaps.get(&(r.step, r.stage)).map_or(&[][..], Vec::as_slice);
                if found.len() != 1 {
                    return Err(bad(format!("{} preceding swap records", found.len())));
                }
                let Payload::Swap {
                    load,
                    offload,
                    evict,
                    ..
                } = &found[0].payload
                else {
                    unreachable!()
                };
                let named = match direction {
                    Direction::Load => load.contains(block),
                    // A block leaving the set may have some layers already
                    // backed by host copies; those entries are evicted.
                    Direction::Offload | Direction::Evict => {
                        offload.contains(block) || evict.contains(block)
                    }
                };
                if !named {
                    return Err(bad(format!("{direction:?} of block {block} not named by its swap")));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Sum of transfer-record bytes per direction.
pub fn transfer_bytes(records: &[TraceRecord]) -> BTreeMap<Direction, u64> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Payload::Transfer {
            direction, bytes, ..
        } = &r.payload
        {
            *out.entry(*direction).or_insert(0) += bytes;
        }
    }
    out
}

/// Blocks named by transfer records, per `(kv_layer, block)`.
pub fn transferred_entries(records: &[TraceRecord]) -> BTreeSet<(usize, BlockId)> {
    records
        .iter()
        .filter_map(|r| match &r.payload {
            Payload::Transfer {
                kv_layer, block, ..
            } => Some((*kv_layer, *block)),
            _ => None,
        })
        .collect()
}
