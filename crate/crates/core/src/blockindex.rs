//! Block partitioning and block importance scoring.
//!
//! A prompt is cut into fixed-size blocks, each block into contiguous token
//! units. A unit is represented by the mean of its key rows; a block's score
//! is the best unit's head-averaged dot product with the local query `q_l`:
//!
//! ```text
//! r(q_l, B_j) = max_m (1/H) * sum_h  q_l^h . k_rep^h(j, m)
//! ```
//!
//! Selection keeps the sink (block 0) and fills the remaining budget with the
//! highest scores, breaking ties toward the lower block id.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("no key rows for block {0}")]
    MissingKeys(BlockId),
    #[error("no representative keys for block {0}")]
    MissingReps(BlockId),
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

pub type Result<T> = std::result::Result<T, IndexError>;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct BlockId(pub u32);

impl BlockId {
    pub const SINK: BlockId = BlockId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type BlockSet = BTreeSet<BlockId>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub id: BlockId,
    pub tokens: Range<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockTable {
    pub block_size: usize,
    pub prompt_len: usize,
    pub blocks: Vec<Block>,
}

impl BlockTable {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, id: BlockId) -> Option<&Block> {
        self.blocks.get(id.index())
    }

    pub fn ids(&self) -> BlockSet {
        self.blocks.iter().map(|b| b.id).collect()
    }

    pub fn last(&self) -> BlockId {
        self.blocks.last().map_or(BlockId::SINK, |b| b.id)
    }

    pub fn block_of(&self, position: usize) -> Option<BlockId> {
        (position < self.prompt_len).then(|| BlockId((position / self.block_size) as u32))
    }

    pub fn tokens_in(&self, set: &BlockSet) -> usize {
        set.iter().filter_map(|b| self.block(*b)).map(Block::len).sum()
    }
}

pub fn partition_blocks(prompt_len: usize, block_size: usize) -> Result<BlockTable> {
    if prompt_len == 0 {
        return Err(IndexError::Invalid("prompt is empty".into()));
    }
    if block_size == 0 {
        return Err(IndexError::Invalid("block_size must be >= 1".into()));
    }
    let blocks = (0..prompt_len.div_ceil(block_size))
        .map(|j| Block {
            id: BlockId(j as u32),
            tokens: j * block_size..((j + 1) * block_size).min(prompt_len),
        })
        .collect();
    Ok(BlockTable {
        block_size,
        prompt_len,
        blocks,
    })
}

/// Unit-mean key vectors for the blocks of one layer. Each vector holds all
/// heads concatenated (`H * head_dim` values).
#[derive(Debug, Clone, PartialEq)]
pub struct RepKeys {
    pub layer: usize,
    pub unit_size: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    reps: BTreeMap<BlockId, Vec<Vec<f32>>>,
}

impl RepKeys {
    pub fn new(layer: usize, unit_size: usize, n_heads: usize, head_dim: usize) -> Self {
        Self {
            layer,
            unit_size,
            n_heads,
            head_dim,
            reps: BTreeMap::new(),
        }
    }

    pub fn units(&self, block: BlockId) -> Option<&[Vec<f32>]> {
        self.reps.get(&block).map(Vec::as_slice)
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.reps.keys().copied()
    }

    pub fn vector_count(&self) -> usize {
        self.reps.values().map(Vec::len).sum()
    }

    /// Adds the unit means of one block. `keys` holds exactly the block's rows.
    pub fn insert_block(&mut self, block: &Block, keys: &Matrix) -> Result<()> {
        if self.unit_size == 0 {
            return Err(IndexError::Invalid("unit_size must be >= 1".into()));
        }
        let width = self.n_heads * self.head_dim;
        if keys.cols() != width {
            return Err(IndexError::Invalid(format!(
                "key width {} for {} heads of {}",
                keys.cols(),
                self.n_heads,
                self.head_dim
            )));
        }
        if keys.rows() != block.len() {
            return Err(IndexError::MissingKeys(block.id));
        }
        let mut units = Vec::with_capacity(block.len().div_ceil(self.unit_size));
        let mut start = 0;
        while start < keys.rows() {
            let end = (start + self.unit_size).min(keys.rows());
            let mut acc = vec![0.0f64; width];
            for r in start..end {
                for (a, &k) in acc.iter_mut().zip(keys.row(r)) {
                    *a += k as f64;
                }
            }
            let n = (end - start) as f64;
            units.push(acc.into_iter().map(|a| (a / n) as f32).collect());
            start = end;
        }
        self.reps.insert(block.id, units);
        Ok(())
    }
}

/// Builds representative keys for `blocks`; `keys` maps each block to its rows.
pub fn build_rep_keys(
    layer: usize,
    table: &BlockTable,
    keys: &BTreeMap<BlockId, Matrix>,
    blocks: &BlockSet,
    unit_size: usize,
    n_heads: usize,
    head_dim: usize,
) -> Result<RepKeys> {
    let mut reps = RepKeys::new(layer, unit_size, n_heads, head_dim);
    for &id in blocks {
        let block = table
            .block(id)
            .ok_or_else(|| IndexError::Invalid(format!("block {id} outside the table")))?;
        let rows = keys.get(&id).ok_or(IndexError::MissingKeys(id))?;
        reps.insert_block(block, rows)?;
    }
    Ok(reps)
}

/// Ring of the last `w` per-head query vectors at one pruning layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalQueryWindow {
    capacity: usize,
    dim: usize,
    ring: VecDeque<Vec<f32>>,
}

impl LocalQueryWindow {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(IndexError::Invalid("query window must hold >= 1 query".into()));
        }
        Ok(Self {
            capacity,
            dim,
            ring: VecDeque::with_capacity(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn push(&mut self, query: &[f32]) -> Result<()> {
        if query.len() != self.dim {
            return Err(IndexError::Invalid(format!(
                "query of length {} in a window of dim {}",
                query.len(),
                self.dim
            )));
        }
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(query.to_vec());
        Ok(())
    }

    /// `q_l`: the element-wise mean of the stored queries, oldest first.
    pub fn mean(&self) -> Option<Vec<f32>> {
        if self.ring.is_empty() {
            return None;
        }
        let mut acc = vec![0.0f64; self.dim];
        for q in &self.ring {
            for (a, &v) in acc.iter_mut().zip(q) {
                *a += v as f64;
            }
        }
        let n = self.ring.len() as f64;
        Some(acc.into_iter().map(|a| (a / n) as f32).collect())
    }
}

/// Block scores keyed by block id.
pub type ScoreVector = BTreeMap<BlockId, f64>;

pub fn score_blocks(q_l: &[f32], reps: &RepKeys, eligible: &BlockSet) -> Result<ScoreVector> {
    let (h, d) = (reps.n_heads, reps.head_dim);
    if q_l.len() != h * d {
        return Err(IndexError::Invalid(format!(
            "query of length {} for {h} heads of {d}",
            q_l.len()
        )));
    }
    let mut out = ScoreVector::new();
    for &id in eligible {
        let units = reps.units(id).ok_or(IndexError::MissingReps(id))?;
        let mut best = f64::NEG_INFINITY;
        for unit in units {
            let mut sum = 0.0f64;
            for head in 0..h {
                let span = head * d..(head + 1) * d;
                let mut dot = 0.0f64;
                for (&a, &b) in q_l[span.clone()].iter().zip(&unit[span]) {
                    dot += a as f64 * b as f64;
                }
                sum += dot;
            }
            best = best.max(sum / h as f64);
        }
        out.insert(id, best);
    }
    Ok(out)
}

/// `{sink} ∪ top-(k_blk - 1)` of the remaining scored blocks.
pub fn select_candidates(scores: &ScoreVector, k_blk: usize) -> BlockSet {
    select_with_pins(scores, k_blk, &BlockSet::from([BlockId::SINK]))
}

/// Keeps every pinned block, then fills up to `k_blk` blocks with the best
/// unpinned scores (ties toward the lower id). Returns ascending ids.
pub fn select_with_pins(scores: &ScoreVector, k_blk: usize, pins: &BlockSet) -> BlockSet {
    let mut out: BlockSet = pins.clone();
    let mut rest: Vec<(BlockId, f64)> = scores
        .iter()
        .filter(|(id, _)| !pins.contains(id))
        .map(|(&id, &s)| (id, s))
        .collect();
    rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let room = k_blk.saturating_sub(out.len());
    out.extend(rest.into_iter().take(room).map(|(id, _)| id));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    /// Layer whose attention output drives this stage's selection.
    pub layer: usize,
    /// Retained prompt tokens from `layer` on.
    pub token_budget: usize,
}

/// Pruning layers with decreasing per-stage token budgets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneSchedule {
    pub stages: Vec<Stage>,
}

impl PruneSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Layers 10, 20, 30 retaining 8192, 4096, 2048 tokens.
    pub fn reference() -> Self {
        Self {
            stages: vec![
                Stage { layer: 10, token_budget: 8192 },
                Stage { layer: 20, token_budget: 4096 },
                Stage { layer: 30, token_budget: 2048 },
            ],
        }
    }

    /// Parses `layer:budget[,layer:budget...]`; an empty string or `none`
    /// yields the empty schedule. Budgets accept a `k` suffix (x1024).
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Self::empty());
        }
        let stages = s
            .split(',')
            .map(|part| {
                let (l, b) = part
                    .split_once(':')
                    .ok_or_else(|| IndexError::Schedule(format!("`{part}` is not layer:budget")))?;
                let layer = l
                    .trim()
                    .parse()
                    .map_err(|_| IndexError::Schedule(format!("bad layer `{l}`")))?;
                let b = b.trim();
                let token_budget = match b.strip_suffix(['k', 'K']) {
                    Some(n) => n.parse::<usize>().map(|n| n * 1024),
                    None => b.parse(),
                }
                .map_err(|_| IndexError::Schedule(format!("bad budget `{b}`")))?;
                Ok(Stage { layer, token_budget })
            })
            .collect::<Result<Vec<_>>>()?;
        let sched = Self { stages };
        sched.check_shape()?;
        Ok(sched)
    }

    fn check_shape(&self) -> Result<()> {
        for w in self.stages.windows(2) {
            if w[1].layer <= w[0].layer {
                return Err(IndexError::Schedule(
                    "pruning layers must be strictly increasing".into(),
                ));
            }
            if w[1].token_budget >= w[0].token_budget {
                return Err(IndexError::Schedule(
                    "token budgets must be strictly decreasing".into(),
                ));
            }
        }
        if self.stages.iter().any(|s| s.token_budget == 0) {
            return Err(IndexError::Schedule("token budget must be >= 1".into()));
        }
        Ok(())
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        self.check_shape()?;
        if let Some(s) = self.stages.iter().find(|s| s.layer >= n_layers) {
            return Err(IndexError::Schedule(format!(
                "pruning layer {} >= n_layers {n_layers}",
                s.layer
            )));
        }
        Ok(())
    }

    pub fn block_budget(&self, stage: usize, block_size: usize) -> usize {
        self.stages[stage].token_budget.div_ceil(block_size)
    }

    /// Index of the stage whose layer range `[layer_s, layer_{s+1})` holds `layer`.
    pub fn stage_of(&self, layer: usize) -> Option<usize> {
        self.stages.iter().rposition(|s| s.layer <= layer)
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }
}

impl fmt::Display for PruneSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.stages.is_empty() {
            return write!(f, "none");
        }
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}:{}", s.layer, s.token_budget))
            .collect();
        write!(f, "{}", parts.join(","))
    }
}
