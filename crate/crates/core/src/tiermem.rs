//! Two-tier KV residency.
//!
//! The fast tier stands in for device memory and the slow tier for host
//! memory. Entries are keyed by `(layer, block)` and hold immutable K/V rows
//! behind an `Arc`, so a reader holding an entry never observes a partial
//! update. `B_Memory` is the key set of the slow tier.
//!
//! Transfers run on a dedicated agent thread. [`TierStore::submit_transfers`]
//! validates a batch, queues it and returns a [`TransferTicket`];
//! [`TierStore::await_ticket`] is the only synchronisation point. Loads copy
//! slow to fast and keep the slow copy. Offloads copy fast to slow and drop the
//! fast entry. Evictions drop a fast entry whose slow copy already exists and
//! move no bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockindex::BlockId;
use crate::kernels::Matrix;
use crate::model::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KvKey {
    pub layer: usize,
    pub block: BlockId,
}

impl KvKey {
    pub fn new(layer: usize, block: BlockId) -> Self {
        Self { layer, block }
    }
}

impl std::fmt::Display for KvKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(layer {}, block {})", self.layer, self.block)
    }
}

/// K/V rows of one block at one layer, heads concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlockEntry {
    pub layer: usize,
    pub block: BlockId,
    pub positions: Vec<usize>,
    pub keys: Matrix,
    pub values: Matrix,
}

impl KvBlockEntry {
    pub fn key(&self) -> KvKey {
        KvKey::new(self.layer, self.block)
    }

    pub fn tokens(&self) -> usize {
        self.positions.len()
    }

    /// `tokens * kv_heads * head_dim * 2 * kv_bytes_per_elem`.
    pub fn byte_size(&self, kv_bytes_per_elem: usize) -> u64 {
        (self.tokens() * self.keys.cols() * 2 * kv_bytes_per_elem) as u64
    }

    /// FNV-1a over positions and the bit patterns of every K/V value.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 * self.positions.len() + 8 * self.keys.data().len());
        for p in &self.positions {
            bytes.extend_from_slice(&(*p as u64).to_le_bytes());
        }
        for v in self.keys.data().iter().chain(self.values.data()) {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residency {
    Fast,
    Slow,
    Both,
    Unmaterialized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Load,
    Offload,
    Evict,
}

/// One completed movement, as recorded in the transfer ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub ticket: u64,
    pub step: u64,
    pub stage: usize,
    pub direction: Direction,
    pub key: KvKey,
    pub bytes: u64,
    pub enqueue_ordinal: u64,
    pub complete_ordinal: u64,
}

/// Per-entry movements requested for one stage at one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferBatch {
    pub step: u64,
    pub stage: usize,
    pub loads: Vec<KvKey>,
    pub offloads: Vec<KvKey>,
    pub evicts: Vec<KvKey>,
}

impl TransferBatch {
    pub fn is_empty(&self) -> bool {
        self.loads.is_empty() && self.offloads.is_empty() && self.evicts.is_empty()
    }

    fn movements(&self) -> impl Iterator<Item = (Direction, KvKey)> + '_ {
        self.offloads
            .iter()
            .map(|k| (Direction::Offload, *k))
            .chain(self.evicts.iter().map(|k| (Direction::Evict, *k)))
            .chain(self.loads.iter().map(|k| (Direction::Load, *k)))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TierError {
    #[error("fast tier capacity exceeded at layer {layer}: {needed} bytes needed, cap {cap}")]
    Capacity { layer: usize, needed: u64, cap: u64 },
    #[error("conflicting content for {0}")]
    Conflict(KvKey),
    #[error("transfer plan rejected: {0}")]
    Precondition(String),
    #[error("no boundary checkpoint for block {block} at layer {layer}")]
    MissingCheckpoint { layer: usize, block: BlockId },
    #[error("transfer ticket {ticket} failed: {msg}")]
    TransferFailed { ticket: u64, msg: String },
    #[error("transfer agent is gone")]
    AgentGone,
}

pub type Result<T> = std::result::Result<T, TierError>;

#[derive(Debug, Default)]
struct Tiers {
    fast: BTreeMap<KvKey, Arc<KvBlockEntry>>,
    slow: BTreeMap<KvKey, Arc<KvBlockEntry>>,
    fast_bytes: u64,
    ledger: Vec<TransferEvent>,
    next_complete: u64,
    fail_at: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct Limits {
    kv_bytes_per_elem: usize,
    fast_cap: Option<u64>,
}

struct Job {
    ticket: u64,
    batch: TransferBatch,
    first_enqueue: u64,
    done: Sender<Result<Vec<TransferEvent>>>,
}

/// Handle for one queued batch.
#[derive(Debug)]
pub struct TransferTicket {
    id: u64,
    stage: usize,
    rx: Option<Receiver<Result<Vec<TransferEvent>>>>,
    outcome: Option<Result<Vec<TransferEvent>>>,
}

impl TransferTicket {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn is_complete(&self) -> bool {
        self.outcome.is_some()
    }
}

/// Options for a [`TierStore`].
#[derive(Debug, Clone, Default)]
pub struct TierOptions {
    pub kv_bytes_per_elem: usize,
    pub fast_cap: Option<u64>,
    /// Sleep injected per slow-tier byte moved, in nanoseconds.
    pub slow_ns_per_byte: u64,
}

pub struct TierStore {
    shared: Arc<Mutex<Tiers>>,
    limits: Limits,
    response_bytes: u64,
    checkpoints: BTreeMap<(usize, BlockId), Matrix>,
    tx: Option<Sender<Job>>,
    agent: Option<JoinHandle<()>>,
    next_ticket: u64,
    next_enqueue: Arc<AtomicU64>,
}

impl std::fmt::Debug for TierStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = self.lock();
        f.debug_struct("TierStore")
            .field("fast_entries", &t.fast.len())
            .field("slow_entries", &t.slow.len())
            .field("fast_bytes", &t.fast_bytes)
            .finish()
    }
}

fn lock_tiers(m: &Mutex<Tiers>) -> MutexGuard<'_, Tiers> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

impl TierStore {
    pub fn new(opts: TierOptions) -> Self {
        let shared = Arc::new(Mutex::new(Tiers::default()));
        let limits = Limits {
            kv_bytes_per_elem: opts.kv_bytes_per_elem.max(1),
            fast_cap: opts.fast_cap,
        };
        let (tx, rx) = mpsc::channel::<Job>();
        let agent_shared = Arc::clone(&shared);
        let latency = opts.slow_ns_per_byte;
        let agent = std::thread::Builder::new()
            .name("kv-transfer".into())
            .spawn(move || {
                for job in rx {
                    let res = run_job(&agent_shared, limits, latency, &job);
                    let _ = job.done.send(res);
                }
            })
            .expect("spawn transfer agent");
        Self {
            shared,
            limits,
            response_bytes: 0,
            checkpoints: BTreeMap::new(),
            tx: Some(tx),
            agent: Some(agent),
            next_ticket: 0,
            next_enqueue: Arc::new(AtomicU64::new(0)),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Tiers> {
        lock_tiers(&self.shared)
    }

    pub fn kv_bytes_per_elem(&self) -> usize {
        self.limits.kv_bytes_per_elem
    }

    pub fn put_fast(&self, entry: KvBlockEntry) -> Result<()> {
        let key = entry.key();
        let size = entry.byte_size(self.limits.kv_bytes_per_elem);
        let mut t = self.lock();
        if let Some(existing) = t.fast.get(&key) {
            return if **existing == entry {
                Ok(())
            } else {
                Err(TierError::Conflict(key))
            };
        }
        if let Some(cap) = self.limits.fast_cap {
            if t.fast_bytes + size > cap {
                return Err(TierError::Capacity {
                    layer: key.layer,
                    needed: t.fast_bytes + size,
                    cap,
                });
            }
        }
        t.fast_bytes += size;
        t.fast.insert(key, Arc::new(entry));
        Ok(())
    }

    pub fn put_slow(&self, entry: KvBlockEntry) -> Result<()> {
        let key = entry.key();
        let mut t = self.lock();
        if let Some(existing) = t.slow.get(&key) {
            return if **existing == entry {
                Ok(())
            } else {
                Err(TierError::Conflict(key))
            };
        }
        t.slow.insert(key, Arc::new(entry));
        Ok(())
    }

    pub fn get_fast(&self, key: KvKey) -> Option<Arc<KvBlockEntry>> {
        self.lock().fast.get(&key).cloned()
    }

    pub fn get_slow(&self, key: KvKey) -> Option<Arc<KvBlockEntry>> {
        self.lock().slow.get(&key).cloned()
    }

    pub fn residency(&self, key: KvKey) -> Residency {
        let t = self.lock();
        match (t.fast.contains_key(&key), t.slow.contains_key(&key)) {
            (true, true) => Residency::Both,
            (true, false) => Residency::Fast,
            (false, true) => Residency::Slow,
            (false, false) => Residency::Unmaterialized,
        }
    }

    pub fn in_memory(&self, key: KvKey) -> bool {
        self.lock().slow.contains_key(&key)
    }

    /// `B_Memory`: every key with a slow-tier copy.
    pub fn b_memory(&self) -> BTreeSet<KvKey> {
        self.lock().slow.keys().copied().collect()
    }

    pub fn fast_keys(&self) -> BTreeSet<KvKey> {
        self.lock().fast.keys().copied().collect()
    }

    pub fn fast_blocks_at(&self, layer: usize) -> BTreeSet<BlockId> {
        self.lock()
            .fast
            .range(KvKey::new(layer, BlockId(0))..KvKey::new(layer + 1, BlockId(0)))
            .map(|(k, _)| k.block)
            .collect()
    }

    /// Prompt KV bytes in the fast tier.
    pub fn fast_bytes(&self) -> u64 {
        self.lock().fast_bytes
    }

    /// Sum of `byte_size` over fast entries, recomputed from the map.
    pub fn recount_fast_bytes(&self) -> u64 {
        let per = self.limits.kv_bytes_per_elem;
        self.lock().fast.values().map(|e| e.byte_size(per)).sum()
    }

    pub fn fast_bytes_by_layer(&self) -> BTreeMap<usize, u64> {
        let per = self.limits.kv_bytes_per_elem;
        let mut out = BTreeMap::new();
        for (k, e) in &self.lock().fast {
            *out.entry(k.layer).or_insert(0) += e.byte_size(per);
        }
        out
    }

    pub fn add_response_bytes(&mut self, bytes: u64) {
        self.response_bytes += bytes;
    }

    pub fn response_bytes(&self) -> u64 {
        self.response_bytes
    }

    pub fn ledger(&self) -> Vec<TransferEvent> {
        self.lock().ledger.clone()
    }

    pub fn ledger_bytes(&self, direction: Direction) -> u64 {
        self.lock()
            .ledger
            .iter()
            .filter(|e| e.direction == direction)
            .map(|e| e.bytes)
            .sum()
    }

    /// Makes the movement with this completion ordinal fail once.
    pub fn inject_failure_at(&self, complete_ordinal: u64) {
        self.lock().fail_at = Some(complete_ordinal);
    }

    /// Checks a batch against the current residency, then queues it.
    pub fn submit_transfers(&mut self, batch: TransferBatch) -> Result<TransferTicket> {
        {
            let t = self.lock();
            let mut seen = BTreeSet::new();
            for (dir, key) in batch.movements() {
                if !seen.insert(key) {
                    return Err(TierError::Precondition(format!("{key} listed twice")));
                }
                let (fast, slow) = (t.fast.contains_key(&key), t.slow.contains_key(&key));
                let ok = match dir {
                    Direction::Load => slow && !fast,
                    Direction::Offload => fast && !slow,
                    Direction::Evict => fast && slow,
                };
                if !ok {
                    return Err(TierError::Precondition(format!(
                        "{dir:?} of {key} with fast={fast} slow={slow}"
                    )));
                }
            }
        }
        let id = self.next_ticket;
        self.next_ticket += 1;
        let n = batch.movements().count() as u64;
        let first_enqueue = self.next_enqueue.fetch_add(n, Ordering::SeqCst);
        let (done, rx) = mpsc::channel();
        let stage = batch.stage;
        self.tx
            .as_ref()
            .ok_or(TierError::AgentGone)?
            .send(Job {
                ticket: id,
                batch,
                first_enqueue,
                done,
            })
            .map_err(|_| TierError::AgentGone)?;
        Ok(TransferTicket {
            id,
            stage,
            rx: Some(rx),
            outcome: None,
        })
    }

    /// Blocks until the ticket's batch is applied. Awaiting again returns the
    /// cached outcome.
    pub fn await_ticket<'t>(&self, ticket: &'t mut TransferTicket) -> Result<&'t [TransferEvent]> {
        if ticket.outcome.is_none() {
            let rx = ticket.rx.take().ok_or(TierError::AgentGone)?;
            ticket.outcome = Some(rx.recv().unwrap_or(Err(TierError::AgentGone)));
        }
        match ticket.outcome.as_ref().expect("outcome set above") {
            Ok(events) => Ok(events),
            Err(e) => Err(e.clone()),
        }
    }

    /// Stores the hidden rows of `block` at the boundary of pruning layer
    /// `layer`. Checkpoints are written once.
    pub fn checkpoint_boundary(&mut self, layer: usize, block: BlockId, rows: Matrix) -> Result<()> {
        match self.checkpoints.get(&(layer, block)) {
            Some(existing) if *existing == rows => Ok(()),
            Some(_) => Err(TierError::Conflict(KvKey::new(layer, block))),
            None => {
                self.checkpoints.insert((layer, block), rows);
                Ok(())
            }
        }
    }

    pub fn fetch_checkpoint(&self, layer: usize, block: BlockId) -> Result<&Matrix> {
        self.checkpoints
            .get(&(layer, block))
            .ok_or(TierError::MissingCheckpoint { layer, block })
    }

    pub fn checkpoint_count(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn checkpoint_blocks(&self, layer: usize) -> BTreeSet<BlockId> {
        self.checkpoints
            .keys()
            .filter(|(l, _)| *l == layer)
            .map(|(_, b)| *b)
            .collect()
    }
}

impl Drop for TierStore {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.agent.take() {
            let _ = h.join();
        }
    }
}

fn run_job(
    shared: &Mutex<Tiers>,
    limits: Limits,
    ns_per_byte: u64,
    job: &Job,
) -> Result<Vec<TransferEvent>> {
    let mut events = Vec::new();
    for (i, (dir, key)) in job.batch.movements().enumerate() {
        let fail = |msg: String| TierError::TransferFailed {
            ticket: job.ticket,
            msg,
        };
        // Snapshot the source under the lock, copy outside it.
        let source = {
            let t = lock_tiers(shared);
            if t.fail_at == Some(t.next_complete) {
                drop(t);
                lock_tiers(shared).fail_at = None;
                return Err(fail(format!("injected failure before moving {key}")));
            }
            match dir {
                Direction::Load => t.slow.get(&key).cloned(),
                Direction::Offload | Direction::Evict => t.fast.get(&key).cloned(),
            }
        }
        .ok_or_else(|| fail(format!("{dir:?} source for {key} vanished")))?;
        let size = source.byte_size(limits.kv_bytes_per_elem);
        let moved = match dir {
            Direction::Evict => None,
            _ => {
                if ns_per_byte > 0 {
                    std::thread::sleep(Duration::from_nanos(size.saturating_mul(ns_per_byte)));
                }
                Some(Arc::new(KvBlockEntry::clone(&source)))
            }
        };
        let mut t = lock_tiers(shared);
        match dir {
            Direction::Load => {
                if let Some(cap) = limits.fast_cap {
                    if t.fast_bytes + size > cap {
                        return Err(TierError::Capacity {
                            layer: key.layer,
                            needed: t.fast_bytes + size,
                            cap,
                        });
                    }
                }
                t.fast.insert(key, moved.expect("load copies"));
                t.fast_bytes += size;
            }
            Direction::Offload => {
                t.slow.insert(key, moved.expect("offload copies"));
                t.fast.remove(&key);
                t.fast_bytes -= size;
            }
            Direction::Evict => {
                if !t.slow.contains_key(&key) {
                    return Err(fail(format!("evict of {key} without a slow copy")));
                }
                t.fast.remove(&key);
                t.fast_bytes -= size;
            }
        }
        let complete = t.next_complete;
        t.next_complete += 1;
        let ev = TransferEvent {
            ticket: job.ticket,
            step: job.batch.step,
            stage: job.batch.stage,
            direction: dir,
            key,
            bytes: if dir == Direction::Evict { 0 } else { size },
            enqueue_ordinal: job.first_enqueue + i as u64,
            complete_ordinal: complete,
        };
        t.ledger.push(ev.clone());
        events.push(ev);
    }
    Ok(events)
}
