//! C ABI over the tierprune engine, swap rule and cost model.
//!
//! Every fallible function returns a [`TpStatus`]. On failure a message is
//! kept per thread and can be read with [`tp_last_error`]. Engines are opaque
//! handles created by [`tp_engine_new`] and released by [`tp_engine_free`].
//! Output buffers are caller-owned; functions that write variable-length data
//! report the required length even when the buffer is too small.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use tierprune::blockindex::{BlockId, BlockSet, PruneSchedule, Stage};
use tierprune::config::{RunConfig, ScorerKind};
use tierprune::costmodel::{prompt_kv_bytes, simulate_timeline, LayerCost, MemSpec, Placement, TimelineParams};
use tierprune::engine::{Engine, ScriptedChurn};
use tierprune::model::Model;
use tierprune::swap::{plan_swap, SwapPolicy};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidConfig = 2,
    InvalidArgument = 3,
    Runtime = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque engine handle.
pub struct TpEngine {
    engine: Engine,
    vocab: usize,
}

/// Counters of an engine, as of the last completed call.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TpEngineStats {
    pub fast_bytes: u64,
    pub prefill_fast_bytes: u64,
    pub decode_steps: u64,
    pub swap_decisions: u64,
    pub swaps_triggered: u64,
    pub decode_loads: u64,
    pub decode_load_bytes: u64,
    pub decode_offloads: u64,
    pub decode_offload_bytes: u64,
    pub decode_evicts: u64,
    pub revivals: u64,
}

/// One pruning stage: from `layer` on, keep `token_budget` prompt tokens.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TpStage {
    pub layer: usize,
    pub token_budget: usize,
}

/// Inputs of the prompt-KV memory formula. `block_size` 0 means unrounded budgets.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TpMemSpec {
    pub n_layers: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub kv_bytes_per_elem: usize,
    pub prompt_len: usize,
    pub block_size: usize,
}

/// Sizes and flags of a swap decision; the sets go to caller buffers.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TpSwapPlan {
    pub triggered: bool,
    pub overlap: f64,
    pub n_active: usize,
    pub n_load: usize,
    pub n_offload: usize,
    pub n_evict: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TpLayerCost {
    pub t_qkv: u64,
    pub t_attn: u64,
    pub t_ffn: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpPlacement {
    Overlapped = 0,
    Serialized = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TpTimeline {
    pub makespan: u64,
    pub stall_total: u64,
    pub compute_sum: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: TpStatus, msg: impl Into<String>) -> TpStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> TpStatus) -> TpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(TpStatus::Panic, msg)
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

unsafe fn block_set(ptr: *const u32, len: usize) -> Option<BlockSet> {
    slice(ptr, len).map(|s| s.iter().copied().map(BlockId).collect())
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn tp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an engine from `key = value` lines using the CLI flag names
/// (`layers`, `heads`, `schedule`, `gamma`, ...). NULL or empty text keeps
/// every default.
///
/// # Safety
/// `config` must be NULL or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_new(config: *const c_char, out: *mut *mut TpEngine) -> TpStatus {
    guard(|| {
        if out.is_null() {
            return fail(TpStatus::NullArgument, "out is NULL");
        }
        *out = std::ptr::null_mut();
        let text = if config.is_null() {
            ""
        } else {
            match CStr::from_ptr(config).to_str() {
                Ok(t) => t,
                Err(e) => return fail(TpStatus::InvalidConfig, format!("config is not UTF-8: {e}")),
            }
        };
        let cfg = match RunConfig::from_text(text).and_then(|c| c.validate().map(|_| c)) {
            Ok(c) => c,
            Err(e) => return fail(TpStatus::InvalidConfig, e.to_string()),
        };
        let model = match Model::seeded(cfg.model_config()) {
            Ok(m) => Arc::new(m),
            Err(e) => return fail(TpStatus::InvalidConfig, e.to_string()),
        };
        let mut engine = match Engine::new(model, cfg.engine_config()) {
            Ok(e) => e,
            Err(e) => return fail(TpStatus::InvalidConfig, e.to_string()),
        };
        if cfg.scorer == ScorerKind::Churn {
            engine = engine.with_scorer(Box::new(ScriptedChurn { seed: cfg.seed }));
        }
        *out = Box::into_raw(Box::new(TpEngine {
            engine,
            vocab: cfg.vocab,
        }));
        TpStatus::Ok
    })
}

/// Releases an engine. NULL is ignored.
///
/// # Safety
/// `engine` must be NULL or a handle from [`tp_engine_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_free(engine: *mut TpEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Vocabulary size, i.e. the logits length every step produces. 0 for NULL.
///
/// # Safety
/// `engine` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_vocab_size(engine: *const TpEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.vocab)
}

unsafe fn write_logits(logits: &[f32], out: *mut f32, cap: usize) -> TpStatus {
    if cap < logits.len() {
        return fail(
            TpStatus::BufferTooSmall,
            format!("logits buffer holds {cap}, need {}", logits.len()),
        );
    }
    if out.is_null() {
        return fail(TpStatus::NullArgument, "logits is NULL");
    }
    std::ptr::copy_nonoverlapping(logits.as_ptr(), out, logits.len());
    TpStatus::Ok
}

/// Runs prefill over `tokens` and writes the next-token logits.
///
/// # Safety
/// `engine` must be a live handle, `tokens` must hold `n_tokens` ids and
/// `logits` must hold `logits_cap` floats.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_prefill(
    engine: *mut TpEngine,
    tokens: *const u32,
    n_tokens: usize,
    logits: *mut f32,
    logits_cap: usize,
) -> TpStatus {
    guard(|| {
        let Some(e) = engine.as_mut() else {
            return fail(TpStatus::NullArgument, "engine is NULL");
        };
        let Some(tokens) = slice(tokens, n_tokens) else {
            return fail(TpStatus::NullArgument, "tokens is NULL");
        };
        if logits_cap < e.vocab {
            return fail(TpStatus::BufferTooSmall, format!("logits buffer holds {logits_cap}, need {}", e.vocab));
        }
        match e.engine.prefill(tokens) {
            Ok(l) => write_logits(&l, logits, logits_cap),
            Err(err) => fail(TpStatus::Runtime, err.to_string()),
        }
    })
}

/// Appends one token and writes the logits for the following position.
///
/// # Safety
/// `engine` must be a live handle and `logits` must hold `logits_cap` floats.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_decode(
    engine: *mut TpEngine,
    token: u32,
    logits: *mut f32,
    logits_cap: usize,
) -> TpStatus {
    guard(|| {
        let Some(e) = engine.as_mut() else {
            return fail(TpStatus::NullArgument, "engine is NULL");
        };
        if logits_cap < e.vocab {
            return fail(TpStatus::BufferTooSmall, format!("logits buffer holds {logits_cap}, need {}", e.vocab));
        }
        match e.engine.decode_step(token) {
            Ok(l) => write_logits(&l, logits, logits_cap),
            Err(err) => fail(TpStatus::Runtime, err.to_string()),
        }
    })
}

/// # Safety
/// `engine` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_stats(engine: *const TpEngine, out: *mut TpEngineStats) -> TpStatus {
    guard(|| {
        let (Some(e), Some(out)) = (engine.as_ref(), out.as_mut()) else {
            return fail(TpStatus::NullArgument, "engine or out is NULL");
        };
        let s = e.engine.stats();
        *out = TpEngineStats {
            fast_bytes: e.engine.store().fast_bytes(),
            prefill_fast_bytes: s.prefill_fast_bytes,
            decode_steps: s.decode_steps,
            swap_decisions: s.swap_decisions,
            swaps_triggered: s.swaps_triggered,
            decode_loads: s.decode_loads,
            decode_load_bytes: s.decode_load_bytes,
            decode_offloads: s.decode_offloads,
            decode_offload_bytes: s.decode_offload_bytes,
            decode_evicts: s.decode_evicts,
            revivals: s.revivals,
        };
        TpStatus::Ok
    })
}

/// Copies the NDJSON trace into `buf` with a trailing NUL. `needed` receives
/// the full size including the NUL, also when the buffer is too small.
///
/// # Safety
/// `engine` must be a live handle, `buf` must hold `cap` bytes (or be NULL
/// with `cap` 0) and `needed` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_trace(
    engine: *const TpEngine,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> TpStatus {
    guard(|| {
        let Some(e) = engine.as_ref() else {
            return fail(TpStatus::NullArgument, "engine is NULL");
        };
        let text = e.engine.trace().to_ndjson();
        let n = text.len() + 1;
        if let Some(needed) = needed.as_mut() {
            *needed = n;
        }
        if cap < n {
            return fail(TpStatus::BufferTooSmall, format!("trace needs {n} bytes"));
        }
        if buf.is_null() {
            return fail(TpStatus::NullArgument, "buf is NULL");
        }
        std::ptr::copy_nonoverlapping(text.as_ptr().cast(), buf, text.len());
        *buf.add(text.len()) = 0;
        TpStatus::Ok
    })
}

/// Checks fast-tier contents against the engine's active sets.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_audit(engine: *const TpEngine) -> TpStatus {
    guard(|| match engine.as_ref() {
        None => fail(TpStatus::NullArgument, "engine is NULL"),
        Some(e) => match e.engine.audit() {
            Ok(()) => TpStatus::Ok,
            Err(m) => fail(TpStatus::Runtime, m),
        },
    })
}

/// Prompt K/V bytes kept under `stages` (ascending layers, descending budgets).
///
/// # Safety
/// `spec` and `out` must be valid; `stages` must hold `n_stages` entries.
#[no_mangle]
pub unsafe extern "C" fn tp_prompt_kv_bytes(
    spec: *const TpMemSpec,
    stages: *const TpStage,
    n_stages: usize,
    out: *mut u64,
) -> TpStatus {
    guard(|| {
        let (Some(spec), Some(out)) = (spec.as_ref(), out.as_mut()) else {
            return fail(TpStatus::NullArgument, "spec or out is NULL");
        };
        let Some(stages) = slice(stages, n_stages) else {
            return fail(TpStatus::NullArgument, "stages is NULL");
        };
        let schedule = PruneSchedule {
            stages: stages
                .iter()
                .map(|s| Stage {
                    layer: s.layer,
                    token_budget: s.token_budget,
                })
                .collect(),
        };
        if let Err(e) = schedule.validate(spec.n_layers) {
            return fail(TpStatus::InvalidArgument, e.to_string());
        }
        *out = prompt_kv_bytes(&MemSpec {
            n_layers: spec.n_layers,
            kv_heads: spec.kv_heads,
            head_dim: spec.head_dim,
            kv_bytes_per_elem: spec.kv_bytes_per_elem,
            schedule,
            prompt_len: spec.prompt_len,
            block_size: (spec.block_size > 0).then_some(spec.block_size),
        })
        .bytes;
        TpStatus::Ok
    })
}

unsafe fn write_set(set: &BlockSet, buf: *mut u32, cap: usize) {
    if !buf.is_null() && set.len() <= cap {
        for (i, b) in set.iter().enumerate() {
            *buf.add(i) = b.0;
        }
    }
}

/// Applies the swap rule. Each output buffer must hold `cap` ids; the sizes
/// in `out` are filled even when a buffer is too small. Any output buffer
/// may be NULL to query sizes only.
///
/// # Safety
/// Input arrays must hold their stated lengths; output buffers must be NULL
/// or hold `cap` ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_plan_swap(
    candidate: *const u32,
    n_candidate: usize,
    prev_active: *const u32,
    n_prev: usize,
    b_memory: *const u32,
    n_memory: usize,
    gamma: f64,
    out: *mut TpSwapPlan,
    active_buf: *mut u32,
    load_buf: *mut u32,
    offload_buf: *mut u32,
    evict_buf: *mut u32,
    cap: usize,
) -> TpStatus {
    guard(|| {
        let Some(out) = out.as_mut() else {
            return fail(TpStatus::NullArgument, "out is NULL");
        };
        let (Some(c), Some(p), Some(m)) = (
            block_set(candidate, n_candidate),
            block_set(prev_active, n_prev),
            block_set(b_memory, n_memory),
        ) else {
            return fail(TpStatus::NullArgument, "input set is NULL");
        };
        let policy = match SwapPolicy::new(gamma) {
            Ok(p) => p,
            Err(e) => return fail(TpStatus::InvalidArgument, e.to_string()),
        };
        let plan = match plan_swap(0, &c, &p, &m, &policy) {
            Ok(p) => p,
            Err(e) => return fail(TpStatus::InvalidArgument, e.to_string()),
        };
        *out = TpSwapPlan {
            triggered: plan.triggered,
            overlap: plan.overlap,
            n_active: plan.new_active.len(),
            n_load: plan.load.len(),
            n_offload: plan.offload.len(),
            n_evict: plan.evict.len(),
        };
        let sets = [
            (&plan.new_active, active_buf),
            (&plan.load, load_buf),
            (&plan.offload, offload_buf),
            (&plan.evict, evict_buf),
        ];
        if sets.iter().any(|(s, b)| !b.is_null() && s.len() > cap) {
            return fail(TpStatus::BufferTooSmall, format!("set buffers hold {cap} ids"));
        }
        for (s, b) in sets {
            write_set(s, b, cap);
        }
        TpStatus::Ok
    })
}

/// Simulates one decode pass. `fetch_blocks[l]` blocks are fetched after the
/// attention of layer `l`.
///
/// # Safety
/// `layers` and `fetch_blocks` must hold `n_layers` entries; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tp_simulate_timeline(
    layers: *const TpLayerCost,
    fetch_blocks: *const u64,
    n_layers: usize,
    t_fetch_blk: u64,
    placement: TpPlacement,
    out: *mut TpTimeline,
) -> TpStatus {
    guard(|| {
        let Some(out) = out.as_mut() else {
            return fail(TpStatus::NullArgument, "out is NULL");
        };
        let (Some(layers), Some(fetch)) = (slice(layers, n_layers), slice(fetch_blocks, n_layers)) else {
            return fail(TpStatus::NullArgument, "layers or fetch_blocks is NULL");
        };
        let params = TimelineParams {
            layers: layers
                .iter()
                .map(|c| LayerCost {
                    t_qkv: c.t_qkv,
                    t_attn: c.t_attn,
                    t_ffn: c.t_ffn,
                })
                .collect(),
            t_fetch_blk,
            fetch_blocks: fetch.to_vec(),
        };
        let placement = match placement {
            TpPlacement::Overlapped => Placement::Overlapped,
            TpPlacement::Serialized => Placement::Serialized,
        };
        let t = simulate_timeline(&params, placement);
        *out = TpTimeline {
            makespan: t.makespan,
            stall_total: t.stall_total,
            compute_sum: t.compute_sum,
        };
        TpStatus::Ok
    })
}
