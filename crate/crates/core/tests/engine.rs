mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use common::{max_abs_diff, toy_config, DenseRef, Lcg};
use tierprune::blockindex::{BlockId, BlockSet, PruneSchedule};
use tierprune::costmodel::{prompt_kv_bytes, MemSpec};
use tierprune::engine::{Engine, EngineConfig, EngineError, EngineMode, ScriptedChurn};
use tierprune::model::Model;
use tierprune::swap::SwapPolicy;
use tierprune::tiermem::{Direction, KvKey, TierError};
use tierprune::trace::{check_order, check_transfer_provenance, replay_swaps, Payload, Phase};

fn engine(cfg: &tierprune::model::ModelConfig, ecfg: EngineConfig) -> Engine {
    Engine::new(Arc::new(Model::seeded(cfg.clone()).unwrap()), ecfg).unwrap()
}

fn small(schedule: &str, block_size: usize) -> EngineConfig {
    EngineConfig {
        schedule: PruneSchedule::parse(schedule).unwrap(),
        block_size,
        unit_size: 2,
        ..Default::default()
    }
}

#[test]
fn empty_schedule_matches_dense_reference() {
    let mut rng = Lcg(17);
    for case in 0..3 {
        let cfg = toy_config(case, 3, 2, 8, 32, 64);
        let prompt = rng.tokens(40 + 30 * case as usize, 64);
        let mut e = engine(&cfg, small("", 8));
        let mut dense = DenseRef::new(&cfg);
        let got = e.prefill(&prompt).unwrap();
        assert!(max_abs_diff(&got, &dense.feed(&prompt)) <= 1e-5);
        for _ in 0..4 {
            let t = rng.below(64) as u32;
            let got = e.decode_step(t).unwrap();
            assert!(max_abs_diff(&got, &dense.push(t)) <= 1e-5);
        }
    }
}

#[test]
fn full_budget_schedule_matches_dense_reference() {
    let cfg = toy_config(4, 4, 2, 4, 16, 32);
    let prompt = Lcg(3).tokens(50, 32);
    let mut e = engine(&cfg, small("1:1024,3:512", 8));
    let mut dense = DenseRef::new(&cfg);
    let got = e.prefill(&prompt).unwrap();
    assert!(max_abs_diff(&got, &dense.feed(&prompt)) <= 1e-5);
    for t in [3, 9, 27] {
        let got = e.decode_step(t).unwrap();
        assert!(max_abs_diff(&got, &dense.push(t)) <= 1e-5);
    }
    assert_eq!(e.stats().decode_transfers(), 0);
}

#[test]
fn six_block_prompt_with_four_then_two_blocks() {
    let cfg = toy_config(8, 4, 2, 4, 16, 32);
    let ecfg = small("1:32,2:16", 8);
    let mut e = engine(&cfg, ecfg.clone());
    e.prefill(&Lcg(5).tokens(48, 32)).unwrap();
    let rows_into_last = e
        .trace()
        .records()
        .iter()
        .rev()
        .find_map(|r| match r.payload {
            Payload::Layer { rows_in, .. } if r.layer == 3 => Some(rows_in),
            _ => None,
        })
        .unwrap();
    assert_eq!(rows_into_last, 16);
    let spec = MemSpec {
        n_layers: 4,
        kv_heads: 2,
        head_dim: 4,
        kv_bytes_per_elem: 2,
        schedule: ecfg.schedule,
        prompt_len: 48,
        block_size: Some(8),
    };
    let want = prompt_kv_bytes(&spec);
    assert_eq!(e.fast_bytes_per_layer(), want.per_layer);
    assert_eq!(e.store().fast_bytes(), want.bytes);
}

#[test]
fn prefill_stage_sets_are_nested_and_hold_the_sink() {
    let cfg = toy_config(2, 5, 2, 4, 16, 32);
    let mut e = engine(&cfg, small("1:40,2:24,4:16", 8));
    e.prefill(&Lcg(9).tokens(80, 32)).unwrap();
    let stages = e.stages();
    for w in stages.windows(2) {
        assert!(w[1].active.is_subset(&w[0].active));
    }
    for s in &stages {
        assert!(s.active.contains(&BlockId::SINK));
        assert!(s.active.len() <= s.prefill_blocks);
    }
}

#[test]
fn identical_step_moves_nothing() {
    let cfg = toy_config(6, 3, 2, 4, 16, 32);
    let mut e = engine(&cfg, small("1:16", 4));
    e.prefill(&Lcg(1).tokens(40, 32)).unwrap();
    e.decode_step(5).unwrap();
    let before = e.store().ledger().len();
    let active = e.stages()[0].active.clone();
    // Repeating the identical token keeps the scores close; a step is
    // untriggered exactly when its overlap reaches gamma.
    e.decode_step(5).unwrap();
    let last_swap = e
        .trace()
        .records()
        .iter()
        .rev()
        .find_map(|r| match &r.payload {
            Payload::Swap { triggered, .. } => Some(*triggered),
            _ => None,
        })
        .unwrap();
    if !last_swap {
        assert_eq!(e.store().ledger().len(), before);
        assert_eq!(e.stages()[0].active, active);
    }
}

#[test]
fn untriggered_steps_read_nothing_from_slow_tier() {
    let cfg = toy_config(6, 4, 2, 4, 16, 32);
    let mut e = engine(&cfg, small("1:24,2:12", 4)).with_scorer(Box::new(ScriptedChurn { seed: 2 }));
    e.prefill(&Lcg(2).tokens(64, 32)).unwrap();
    for t in 0..30 {
        e.decode_step(t % 32).unwrap();
    }
    let records = e.trace().records();
    let mut triggered: BTreeSet<(u64, usize)> = BTreeSet::new();
    for r in records {
        if let Payload::Swap {
            triggered: true,
            phase: Phase::Decode,
            ..
        } = r.payload
        {
            triggered.insert((r.step, r.stage.unwrap()));
        }
    }
    for r in records {
        if let Payload::Transfer { direction, .. } = r.payload {
            if r.step > 1 {
                assert!(triggered.contains(&(r.step, r.stage.unwrap())));
                let _ = direction;
            }
        }
    }
}

/// Every step's transfers are exactly the entries the replayed plan names.
#[test]
fn churn_transfers_follow_the_plan_oracle() {
    let cfg = toy_config(12, 5, 2, 4, 16, 32);
    let mut e = engine(&cfg, small("1:24,3:12", 4)).with_scorer(Box::new(ScriptedChurn { seed: 77 }));
    e.prefill(&Lcg(8).tokens(60, 32)).unwrap();
    for t in 0..40 {
        e.decode_step(t % 32).unwrap();
        e.audit().unwrap();
    }
    let records = e.trace().records();
    check_order(records).unwrap();
    let swaps = replay_swaps(records).unwrap();
    assert_eq!(swaps, 2 + 40 * 2);
    check_transfer_provenance(records).unwrap();

    let mut plans: BTreeMap<(u64, usize), (BlockSet, BlockSet, BlockSet)> = BTreeMap::new();
    let mut moved: BTreeMap<(u64, usize), (BlockSet, BlockSet, BlockSet)> = BTreeMap::new();
    for r in records {
        let key = (r.step, r.stage.unwrap_or(usize::MAX));
        match &r.payload {
            Payload::Swap {
                phase: Phase::Decode,
                load,
                offload,
                evict,
                ..
            } => {
                plans.insert(key, (load.clone(), offload.clone(), evict.clone()));
            }
            Payload::Transfer {
                direction, block, ..
            } if r.step > 1 => {
                let m = moved.entry(key).or_default();
                match direction {
                    Direction::Load => m.0.insert(*block),
                    Direction::Offload => m.1.insert(*block),
                    Direction::Evict => m.2.insert(*block),
                };
            }
            _ => {}
        }
    }
    for (key, (load, offload, evict)) in &plans {
        let empty = Default::default();
        let (ml, mo, me) = moved.get(key).unwrap_or(&empty);
        // Load records cover exactly the loaded blocks that had host copies;
        // the rest were revived.
        assert!(ml.is_subset(load), "step {key:?}");
        let leaving: BlockSet = offload.union(evict).copied().collect();
        let released: BlockSet = mo.union(me).copied().collect();
        assert_eq!(released, leaving, "step {key:?}");
        // Blocks fully backed by host copies are only ever evicted.
        assert!(mo.is_disjoint(evict), "step {key:?}");
    }

    let mut offloads: BTreeMap<KvKey, usize> = BTreeMap::new();
    for ev in e.store().ledger() {
        if ev.direction == Direction::Offload {
            *offloads.entry(ev.key).or_default() += 1;
        }
    }
    assert!(offloads.values().all(|&n| n == 1), "an entry was offloaded twice");
}

#[test]
fn revived_entries_have_block_shape_and_positions() {
    let cfg = toy_config(21, 5, 2, 4, 16, 32);
    let mut e = engine(&cfg, small("1:16", 4)).with_scorer(Box::new(ScriptedChurn { seed: 5 }));
    e.prefill(&Lcg(4).tokens(48, 32)).unwrap();
    for t in 0..20 {
        e.decode_step(t).unwrap();
    }
    let table = e.table().unwrap().clone();
    let mut revived = 0;
    for r in e.trace().records() {
        if let Payload::Revive {
            block,
            layers,
            rows,
        } = &r.payload
        {
            revived += 1;
            assert_eq!(*rows, table.block(*block).unwrap().len());
            assert_eq!(layers, &vec![2, 3, 4]);
            for &l in layers {
                let key = KvKey::new(l, *block);
                let entry = e
                    .store()
                    .get_fast(key)
                    .or_else(|| e.store().get_slow(key))
                    .unwrap();
                assert_eq!(entry.positions, table.block(*block).unwrap().tokens.clone().collect::<Vec<_>>());
                assert_eq!(entry.keys.rows(), *rows);
            }
        }
    }
    assert!(revived > 0);
    // At most once per (stage, block).
    let mut seen = BTreeSet::new();
    for r in e.trace().records() {
        if let Payload::Revive { block, .. } = r.payload {
            assert!(seen.insert((r.stage, block)));
        }
    }
}

/// Strict candidates are drawn from the prefill active set, so every
/// candidate is covered by the previous active set and nothing moves.
#[test]
fn strict_mode_never_revives() {
    let cfg = toy_config(3, 4, 2, 4, 16, 32);
    let mut ecfg = small("1:24,2:12", 4);
    ecfg.mode = EngineMode::Strict;
    ecfg.decode_budget_override = Some(vec![3, 2]);
    let mut e = engine(&cfg, ecfg).with_scorer(Box::new(ScriptedChurn { seed: 31 }));
    e.prefill(&Lcg(6).tokens(64, 32)).unwrap();
    for t in 0..25 {
        e.decode_step(t).unwrap();
        e.audit().unwrap();
    }
    assert_eq!(e.stats().revivals, 0);
    assert_eq!(e.stats().swaps_triggered, 0);
    assert_eq!(e.stats().decode_transfers(), 0);
    assert_eq!(e.store().checkpoint_count(), 0);
}

#[test]
fn gamma_zero_freezes_active_sets() {
    let cfg = toy_config(3, 4, 2, 4, 16, 32);
    let mut ecfg = small("1:24,2:12", 4);
    ecfg.policy = SwapPolicy::new(0.0).unwrap();
    let mut e = engine(&cfg, ecfg).with_scorer(Box::new(ScriptedChurn { seed: 4 }));
    e.prefill(&Lcg(6).tokens(64, 32)).unwrap();
    let frozen = e.stages();
    let ledger = e.store().ledger().len();
    for t in 0..10 {
        e.decode_step(t).unwrap();
    }
    for (a, b) in frozen.iter().zip(e.stages()) {
        assert_eq!(a.active, b.active);
    }
    assert_eq!(e.store().ledger().len(), ledger);
}

#[test]
fn runs_are_trace_identical() {
    let run = || {
        let cfg = toy_config(10, 4, 2, 4, 16, 32);
        let mut e = engine(&cfg, small("1:24,2:12", 4)).with_scorer(Box::new(ScriptedChurn { seed: 8 }));
        e.prefill(&Lcg(11).tokens(64, 32)).unwrap();
        for t in 0..10 {
            e.decode_step(t).unwrap();
        }
        e.trace().to_ndjson()
    };
    assert_eq!(run(), run());
}

#[test]
fn failed_ticket_aborts_the_step() {
    let cfg = toy_config(3, 4, 2, 4, 16, 32);
    let mut e = engine(&cfg, small("1:24,2:12", 4)).with_scorer(Box::new(ScriptedChurn { seed: 19 }));
    e.prefill(&Lcg(6).tokens(64, 32)).unwrap();
    let next = e.store().ledger().len() as u64;
    e.store().inject_failure_at(next + 1);
    let mut failed = None;
    for t in 0..10 {
        if let Err(err) = e.decode_step(t) {
            failed = Some(err);
            break;
        }
    }
    assert!(matches!(
        failed,
        Some(EngineError::Tier(TierError::TransferFailed { .. }))
    ));
    assert_eq!(e.store().fast_bytes(), e.store().recount_fast_bytes());
    for key in e.store().fast_keys() {
        let entry = e.store().get_fast(key).unwrap();
        assert_eq!(entry.keys.rows(), entry.positions.len());
    }
    assert!(matches!(e.decode_step(0), Err(EngineError::State(_))));
}

#[test]
fn schedule_past_last_layer_is_a_config_error() {
    let cfg = toy_config(3, 4, 2, 4, 16, 32);
    let r = Engine::new(
        Arc::new(Model::seeded(cfg).unwrap()),
        small("4:16", 4),
    );
    assert!(matches!(r, Err(EngineError::Config(_))));
}

#[test]
fn decode_override_above_prefill_budget_is_rejected() {
    let cfg = toy_config(3, 4, 2, 4, 16, 32);
    let mut ecfg = small("1:16", 4);
    ecfg.decode_budget_override = Some(vec![5]);
    let mut e = engine(&cfg, ecfg);
    assert!(matches!(
        e.prefill(&Lcg(1).tokens(40, 32)),
        Err(EngineError::Config(_))
    ));
}
