use proptest::prelude::*;
use tierprune::blockindex::PruneSchedule;
use tierprune::costmodel::{
    memtable, prefill_flops, prompt_kv_bytes, render_memtable, simulate_timeline, FlopSpec,
    LayerCost, MemSpec, Op, Placement, TimelineParams,
};

#[test]
fn memory_table_cells() {
    let base = MemSpec::reference(0, PruneSchedule::reference());
    let rows = memtable(&base, &[8192, 16384, 24576, 28672, 32768]);
    let full = [1.00, 2.00, 3.00, 3.50, 4.00];
    let pruned = [0.80, 1.11, 1.42, 1.58, 1.73];
    let saving = [20.3, 44.5, 52.6, 54.9, 56.6];
    for (i, r) in rows.iter().enumerate() {
        assert!((r.full_gib - full[i]).abs() <= 0.01, "{r:?}");
        assert!((r.pruned_gib - pruned[i]).abs() <= 0.01, "{r:?}");
        assert!((r.saving_pct - saving[i]).abs() <= 0.1, "{r:?}");
    }
    // Ten full layers, ten at 8k, ten at 4k and two at 2k.
    assert_eq!(rows[4].pruned_bytes, (10 * 32768 + 10 * 8192 + 10 * 4096 + 2 * 2048) * 4096);
    assert_eq!(rows[4].full_bytes, 4 << 30);
    let text = render_memtable(&rows);
    assert!(text.contains("Pruned"));
    assert!(text.contains("1.73") && text.contains("56.6"));
}

#[test]
fn full_kv_is_linear_in_prompt_length() {
    let one = prompt_kv_bytes(&MemSpec::reference(1, PruneSchedule::empty())).bytes;
    for n in [7, 512, 4096, 32768] {
        assert_eq!(
            prompt_kv_bytes(&MemSpec::reference(n, PruneSchedule::empty())).bytes,
            n as u64 * one
        );
    }
}

#[test]
fn block_quantized_retention_counts_the_tail() {
    let spec = MemSpec {
        n_layers: 4,
        kv_heads: 1,
        head_dim: 1,
        kv_bytes_per_elem: 1,
        schedule: PruneSchedule::parse("1:32,3:16").unwrap(),
        prompt_len: 100,
        block_size: Some(16),
    };
    // Sink and one middle block plus the 4-token tail, then sink plus tail.
    assert_eq!(spec.retained(0), 100);
    assert_eq!(spec.retained(1), 16 + 4);
    assert_eq!(spec.retained(3), 16 + 4);
    let spec = MemSpec {
        schedule: PruneSchedule::parse("1:48").unwrap(),
        ..spec
    };
    assert_eq!(spec.retained(1), 2 * 16 + 4);
}

/// Frozen from an independent exact-integer summation over the same layer terms.
#[test]
fn prefill_flops_match_frozen_summation() {
    let r = prefill_flops(&FlopSpec {
        n_layers: 32,
        hidden: 4096,
        ffn_dim: 14336,
        schedule: PruneSchedule::reference(),
        prompt_len: 32768,
        block_size: None,
    });
    assert_eq!(r.dense.total(), 668_511_659_622_400);
    assert_eq!(r.pruned.total(), 275_603_437_649_920);
    assert!((r.ratio - 0.412_264_219_603_276_6).abs() / 0.412_264_219_603_276_6 <= 1e-9);
}

#[test]
fn flop_ratio_edge_cases() {
    let spec = FlopSpec {
        n_layers: 4,
        hidden: 64,
        ffn_dim: 256,
        schedule: PruneSchedule::empty(),
        prompt_len: 1000,
        block_size: None,
    };
    assert_eq!(prefill_flops(&spec).ratio, 1.0);
    let half = prefill_flops(&FlopSpec {
        schedule: PruneSchedule::parse("0:500").unwrap(),
        ..spec
    });
    assert_eq!(half.ffn_ratio, 0.5);
}

fn params(fetch_at: usize, fetch_blocks: u64) -> TimelineParams {
    let mut p = TimelineParams::uniform(
        4,
        LayerCost {
            t_qkv: 3,
            t_attn: 5,
            t_ffn: 7,
        },
        1,
    );
    p.fetch_blocks[fetch_at] = fetch_blocks;
    p
}

#[test]
fn hidden_fetch_adds_nothing_and_excess_stalls_exactly() {
    for f in 0..=10 {
        let t = simulate_timeline(&params(1, f), Placement::Overlapped);
        assert_eq!((t.stall_total, t.makespan), (0, 60));
    }
    for delta in 1..20 {
        let t = simulate_timeline(&params(1, 10 + delta), Placement::Overlapped);
        assert_eq!(t.stall_total, delta);
        assert_eq!(t.makespan, 60 + delta);
    }
    // After the last layer only the FFN is left to hide behind.
    let t = simulate_timeline(&params(3, 9), Placement::Overlapped);
    assert_eq!(t.stall_total, 2);
}

#[test]
fn serialized_fetch_runs_on_the_compute_track() {
    let t = simulate_timeline(&params(1, 4), Placement::Serialized);
    assert_eq!(t.makespan, 64);
    let stall = t.events.iter().find(|e| e.op == Op::Stall).unwrap();
    let attn = t
        .events
        .iter()
        .find(|e| e.op == Op::Attention && e.layer == 1)
        .unwrap();
    assert_eq!(stall.start, attn.end);
}

prop_compose! {
    fn timeline()(n in 1usize..6)
        (costs in prop::collection::vec((0u64..20, 0u64..20, 0u64..20), n),
         fetch in prop::collection::vec(0u64..6, n),
         blk in 0u64..5)
        -> TimelineParams {
        TimelineParams {
            layers: costs.into_iter().map(|(q, a, f)| LayerCost { t_qkv: q, t_attn: a, t_ffn: f }).collect(),
            t_fetch_blk: blk,
            fetch_blocks: fetch,
        }
    }
}

proptest! {
    #[test]
    fn makespan_is_monotone_in_every_cost(p in timeline(), which in 0usize..5, layer in 0usize..6, bump in 1u64..10) {
        let mut q = p.clone();
        let l = layer % q.layers.len();
        match which {
            0 => q.layers[l].t_qkv += bump,
            1 => q.layers[l].t_attn += bump,
            2 => q.layers[l].t_ffn += bump,
            3 => q.fetch_blocks[l] += bump,
            _ => q.t_fetch_blk += bump,
        }
        for placement in [Placement::Overlapped, Placement::Serialized] {
            let a = simulate_timeline(&p, placement);
            let b = simulate_timeline(&q, placement);
            prop_assert!(b.makespan >= a.makespan);
            prop_assert_eq!(a.makespan, a.compute_sum + a.stall_total);
        }
    }

    #[test]
    fn placements_differ_by_the_hidden_part(p in timeline()) {
        let over = simulate_timeline(&p, Placement::Overlapped);
        let ser = simulate_timeline(&p, Placement::Serialized);
        let hidden: u64 = (0..p.layers.len())
            .map(|l| p.fetch_cost(l).min(p.hide_window(l)))
            .sum();
        prop_assert_eq!(ser.makespan - over.makespan, hidden);
    }
}
