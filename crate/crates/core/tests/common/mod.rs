//! Independent reference implementations used as test oracles. Nothing here
//! calls into the crate's math: only weights and configs are shared.

#![allow(dead_code)]

use std::collections::BTreeMap;

use tierprune::model::{init_weights, ModelConfig, WeightSet};

pub fn toy_config(
    seed: u64,
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    ffn_dim: usize,
    vocab: usize,
) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        head_dim,
        ffn_dim,
        vocab_size: vocab,
        kv_bytes_per_elem: 2,
        seed,
    }
}

/// Simple LCG for test inputs that do not need proptest shrinking.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.0 >> 33
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }

    pub fn range(&mut self, lo: u64, hi_inclusive: u64) -> u64 {
        lo + self.below(hi_inclusive - lo + 1)
    }

    pub fn unit(&mut self) -> f64 {
        self.next() as f64 / (1u64 << 31) as f64
    }

    pub fn tokens(&mut self, n: usize, vocab: usize) -> Vec<u32> {
        (0..n).map(|_| self.below(vocab as u64) as u32).collect()
    }
}

fn tensor(w: &WeightSet, name: &str) -> Vec<f64> {
    w.get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .data
        .iter()
        .map(|&v| v as f64)
        .collect()
}

/// `x` (length `n_in`) times a row-major `[n_in, n_out]` matrix.
fn vec_mat(x: &[f64], m: &[f64], n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_out];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..n_out {
            out[j] += xi * m[i * n_out + j];
        }
    }
    out
}

fn norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn rotate(v: &mut [f64], pos: usize, n_heads: usize) {
    let d = v.len() / n_heads;
    for h in 0..n_heads {
        for i in 0..d / 2 {
            let theta = pos as f64 * 10000f64.powf(-(2.0 * i as f64) / d as f64);
            let (a, b) = (v[h * d + 2 * i], v[h * d + 2 * i + 1]);
            v[h * d + 2 * i] = a * theta.cos() - b * theta.sin();
            v[h * d + 2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
}

struct LayerW {
    attn_norm: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ffn_norm: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

/// Token-at-a-time dense decoder with a full K/V cache, in f64.
pub struct DenseRef {
    cfg: ModelConfig,
    embed: Vec<f64>,
    layers: Vec<LayerW>,
    final_norm: Vec<f64>,
    lm_head: Vec<f64>,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

impl DenseRef {
    pub fn new(cfg: &ModelConfig) -> Self {
        let w = init_weights(cfg);
        Self::from_weights(cfg, &w)
    }

    pub fn from_weights(cfg: &ModelConfig, w: &WeightSet) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|l| LayerW {
                attn_norm: tensor(w, &format!("layer{l}.attn_norm")),
                wq: tensor(w, &format!("layer{l}.wq")),
                wk: tensor(w, &format!("layer{l}.wk")),
                wv: tensor(w, &format!("layer{l}.wv")),
                wo: tensor(w, &format!("layer{l}.wo")),
                ffn_norm: tensor(w, &format!("layer{l}.ffn_norm")),
                w1: tensor(w, &format!("layer{l}.w1")),
                w2: tensor(w, &format!("layer{l}.w2")),
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            embed: tensor(w, "embed"),
            layers,
            final_norm: tensor(w, "final_norm"),
            lm_head: tensor(w, "lm_head"),
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
        }
    }

    /// Appends one token and returns its logits.
    pub fn push(&mut self, token: u32) -> Vec<f64> {
        let (nh, d, f, vocab) = (
            self.cfg.n_heads,
            self.cfg.head_dim,
            self.cfg.ffn_dim,
            self.cfg.vocab_size,
        );
        let h = nh * d;
        let pos = self.keys[0].len();
        let t = token as usize;
        let mut x = self.embed[t * h..(t + 1) * h].to_vec();
        for (l, w) in self.layers.iter().enumerate() {
            let n = norm(&x, &w.attn_norm);
            let mut q = vec_mat(&n, &w.wq, h);
            let mut k = vec_mat(&n, &w.wk, h);
            let v = vec_mat(&n, &w.wv, h);
            rotate(&mut q, pos, nh);
            rotate(&mut k, pos, nh);
            self.keys[l].push(k);
            self.values[l].push(v);
            let mut attn = vec![0.0; h];
            for head in 0..nh {
                let span = head * d..(head + 1) * d;
                let logits: Vec<f64> = self.keys[l]
                    .iter()
                    .map(|kr| {
                        q[span.clone()]
                            .iter()
                            .zip(&kr[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for (wgt, vr) in e.iter().zip(&self.values[l]) {
                    for j in span.clone() {
                        attn[j] += wgt / s * vr[j];
                    }
                }
            }
            let o = vec_mat(&attn, &w.wo, h);
            for j in 0..h {
                x[j] += o[j];
            }
            let n = norm(&x, &w.ffn_norm);
            let up: Vec<f64> = vec_mat(&n, &w.w1, f)
                .into_iter()
                .map(|u| u / (1.0 + (-u).exp()))
                .collect();
            let down = vec_mat(&up, &w.w2, h);
            for j in 0..h {
                x[j] += down[j];
            }
        }
        vec_mat(&norm(&x, &self.final_norm), &self.lm_head, vocab)
    }

    pub fn feed(&mut self, tokens: &[u32]) -> Vec<f64> {
        let mut last = Vec::new();
        for &t in tokens {
            last = self.push(t);
        }
        last
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - y).abs())
        .fold(0.0, f64::max)
}

/// Unit means of `rows` (each `width` long) in groups of `unit`.
pub fn rep_oracle(rows: &[Vec<f64>], unit: usize) -> Vec<Vec<f64>> {
    rows.chunks(unit)
        .map(|c| {
            let mut m = vec![0.0; c[0].len()];
            for r in c {
                for (a, b) in m.iter_mut().zip(r) {
                    *a += b;
                }
            }
            m.iter().map(|v| v / c.len() as f64).collect()
        })
        .collect()
}

/// Max over units of the head-averaged dot product.
pub fn score_oracle(q: &[f64], units: &[Vec<f64>], n_heads: usize) -> f64 {
    let d = q.len() / n_heads;
    units
        .iter()
        .map(|u| {
            (0..n_heads)
                .map(|h| (0..d).map(|i| q[h * d + i] * u[h * d + i]).sum::<f64>())
                .sum::<f64>()
                / n_heads as f64
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Sink plus `k - 1` picks by repeated linear scans (higher score, then lower id).
pub fn select_oracle(scores: &BTreeMap<u32, f64>, k: usize) -> Vec<u32> {
    let mut chosen = vec![0u32];
    let mut left: Vec<(u32, f64)> = scores
        .iter()
        .filter(|(b, _)| **b != 0)
        .map(|(b, s)| (*b, *s))
        .collect();
    while chosen.len() < k && !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (b, s) = left[i];
            let (bb, bs) = left[best];
            if s > bs || (s == bs && b < bb) {
                best = i;
            }
        }
        chosen.push(left.remove(best).0);
    }
    chosen.sort_unstable();
    chosen
}
