//! Toy pre-norm decoder-only transformer.
//!
//! Each layer is `h += Wo·attn(rope(Wq·n(h)), rope(Wk·n(h)), Wv·n(h))` followed
//! by `h += W2·silu(W1·n(h))`. The layer is exposed in three pieces
//! ([`Model::qkv`], [`Model::attend`], [`Model::ffn`]) so the engine can drop
//! hidden rows between attention and the FFN of a pruning layer.
//!
//! Weights are either generated by [`init_weights`] or read from the raw weights
//! file described in [`load_weights`].

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::kernels::{
    apply_rotary_rows, causal_attention, matmul, rmsnorm, rmsnorm_rows, AttentionInputs,
    KernelError, Matrix,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("weights format error in tensor `{tensor}`: {msg}")]
    Format { tensor: String, msg: String },
    #[error("weights io: {0}")]
    Io(#[from] std::io::Error),
    #[error("token id {0} outside vocabulary of {1}")]
    Token(u32, usize),
    #[error("position {0} present in both the context and the new rows")]
    PositionCollision(usize),
    #[error("positions must be strictly increasing")]
    Unordered,
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Bytes per cached K/V element; only the memory accounting reads it.
    pub kv_bytes_per_elem: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub const ROPE_BASE: f32 = 10_000.0;
    pub const NORM_EPS: f32 = 1e-5;

    pub fn hidden(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("kv_bytes_per_elem", self.kv_bytes_per_elem),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(ModelError::Config("head_dim must be even for rotary".into()));
        }
        Ok(())
    }

    /// Every tensor the model needs, with its shape and init scale.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>, InitKind)> {
        let h = self.hidden();
        let proj = InitKind::Uniform(1.0 / (h as f32).sqrt());
        let mut v = vec![(
            "embed".to_string(),
            vec![self.vocab_size, h],
            InitKind::Uniform(1.0),
        )];
        for l in 0..self.n_layers {
            v.push((format!("layer{l}.attn_norm"), vec![h], InitKind::Gain));
            for w in ["wq", "wk", "wv", "wo"] {
                v.push((format!("layer{l}.{w}"), vec![h, h], proj));
            }
            v.push((format!("layer{l}.ffn_norm"), vec![h], InitKind::Gain));
            v.push((format!("layer{l}.w1"), vec![h, self.ffn_dim], proj));
            v.push((
                format!("layer{l}.w2"),
                vec![self.ffn_dim, h],
                InitKind::Uniform(1.0 / (self.ffn_dim as f32).sqrt()),
            ));
        }
        v.push(("final_norm".to_string(), vec![h], InitKind::Gain));
        v.push(("lm_head".to_string(), vec![h, self.vocab_size], proj));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// `scale * (2u - 1)` with `u` uniform in `[0, 1)`.
    Uniform(f32),
    /// `1 + 0.1 * (2u - 1)`, used for norm gains.
    Gain,
}

/// xorshift64* generator.
///
/// Each tensor gets its own stream: the state is
/// `splitmix64(seed ^ fnv1a64(tensor_name))` (replaced by
/// `0x9E3779B97F4A7C15` if that is zero). Each step is
/// `x ^= x >> 12; x ^= x << 25; x ^= x >> 27; out = x * 0x2545F4914F6CDD1D`,
/// and a float in `[0, 1)` is `(out >> 40) / 2^24`.
#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(state: u64) -> Self {
        Self {
            state: if state == 0 { 0x9E37_79B9_7F4A_7C15 } else { state },
        }
    }

    pub fn for_tensor(seed: u64, name: &str) -> Self {
        Self::new(splitmix64(seed ^ fnv1a64(name.as_bytes())))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    pub fn next_unit(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32
    }

    pub fn next_signed(&mut self) -> f32 {
        2.0 * self.next_unit() - 1.0
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightSet {
    pub tensors: BTreeMap<String, Tensor>,
}

impl WeightSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

pub fn init_weights(cfg: &ModelConfig) -> WeightSet {
    let mut tensors = BTreeMap::new();
    for (name, shape, kind) in cfg.tensor_specs() {
        let n: usize = shape.iter().product();
        let mut rng = XorShift64Star::for_tensor(cfg.seed, &name);
        let data = (0..n)
            .map(|_| match kind {
                InitKind::Uniform(scale) => rng.next_signed() * scale,
                InitKind::Gain => 1.0 + 0.1 * rng.next_signed(),
            })
            .collect();
        tensors.insert(name, Tensor { shape, data });
    }
    WeightSet { tensors }
}

/// Writes the raw weights format: a little-endian `u64` header length `N`, `N`
/// bytes of UTF-8 header, then the packed little-endian f32 payload. Each header
/// line reads `<name> <dim>x<dim>... f32 <offset> <length>`; offsets and lengths
/// are in bytes relative to the payload start.
pub fn save_weights(weights: &WeightSet, path: &Path) -> Result<()> {
    let mut header = String::new();
    let mut offset = 0usize;
    for (name, t) in &weights.tensors {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        let len = t.data.len() * 4;
        header.push_str(&format!("{name} {} f32 {offset} {len}\n", dims.join("x")));
        offset += len;
    }
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in weights.tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<WeightSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_weights(&bytes)
}

pub fn parse_weights(bytes: &[u8]) -> Result<WeightSet> {
    let fmt = |tensor: &str, msg: String| ModelError::Format {
        tensor: tensor.to_string(),
        msg,
    };
    if bytes.len() < 8 {
        return Err(fmt("<header>", "file shorter than the length prefix".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt("<header>", format!("header length {n} exceeds file")))?;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| fmt("<header>", format!("header is not UTF-8: {e}")))?;
    let payload = &bytes[header_end..];
    let mut tensors = BTreeMap::new();
    for line in header.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let name = fields.first().copied().unwrap_or("<unnamed>");
        if fields.len() != 5 {
            return Err(fmt(name, format!("expected 5 header fields, got {}", fields.len())));
        }
        let shape = fields[1]
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| fmt(name, format!("bad shape `{}`: {e}", fields[1])))?;
        if fields[2] != "f32" {
            return Err(fmt(name, format!("unsupported dtype `{}`", fields[2])));
        }
        let offset: usize = fields[3]
            .parse()
            .map_err(|e| fmt(name, format!("bad offset: {e}")))?;
        let len: usize = fields[4]
            .parse()
            .map_err(|e| fmt(name, format!("bad length: {e}")))?;
        let elems: usize = shape.iter().product();
        if elems * 4 != len {
            return Err(fmt(
                name,
                format!("shape {:?} needs {} bytes, header says {len}", shape, elems * 4),
            ));
        }
        let end = offset
            .checked_add(len)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| {
                fmt(
                    name,
                    format!(
                        "truncated payload: needs bytes {offset}..{} of {}",
                        offset + len,
                        payload.len()
                    ),
                )
            })?;
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors
            .insert(name.to_string(), Tensor { shape, data })
            .is_some()
        {
            return Err(fmt(name, "duplicate tensor".into()));
        }
    }
    Ok(WeightSet { tensors })
}

#[derive(Debug, Clone)]
struct LayerWeights {
    attn_norm: Vec<f32>,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ffn_norm: Vec<f32>,
    w1: Matrix,
    w2: Matrix,
}

/// Hidden rows of the tokens still alive at some layer boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub layer: usize,
    pub hidden: Matrix,
    pub retained_positions: Vec<usize>,
}

/// Post-rotary projections of a set of rows, heads concatenated.
#[derive(Debug, Clone)]
pub struct Qkv {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Previously computed K/V rows a layer attends to in addition to its own.
#[derive(Debug, Clone)]
pub struct KvContext {
    pub keys: Matrix,
    pub values: Matrix,
    pub positions: Vec<usize>,
}

impl KvContext {
    pub fn empty(hidden: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, hidden),
            values: Matrix::zeros(0, hidden),
            positions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub acts: LayerActivations,
    /// K/V rows of the input tokens, one per retained token.
    pub keys: Matrix,
    pub values: Matrix,
    /// Per-token queries, used to fill the local query window.
    pub queries: Matrix,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    embed: Matrix,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f32>,
    lm_head: Matrix,
}

impl Model {
    pub fn new(cfg: ModelConfig, weights: &WeightSet) -> Result<Self> {
        cfg.validate()?;
        let take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = weights.get(name).ok_or_else(|| ModelError::Format {
                tensor: name.to_string(),
                msg: "missing".into(),
            })?;
            if t.shape != shape {
                return Err(ModelError::Format {
                    tensor: name.to_string(),
                    msg: format!("shape {:?}, config needs {:?}", t.shape, shape),
                });
            }
            Ok(t.data.clone())
        };
        let mat = |name: &str, r: usize, c: usize| -> Result<Matrix> {
            Ok(Matrix::new(r, c, take(name, &[r, c])?)?)
        };
        let h = cfg.hidden();
        let f = cfg.ffn_dim;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                Ok(LayerWeights {
                    attn_norm: take(&format!("layer{l}.attn_norm"), &[h])?,
                    wq: mat(&format!("layer{l}.wq"), h, h)?,
                    wk: mat(&format!("layer{l}.wk"), h, h)?,
                    wv: mat(&format!("layer{l}.wv"), h, h)?,
                    wo: mat(&format!("layer{l}.wo"), h, h)?,
                    ffn_norm: take(&format!("layer{l}.ffn_norm"), &[h])?,
                    w1: mat(&format!("layer{l}.w1"), h, f)?,
                    w2: mat(&format!("layer{l}.w2"), f, h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: mat("embed", cfg.vocab_size, h)?,
            final_norm: take("final_norm", &[h])?,
            lm_head: mat("lm_head", h, cfg.vocab_size)?,
            layers,
            cfg,
        })
    }

    pub fn seeded(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let w = init_weights(&cfg);
        Self::new(cfg, &w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let h = self.cfg.hidden();
        let mut data = Vec::with_capacity(tokens.len() * h);
        for &t in tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(ModelError::Token(t, self.cfg.vocab_size));
            }
            data.extend_from_slice(self.embed.row(t as usize));
        }
        Ok(Matrix::new(tokens.len(), h, data)?)
    }

    /// Norm, projections and rotary for `hidden` rows at `positions`.
    pub fn qkv(&self, layer: usize, hidden: &Matrix, positions: &[usize]) -> Result<Qkv> {
        let w = &self.layers[layer];
        let normed = rmsnorm_rows(hidden, &w.attn_norm, ModelConfig::NORM_EPS)?;
        let mut q = matmul(&normed, &w.wq)?;
        let mut k = matmul(&normed, &w.wk)?;
        let v = matmul(&normed, &w.wv)?;
        apply_rotary_rows(&mut q, positions, self.cfg.n_heads, ModelConfig::ROPE_BASE)?;
        apply_rotary_rows(&mut k, positions, self.cfg.n_heads, ModelConfig::ROPE_BASE)?;
        Ok(Qkv { q, k, v })
    }

    /// Attention sub-block: returns `hidden + Wo · attn(q, keys, values)`.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &self,
        layer: usize,
        hidden: &Matrix,
        q: &Matrix,
        query_positions: &[usize],
        keys: &Matrix,
        values: &Matrix,
        key_positions: &[usize],
    ) -> Result<Matrix> {
        let inp = AttentionInputs::from_rows(
            q,
            query_positions.to_vec(),
            keys,
            values,
            key_positions.to_vec(),
            self.cfg.n_heads,
        )?;
        let scale = 1.0 / (self.cfg.head_dim as f32).sqrt();
        let attn = causal_attention(&inp, scale)?;
        let mut out = matmul(&attn, &self.layers[layer].wo)?;
        out.add_assign(hidden)?;
        Ok(out)
    }

    /// FFN sub-block: returns `hidden + W2 · silu(W1 · norm(hidden))`.
    pub fn ffn(&self, layer: usize, hidden: &Matrix) -> Result<Matrix> {
        let w = &self.layers[layer];
        let normed = rmsnorm_rows(hidden, &w.ffn_norm, ModelConfig::NORM_EPS)?;
        let mut up = matmul(&normed, &w.w1)?;
        for r in 0..up.rows() {
            for v in up.row_mut(r) {
                *v = *v / (1.0 + (-*v).exp());
            }
        }
        let mut out = matmul(&up, &w.w2)?;
        out.add_assign(hidden)?;
        Ok(out)
    }

    pub fn logits(&self, hidden_row: &[f32]) -> Result<Vec<f32>> {
        let normed = rmsnorm(hidden_row, &self.final_norm, ModelConfig::NORM_EPS)?;
        let m = Matrix::new(1, normed.len(), normed)?;
        Ok(matmul(&m, &self.lm_head)?.into_data())
    }

    /// One full layer over the retained rows. Attention sees `ctx` plus the
    /// rows' own new K/V, merged by position and causally masked.
    pub fn layer_forward(&self, acts: &LayerActivations, ctx: &KvContext) -> Result<LayerOutput> {
        let pos = &acts.retained_positions;
        if pos.windows(2).any(|w| w[0] >= w[1]) || ctx.positions.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(ModelError::Unordered);
        }
        let qkv = self.qkv(acts.layer, &acts.hidden, pos)?;
        let (keys, values, key_pos) = merge_by_position(ctx, &qkv.k, &qkv.v, pos)?;
        let attended = self.attend(
            acts.layer,
            &acts.hidden,
            &qkv.q,
            pos,
            &keys,
            &values,
            &key_pos,
        )?;
        let hidden = self.ffn(acts.layer, &attended)?;
        Ok(LayerOutput {
            acts: LayerActivations {
                layer: acts.layer + 1,
                hidden,
                retained_positions: pos.clone(),
            },
            keys: qkv.k,
            values: qkv.v,
            queries: qkv.q,
        })
    }
}

/// Merges two position-sorted K/V row sets into one sorted set.
pub fn merge_by_position(
    ctx: &KvContext,
    k: &Matrix,
    v: &Matrix,
    pos: &[usize],
) -> Result<(Matrix, Matrix, Vec<usize>)> {
    let cols = k.cols();
    let total = ctx.positions.len() + pos.len();
    let mut kd = Vec::with_capacity(total * cols);
    let mut vd = Vec::with_capacity(total * cols);
    let mut merged = Vec::with_capacity(total);
    let (mut i, mut j) = (0, 0);
    while i < ctx.positions.len() || j < pos.len() {
        let take_ctx = match (ctx.positions.get(i), pos.get(j)) {
            (Some(a), Some(b)) if a == b => return Err(ModelError::PositionCollision(*a)),
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        };
        if take_ctx {
            kd.extend_from_slice(ctx.keys.row(i));
            vd.extend_from_slice(ctx.values.row(i));
            merged.push(ctx.positions[i]);
            i += 1;
        } else {
            kd.extend_from_slice(k.row(j));
            vd.extend_from_slice(v.row(j));
            merged.push(pos[j]);
            j += 1;
        }
    }
    Ok((
        Matrix::new(total, cols, kd)?,
        Matrix::new(total, cols, vd)?,
        merged,
    ))
}
