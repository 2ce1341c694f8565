//! Dense f32 kernels shared by the model, the engine and the test oracles.
//!
//! Every reduction runs in a fixed loop order, so a given build produces
//! bit-identical results for identical inputs.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("query at position {0} has no visible keys")]
    EmptyKeySet(usize),
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KernelError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Stacks equally sized rows. An empty input yields a `0 x cols` matrix.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(KernelError::Shape(format!(
                    "row of length {} in a matrix with {cols} columns",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Copies the rows in `range` into a new matrix.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    /// Copies the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies columns `[start, start + width)` of every row.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(KernelError::Shape(format!(
                    "vstack of {} and {} columns",
                    cols, m.cols
                )));
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(KernelError::Shape(format!(
                "add of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a · b` with an i-k-j loop order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(KernelError::Shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// In-place numerically stable softmax.
pub fn softmax_row(row: &mut [f32]) -> Result<()> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite("softmax input"));
    }
    if row.is_empty() {
        return Ok(());
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// RMS normalisation with a learned gain; `eps` sits inside the square root.
pub fn rmsnorm(x: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gain.len() {
        return Err(KernelError::Shape(format!(
            "rmsnorm of {} values with {} gains",
            x.len(),
            gain.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite("rmsnorm input"));
    }
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + eps).sqrt();
    Ok(x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect())
}

/// Row-wise [`rmsnorm`].
pub fn rmsnorm_rows(x: &Matrix, gain: &[f32], eps: f32) -> Result<Matrix> {
    let mut data = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        data.extend(rmsnorm(x.row(r), gain, eps)?);
    }
    Ok(Matrix {
        rows: x.rows,
        cols: x.cols,
        data,
    })
}

/// Rotates consecutive pairs `(2i, 2i+1)` of one head's vector by
/// `position * base^(-2i/d)`. `position` is the token's original index.
pub fn apply_rotary(head: &mut [f32], position: usize, base: f32) -> Result<()> {
    let d = head.len();
    if !d.is_multiple_of(2) {
        return Err(KernelError::Shape(format!("rotary on odd head dim {d}")));
    }
    if head.iter().any(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite("rotary input"));
    }
    if position == 0 {
        return Ok(());
    }
    for i in 0..d / 2 {
        let freq = (base as f64).powf(-((2 * i) as f64) / d as f64);
        let angle = position as f64 * freq;
        let (s, c) = angle.sin_cos();
        let (s, c) = (s as f32, c as f32);
        let x0 = head[2 * i];
        let x1 = head[2 * i + 1];
        head[2 * i] = x0 * c - x1 * s;
        head[2 * i + 1] = x0 * s + x1 * c;
    }
    Ok(())
}

/// Applies [`apply_rotary`] to every head of every row; row `r` sits at
/// `positions[r]`.
pub fn apply_rotary_rows(
    m: &mut Matrix,
    positions: &[usize],
    n_heads: usize,
    base: f32,
) -> Result<()> {
    if positions.len() != m.rows || n_heads == 0 || !m.cols.is_multiple_of(n_heads) {
        return Err(KernelError::Shape(format!(
            "rotary over {} rows, {} positions, {} heads",
            m.rows,
            positions.len(),
            n_heads
        )));
    }
    let hd = m.cols / n_heads;
    for (r, &pos) in positions.iter().enumerate() {
        let row = m.row_mut(r);
        for h in 0..n_heads {
            apply_rotary(&mut row[h * hd..(h + 1) * hd], pos, base)?;
        }
    }
    Ok(())
}

/// Per-head operands of a causal attention call. Keys are visible to a query
/// iff `key_position <= query_position`.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub queries: Vec<Matrix>,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub query_positions: Vec<usize>,
    pub key_positions: Vec<usize>,
}

impl AttentionInputs {
    /// Splits head-concatenated `[n, H*d]` row matrices into per-head sets.
    pub fn from_rows(
        q: &Matrix,
        query_positions: Vec<usize>,
        k: &Matrix,
        v: &Matrix,
        key_positions: Vec<usize>,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || !q.cols.is_multiple_of(n_heads) || k.cols != q.cols || v.cols != q.cols {
            return Err(KernelError::Shape(format!(
                "attention rows with q {} / k {} / v {} columns over {n_heads} heads",
                q.cols, k.cols, v.cols
            )));
        }
        let hd = q.cols / n_heads;
        let split = |m: &Matrix| (0..n_heads).map(|h| m.column_block(h * hd, hd)).collect();
        Ok(Self {
            queries: split(q),
            keys: split(k),
            values: split(v),
            query_positions,
            key_positions,
        })
    }

    fn validate(&self) -> Result<(usize, usize)> {
        let h = self.queries.len();
        if h == 0 || self.keys.len() != h || self.values.len() != h {
            return Err(KernelError::Shape("head counts disagree".into()));
        }
        let d = self.queries[0].cols;
        let nq = self.queries[0].rows;
        let nk = self.keys[0].rows;
        for i in 0..h {
            let (q, k, v) = (&self.queries[i], &self.keys[i], &self.values[i]);
            if q.cols != d || k.cols != d || v.cols != d || q.rows != nq || k.rows != nk || v.rows != nk
            {
                return Err(KernelError::Shape(format!("head {i} dimensions disagree")));
            }
        }
        if self.query_positions.len() != nq || self.key_positions.len() != nk {
            return Err(KernelError::Shape("position list length".into()));
        }
        Ok((h, d))
    }
}

/// Per head `softmax(scale * Q K^T + causal mask) V`, heads concatenated.
pub fn causal_attention(inp: &AttentionInputs, scale: f32) -> Result<Matrix> {
    let (n_heads, d) = inp.validate()?;
    let nq = inp.query_positions.len();
    let mut out = Matrix::zeros(nq, n_heads * d);
    let mut logits: Vec<f32> = Vec::with_capacity(inp.key_positions.len());
    let mut visible: Vec<usize> = Vec::with_capacity(inp.key_positions.len());
    for (qi, &qpos) in inp.query_positions.iter().enumerate() {
        visible.clear();
        visible.extend(
            inp.key_positions
                .iter()
                .enumerate()
                .filter(|(_, &kp)| kp <= qpos)
                .map(|(i, _)| i),
        );
        if visible.is_empty() {
            return Err(KernelError::EmptyKeySet(qpos));
        }
        for h in 0..n_heads {
            let q = inp.queries[h].row(qi);
            let keys = &inp.keys[h];
            let values = &inp.values[h];
            logits.clear();
            for &ki in &visible {
                let k = keys.row(ki);
                let mut dot = 0.0f32;
                for (a, b) in q.iter().zip(k) {
                    dot += a * b;
                }
                logits.push(dot * scale);
            }
            softmax_row(&mut logits)?;
            let orow = &mut out.row_mut(qi)[h * d..(h + 1) * d];
            for (&ki, &w) in visible.iter().zip(logits.iter()) {
                for (o, &v) in orow.iter_mut().zip(values.row(ki)) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(out)
}
