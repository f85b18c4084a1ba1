//! Basic, fully extended, sparse extended (SESA) and inter-frame (IFSA)
//! self-attention over `f32` token matrices.
//!
//! Every attention variant funnels into one kernel, [`attend`], whose
//! floating-point evaluation order is fixed: each score is a dot product
//! accumulated over feature index ascending, softmax sums run over key
//! index ascending, and each output coordinate accumulates weighted values
//! over key index ascending. Query rows are independent, so parallel
//! evaluation is bit-identical to serial evaluation.

mod cost;
mod sparse;

pub use cost::{attention_flops, kv_token_count, KvCost};
pub use sparse::{
    build_sparse_kv, extend_kv_full, full_frame_indices, FrameKv, Provenance, SparseKV,
    SPARSE_KV_HEADER_BYTES, SPARSE_KV_LAYOUT_VERSION,
};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// `rows` tokens × `cols` features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!("token matrix must be non-empty, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "token matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("token matrix has non-finite entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · w` where `w` is `cols × out_cols`, row-major.
    pub fn matmul(&self, w: &[f32], out_cols: usize) -> Result<TokenMatrix> {
        if w.len() != self.cols * out_cols {
            return Err(Error::Shape(format!(
                "weight has {} entries, expected {}x{out_cols}",
                w.len(),
                self.cols
            )));
        }
        let mut out = vec![0f32; self.rows * out_cols];
        for (i, dst) in out.chunks_exact_mut(out_cols).enumerate() {
            for (c, &x) in self.row(i).iter().enumerate() {
                let wrow = &w[c * out_cols..(c + 1) * out_cols];
                for (o, &wv) in dst.iter_mut().zip(wrow) {
                    *o += x * wv;
                }
            }
        }
        Ok(TokenMatrix { rows: self.rows, cols: out_cols, data: out })
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Max-subtracted softmax of one row, in place.
#[inline]
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax of a `rows × cols` matrix.
pub fn softmax_rows(m: &[f32], cols: usize) -> Result<Vec<f32>> {
    if cols == 0 || !m.len().is_multiple_of(cols) {
        return Err(Error::Shape(format!("{} entries do not form rows of {cols}", m.len())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("softmax input has non-finite entries".into()));
    }
    let mut out = m.to_vec();
    out.chunks_exact_mut(cols).for_each(softmax_in_place);
    Ok(out)
}

const QUERY_TILE: usize = 16;
const KEY_BLOCK: usize = 512;

/// `Softmax(Q Kᵀ / √d_h) V` per head, heads concatenated. `keys` and
/// `values` are `len × d` row-major; `d` must equal `q.cols()` and be
/// divisible by `heads`.
pub fn attend(q: &TokenMatrix, keys: &[f32], values: &[f32], len: usize, heads: usize) -> Result<TokenMatrix> {
    let d = q.cols;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!("feature dim {d} not divisible into {heads} heads")));
    }
    if len == 0 {
        return Err(Error::Shape("attention needs at least one key".into()));
    }
    if keys.len() != len * d || values.len() != len * d {
        return Err(Error::Shape(format!(
            "keys/values hold {}/{} entries, expected {len}x{d}",
            keys.len(),
            values.len()
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();

    // per-head transposed keys: head h occupies [h*dh*len, (h+1)*dh*len)
    let mut keys_t = vec![0f32; len * d];
    for (k, krow) in keys.chunks_exact(d).enumerate() {
        for (c, &v) in krow.iter().enumerate() {
            let (h, ch) = (c / dh, c % dh);
            keys_t[(h * dh + ch) * len + k] = v;
        }
    }

    let mut out = vec![0f32; q.rows * d];
    out.par_chunks_mut(QUERY_TILE * d)
        .enumerate()
        .for_each(|(tile, out_tile)| {
            let q0 = tile * QUERY_TILE;
            let nq = out_tile.len() / d;
            let mut scores = vec![0f32; nq * len];
            for h in 0..heads {
                let off = h * dh;
                scores.fill(0.0);
                for kb in (0..len).step_by(KEY_BLOCK) {
                    let ke = (kb + KEY_BLOCK).min(len);
                    for qi in 0..nq {
                        let qrow = &q.row(q0 + qi)[off..off + dh];
                        let srow = &mut scores[qi * len + kb..qi * len + ke];
                        for (c, &qc) in qrow.iter().enumerate() {
                            let kt = &keys_t[(off + c) * len + kb..(off + c) * len + ke];
                            for (s, &kv) in srow.iter_mut().zip(kt) {
                                *s += qc * kv;
                            }
                        }
                    }
                }
                for srow in scores.chunks_exact_mut(len) {
                    for s in srow.iter_mut() {
                        *s *= scale;
                    }
                    softmax_in_place(srow);
                }
                for kb in (0..len).step_by(KEY_BLOCK) {
                    let ke = (kb + KEY_BLOCK).min(len);
                    for qi in 0..nq {
                        let acc = &mut out_tile[qi * d + off..qi * d + off + dh];
                        for k in kb..ke {
                            let w = scores[qi * len + k];
                            let vrow = &values[k * d + off..k * d + off + dh];
                            for (a, &v) in acc.iter_mut().zip(vrow) {
                                *a += w * v;
                            }
                        }
                    }
                }
            }
        });
    Ok(TokenMatrix { rows: q.rows, cols: d, data: out })
}

/// Per-frame attention: `Softmax(Q Kᵀ / √d) V`.
pub fn self_attention(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix, heads: usize) -> Result<TokenMatrix> {
    if k.rows != v.rows || k.cols != q.cols || v.cols != q.cols {
        return Err(Error::Shape(format!(
            "Q {}x{}, K {}x{}, V {}x{}",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
        )));
    }
    attend(q, &k.data, &v.data, k.rows, heads)
}

/// Sparse extended self-attention: a reference frame's queries against the
/// shared gathered KV.
pub fn sesa(q: &TokenMatrix, sparse: &SparseKV, heads: usize) -> Result<TokenMatrix> {
    if q.cols != sparse.dim() {
        return Err(Error::Shape(format!("query dim {} vs KV dim {}", q.cols, sparse.dim())));
    }
    attend(q, sparse.keys(), sparse.values(), sparse.len(), heads)
}

/// Inter-frame self-attention: an intermediate frame's queries against the
/// cached KV of the joint pass. Same kernel as [`sesa`].
pub fn ifsa(q: &TokenMatrix, cached: &SparseKV, heads: usize) -> Result<TokenMatrix> {
    sesa(q, cached, heads)
}
