//! Dense f32 kernels for the transformer forward pass.
//!
//! Every matrix product reports `2·m·k·n` FLOPs to a [`FlopCounter`]. Norms,
//! softmax, rotary embeddings and elementwise ops are not counted.
//!
//! All reductions run left to right in index order, so identical inputs give
//! bit-identical outputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const RMS_NORM_EPS: f32 = 1e-5;

/// Row-major dense matrix of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// New matrix holding the given rows, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data: out,
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::config(format!(
                "elementwise add of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Where FLOPs are attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopScope {
    Layer(usize),
    Head,
    Other,
}

/// Session-local FLOP tally with a per-scope breakdown.
#[derive(Debug, Clone, Default)]
pub struct FlopCounter {
    total: u64,
    breakdown: BTreeMap<FlopScope, u64>,
    scope: Option<FlopScope>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Subsequent FLOPs are attributed to `scope`.
    pub fn set_scope(&mut self, scope: FlopScope) {
        self.scope = Some(scope);
    }

    pub fn add(&mut self, flops: u64) {
        self.total += flops;
        *self
            .breakdown
            .entry(self.scope.unwrap_or(FlopScope::Other))
            .or_default() += flops;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn scope_total(&self, scope: FlopScope) -> u64 {
        self.breakdown.get(&scope).copied().unwrap_or(0)
    }

    pub fn layer(&self, l: usize) -> u64 {
        self.scope_total(FlopScope::Layer(l))
    }

    /// Sum over all transformer layers (excludes the output head).
    pub fn layers_total(&self) -> u64 {
        self.breakdown
            .iter()
            .filter(|(s, _)| matches!(s, FlopScope::Layer(_)))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn breakdown(&self) -> &BTreeMap<FlopScope, u64> {
        &self.breakdown
    }
}

/// Closed-form FLOPs of one transformer block over `active` query tokens
/// attending to `context` cached tokens.
pub fn block_flops(active: u64, context: u64, d: u64, d_ff: u64) -> u64 {
    8 * active * d * d + 4 * active * context * d + 6 * active * d * d_ff
}

pub fn matmul(a: &Matrix, b: &Matrix, counter: &mut FlopCounter) -> Result<Matrix> {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    if k != k2 {
        return Err(Error::config(format!(
            "matmul inner dimensions disagree: {m}x{k} * {k2}x{n}"
        )));
    }
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let o_row = &mut out.data[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    counter.add(2 * (m * k * n) as u64);
    Ok(out)
}

pub fn rmsnorm(x: &Matrix, gain: &[f32]) -> Result<Matrix> {
    if gain.len() != x.cols() || x.cols() == 0 {
        return Err(Error::config(format!(
            "rmsnorm gain length {} for width {}",
            gain.len(),
            x.cols()
        )));
    }
    let d = x.cols() as f32;
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mut ss = 0.0f32;
        for v in row.iter() {
            ss += v * v;
        }
        let inv = 1.0 / (ss / d + RMS_NORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
    Ok(out)
}

/// Rotary embedding over consecutive pairs `(2j, 2j+1)` of every head,
/// rotated by `pos · base^(-2j/head_dim)`. `positions[i]` is the absolute
/// sequence index of row `i`.
pub fn rope_apply(x: &mut Matrix, positions: &[usize], head_dim: usize, base: f32) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::config(format!("rotary head dimension {head_dim} must be even")));
    }
    if !x.cols().is_multiple_of(head_dim) {
        return Err(Error::config(format!(
            "width {} is not a multiple of head dimension {head_dim}",
            x.cols()
        )));
    }
    if positions.len() != x.rows() {
        return Err(Error::config(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|j| (base as f64).powf(-2.0 * j as f64 / head_dim as f64))
        .collect();
    for (i, &pos) in positions.iter().enumerate() {
        let rot: Vec<(f32, f32)> = inv_freq
            .iter()
            .map(|f| {
                let angle = pos as f64 * f;
                (angle.cos() as f32, angle.sin() as f32)
            })
            .collect();
        for head in x.row_mut(i).chunks_exact_mut(head_dim) {
            for (pair, &(c, s)) in head.chunks_exact_mut(2).zip(&rot) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
    Ok(())
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Bidirectional multi-head attention: queries for the active rows, keys and
/// values over the whole cached sequence.
pub fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    counter: &mut FlopCounter,
) -> Result<Matrix> {
    let d = q.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
    }
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::config(format!(
            "attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let n = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    let mut scores = vec![0.0f32; n];
    for i in 0..q.rows() {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = &q.row(i)[cols.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &k.row(j)[cols.clone()];
                let mut dot = 0.0f32;
                for (a, b) in qh.iter().zip(kh) {
                    dot += a * b;
                }
                *s = dot * scale;
            }
            softmax_in_place(&mut scores);
            let oh = &mut out.row_mut(i)[cols.clone()];
            for (j, &p) in scores.iter().enumerate() {
                let vh = &v.row(j)[cols.clone()];
                for (o, &x) in oh.iter_mut().zip(vh) {
                    *o += p * x;
                }
            }
        }
    }
    counter.add(4 * (q.rows() * n * d) as u64);
    Ok(out)
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// SwiGLU feed-forward: `down(silu(gate(x)) ⊙ up(x))`.
pub fn gated_ffn(
    x: &Matrix,
    gate: &Matrix,
    up: &Matrix,
    down: &Matrix,
    counter: &mut FlopCounter,
) -> Result<Matrix> {
    let mut g = matmul(x, gate, counter)?;
    let u = matmul(x, up, counter)?;
    if g.shape() != u.shape() {
        return Err(Error::config("gate and up projections disagree"));
    }
    for (a, b) in g.data.iter_mut().zip(&u.data) {
        *a = silu(*a) * b;
    }
    matmul(&g, down, counter)
}
