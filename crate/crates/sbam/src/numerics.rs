//! Minimal batched dense-array substrate.
//!
//! Arrays store 32-bit floats; reductions (`bmm`, `colsum`, `softmax_rows`)
//! accumulate in 64-bit so results are reproducible across targets. All
//! operations are pure functions of their inputs and safe to call from
//! multiple threads.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Batched rank-3 array: `n` slices of `rows x cols`, row-major within a slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat3 {
    data: Vec<f32>,
    n: usize,
    rows: usize,
    cols: usize,
}

impl Mat3 {
    /// Wraps a contiguous buffer; fails unless `data.len() == n * rows * cols`.
    pub fn new(n: usize, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * rows * cols {
            return Err(Error::shape(
                "Mat3::new",
                format!("({n},{rows},{cols}) = {} elements", n * rows * cols),
                format!("buffer of {}", data.len()),
            ));
        }
        Ok(Mat3 {
            data,
            n,
            rows,
            cols,
        })
    }

    pub fn zeros(n: usize, rows: usize, cols: usize) -> Self {
        Mat3 {
            data: vec![0.0; n * rows * cols],
            n,
            rows,
            cols,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// The `k`-th batch slice as a flat `rows * cols` row-major block.
    pub fn slice(&self, k: usize) -> &[f32] {
        let stride = self.rows * self.cols;
        &self.data[k * stride..(k + 1) * stride]
    }

    /// Row `i` of batch slice `k`.
    pub fn row(&self, k: usize, i: usize) -> &[f32] {
        let base = (k * self.rows + i) * self.cols;
        &self.data[base..base + self.cols]
    }

    pub fn at(&self, k: usize, i: usize, j: usize) -> f32 {
        self.data[(k * self.rows + i) * self.cols + j]
    }

    pub fn set(&mut self, k: usize, i: usize, j: usize, v: f32) {
        self.data[(k * self.rows + i) * self.cols + j] = v;
    }

    /// Per-slice transpose: `(n, rows, cols)` becomes `(n, cols, rows)`.
    pub fn transposed(&self) -> Mat3 {
        let mut out = Mat3::zeros(self.n, self.cols, self.rows);
        for k in 0..self.n {
            for i in 0..self.rows {
                for j in 0..self.cols {
                    out.set(k, j, i, self.at(k, i, j));
                }
            }
        }
        out
    }
}

/// Batched rank-2 array: one length-`cols` row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat2 {
    data: Vec<f32>,
    rows: usize,
    cols: usize,
}

impl Mat2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat2::new",
                format!("({rows},{cols}) = {} elements", rows * cols),
                format!("buffer of {}", data.len()),
            ));
        }
        Ok(Mat2 { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat2 {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
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

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }
}

/// Deterministic random number generator.
///
/// Backed by the ChaCha8 stream cipher (`rand_chacha::ChaCha8Rng`), seeded via
/// `SeedableRng::seed_from_u64`. Both the seeding expansion and the keystream
/// are specified byte-for-byte, so an identical seed yields an identical
/// sample stream on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform sample in `[0, 1)` with 53-bit resolution.
    pub fn next_f64_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform sample in `[lo, hi)`. Callers must ensure `lo < hi`.
    pub fn next_f32_in(&mut self, lo: f32, hi: f32) -> f32 {
        let s = lo as f64 + self.next_f64_unit() * (hi as f64 - lo as f64);
        let s = s as f32;
        // f32 rounding at the top of the range can land on hi; fold it back.
        if s >= hi {
            lo
        } else {
            s
        }
    }

    /// `count` distinct indices drawn uniformly from `0..len`, via a partial
    /// Fisher-Yates shuffle. Order of the returned indices is the draw order.
    pub fn sample_distinct(&mut self, len: usize, count: usize) -> Vec<usize> {
        assert!(count <= len, "cannot draw {count} distinct from {len}");
        let mut pool: Vec<usize> = (0..len).collect();
        for i in 0..count {
            // Modulo bias is below 2^-50 for any desk-scale len.
            let j = i + (self.next_u64() % (len - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }
}

/// Batched matrix product: `out[k] = a[k] . b[k]`.
///
/// Inner dimensions must agree per slice and batch counts must match.
pub fn bmm(a: &Mat3, b: &Mat3) -> Result<Mat3> {
    if a.n() != b.n() || a.cols() != b.rows() {
        return Err(Error::shape(
            "bmm",
            format!("{:?}", a.dims()),
            format!("{:?}", b.dims()),
        ));
    }
    let mut out = Mat3::zeros(a.n(), a.rows(), b.cols());
    for k in 0..a.n() {
        for i in 0..a.rows() {
            let lhs = a.row(k, i);
            for j in 0..b.cols() {
                let mut acc = 0.0f64;
                for (t, &l) in lhs.iter().enumerate() {
                    acc += l as f64 * b.at(k, t, j) as f64;
                }
                out.set(k, i, j, acc as f32);
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max-subtraction for stability.
///
/// Every output row sums to 1 within 1e-6; entries lie in `[0, 1]` and are
/// strictly positive unless the corresponding shifted exponent underflows.
pub fn softmax_rows(a: &Mat3) -> Mat3 {
    let mut out = Mat3::zeros(a.n(), a.rows(), a.cols());
    for k in 0..a.n() {
        for i in 0..a.rows() {
            let row = a.row(k, i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut exps = vec![0.0f64; row.len()];
            let mut sum = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let e = ((v - max) as f64).exp();
                exps[j] = e;
                sum += e;
            }
            for (j, e) in exps.iter().enumerate() {
                out.set(k, i, j, (e / sum) as f32);
            }
        }
    }
    out
}

/// Column scores: `out[k][i] = sum over rows j of a[k][j][i]`.
pub fn colsum(a: &Mat3) -> Mat2 {
    let mut out = Mat2::zeros(a.n(), a.cols());
    for k in 0..a.n() {
        for i in 0..a.cols() {
            let mut acc = 0.0f64;
            for j in 0..a.rows() {
                acc += a.at(k, j, i) as f64;
            }
            out.row_mut(k)[i] = acc as f32;
        }
    }
    out
}

/// Min-max normalization onto `[0, 1]`.
///
/// The minimum maps to 0 and the maximum to 1. When all values are equal the
/// map is undefined, and the convention here is all zeros, so downstream
/// noise alone decides any ordering.
pub fn minmax_normalize(v: &[f32]) -> Vec<f32> {
    if v.is_empty() {
        return Vec::new();
    }
    let min = v.iter().copied().fold(f32::INFINITY, f32::min);
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == min {
        return vec![0.0; v.len()];
    }
    let range = max - min;
    v.iter().map(|&x| (x - min) / range).collect()
}

/// Indices that sort `v` ascending; stable, so ties keep ascending index order.
pub fn argsort_asc(v: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    idx
}

/// `rows x cols` of independent uniform samples in `[lo, hi)`.
pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f32, hi: f32) -> Result<Mat2> {
    if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err(Error::parameter(
            "uniform range",
            format!("lo ({lo}) must be strictly below hi ({hi})"),
        ));
    }
    let data = (0..rows * cols).map(|_| rng.next_f32_in(lo, hi)).collect();
    Mat2::new(rows, cols, data)
}
