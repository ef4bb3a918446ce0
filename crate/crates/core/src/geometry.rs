//! Embedding-induced ground metric.
//!
//! Raw embeddings are L2-normalized, mean-centered and diagonally whitened
//! once; the token distance is the Euclidean distance between whitened rows.
//! All distance arithmetic runs in `f64` regardless of the storage type of the
//! raw embeddings.

use crate::error::{Error, Result};

/// Default whitening regularizer.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Raw token embeddings, row-major, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Dimension(format!(
                "embedding matrix needs at least one row and one column, got {rows}x{dim}"
            )));
        }
        if data.len() != rows * dim {
            return Err(Error::Dimension(format!(
                "expected {} values for a {rows}x{dim} matrix, got {}",
                rows * dim,
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    /// Convenience constructor from nested rows (tests and fixtures).
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Whitened embedding geometry. Immutable once built.
#[derive(Debug, Clone)]
pub struct TokenMetric {
    n: usize,
    dim: usize,
    whitened: AlignedBuf,
    scale: Vec<f64>,
    mean: Vec<f64>,
    epsilon: f64,
}

/// `f64` storage whose first element sits on a 64-byte boundary, so rows of
/// a multiple of eight coordinates never straddle cache lines.
struct AlignedBuf {
    raw: Vec<f64>,
    offset: usize,
    len: usize,
}

impl AlignedBuf {
    const ALIGN: usize = 64;

    fn zeroed(len: usize) -> Self {
        let slack = Self::ALIGN / std::mem::size_of::<f64>();
        let raw = vec![0.0; len + slack];
        let misalign = raw.as_ptr() as usize % Self::ALIGN;
        let offset = ((Self::ALIGN - misalign) % Self::ALIGN) / std::mem::size_of::<f64>();
        Self { raw, offset, len }
    }

    fn as_slice(&self) -> &[f64] {
        &self.raw[self.offset..self.offset + self.len]
    }

    fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.raw[self.offset..self.offset + self.len]
    }
}

impl Clone for AlignedBuf {
    fn clone(&self) -> Self {
        let mut out = Self::zeroed(self.len);
        out.as_mut_slice().copy_from_slice(self.as_slice());
        out
    }
}

impl std::fmt::Debug for AlignedBuf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AlignedBuf({} values)", self.len)
    }
}

/// Builds the whitened metric from raw embeddings.
///
/// Rows are normalized to unit length, centered on the mean normalized row,
/// and each coordinate is scaled by `(var + epsilon)^(-1/2)` where `var` is the
/// population variance of that coordinate.
pub fn build_metric(emb: &EmbeddingMatrix, epsilon: f64) -> Result<TokenMetric> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "whitening epsilon must be a positive finite number, got {epsilon}"
        )));
    }
    let (n, dim) = (emb.rows, emb.dim);
    let mut buf = AlignedBuf::zeroed(n * dim);
    let whitened = buf.as_mut_slice();

    for i in 0..n {
        let raw = emb.row(i);
        if let Some(col) = raw.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row: i, col });
        }
        let norm = raw
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormRow { token: i });
        }
        let out = &mut whitened[i * dim..(i + 1) * dim];
        for (o, &x) in out.iter_mut().zip(raw) {
            *o = f64::from(x) / norm;
        }
    }

    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0f64; dim];
    for row in whitened.chunks_exact(dim) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_n);

    let mut var = vec![0.0f64; dim];
    for row in whitened.chunks_exact(dim) {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            let c = x - m;
            *v += c * c;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|&v| 1.0 / (v * inv_n + epsilon).sqrt())
        .collect();

    for row in whitened.chunks_exact_mut(dim) {
        for ((x, &m), &s) in row.iter_mut().zip(&mean).zip(&scale) {
            *x = s * (*x - m);
        }
    }

    Ok(TokenMetric {
        n,
        dim,
        whitened: buf,
        scale,
        mean,
        epsilon,
    })
}

impl TokenMetric {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Per-coordinate whitening factors.
    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Per-coordinate mean of the normalized rows.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn whitened_row(&self, i: usize) -> &[f64] {
        &self.whitened.as_slice()[i * self.dim..(i + 1) * self.dim]
    }

    /// Copy of this metric with every whitened coordinate multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Result<TokenMetric> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "metric scale must be positive and finite, got {alpha}"
            )));
        }
        let mut out = self.clone();
        out.whitened.as_mut_slice().iter_mut().for_each(|x| *x *= alpha);
        out.scale.iter_mut().for_each(|x| *x *= alpha);
        Ok(out)
    }

    fn check(&self, i: usize) -> Result<()> {
        if i < self.n {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange { index: i, n: self.n })
        }
    }

    fn check_set(&self, set: &[usize]) -> Result<()> {
        if set.is_empty() {
            return Err(Error::EmptySet);
        }
        set.iter().try_for_each(|&j| self.check(j))
    }

    /// Squared distance without bounds checks beyond slice indexing.
    #[inline]
    pub(crate) fn sq_dist(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        kernel::sq_dist(self.whitened_row(i), self.whitened_row(j))
    }

    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        self.check(i)?;
        self.check(j)?;
        Ok(self.sq_dist(i, j).sqrt())
    }

    /// `min_{j in set} d(i, j)`.
    pub fn dist_to_set(&self, i: usize, set: &[usize]) -> Result<f64> {
        self.check(i)?;
        self.check_set(set)?;
        Ok(self.min_sq_dist(i, set).sqrt())
    }

    #[inline]
    fn min_sq_dist(&self, i: usize, set: &[usize]) -> f64 {
        set.iter()
            .map(|&j| self.sq_dist(i, j))
            .fold(f64::INFINITY, f64::min)
    }

    /// [`dist_to_set`](Self::dist_to_set) for every member of `pool`.
    ///
    /// Bit-identical to the scalar form: the minimum is taken over squared
    /// distances and the square root applied last in both paths.
    pub fn batched_dist_to_set(&self, pool: &[usize], set: &[usize]) -> Result<Vec<f64>> {
        self.check_set(set)?;
        pool.iter().try_for_each(|&i| self.check(i))?;
        Ok(pool
            .iter()
            .map(|&i| self.min_sq_dist(i, set).sqrt())
            .collect())
    }
}

/// Squared Euclidean distance with a fixed summation order.
///
/// Thirty-two independent accumulators are combined by a fixed tree, so every
/// dispatch target produces identical bits.
pub(crate) mod kernel {
    const LANES: usize = 32;

    /// Folds the lane accumulators with a fixed pairwise tree
    /// (32 -> 16 -> 8 -> 4 -> 2 -> 1) and adds the scalar tail.
    #[inline(always)]
    fn finish(mut acc: [f64; LANES], ra: &[f64], rb: &[f64]) -> f64 {
        let mut tail = 0.0;
        for (x, y) in ra.iter().zip(rb) {
            let d = x - y;
            tail = d.mul_add(d, tail);
        }
        let mut width = LANES;
        while width > 1 {
            width /= 2;
            for l in 0..width {
                acc[l] += acc[l + width];
            }
        }
        acc[0] + tail
    }

    #[inline(always)]
    fn sq_dist_lanes(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f64; LANES];
        let ca = a.chunks_exact(LANES);
        let cb = b.chunks_exact(LANES);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (xa, xb) in ca.zip(cb) {
            for l in 0..LANES {
                let d = xa[l] - xb[l];
                acc[l] = d.mul_add(d, acc[l]);
            }
        }
        finish(acc, ra, rb)
    }

    // The vector paths keep lane `l` of the portable loop in lane `l % W` of
    // register `l / W` and use fused multiply-add like the portable loop, so
    // every lane sees the same sequence of roundings.

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn sq_dist_avx512(a: &[f64], b: &[f64]) -> f64 {
        use std::arch::x86_64::*;
        let chunks = a.len().min(b.len()) / LANES;
        let mut v = [_mm512_setzero_pd(); LANES / 8];
        for c in 0..chunks {
            let (pa, pb) = (a.as_ptr().add(c * LANES), b.as_ptr().add(c * LANES));
            for (k, acc) in v.iter_mut().enumerate() {
                let d = _mm512_sub_pd(_mm512_loadu_pd(pa.add(8 * k)), _mm512_loadu_pd(pb.add(8 * k)));
                *acc = _mm512_fmadd_pd(d, d, *acc);
            }
        }
        let mut acc = [0.0f64; LANES];
        for (k, r) in v.iter().enumerate() {
            _mm512_storeu_pd(acc.as_mut_ptr().add(8 * k), *r);
        }
        finish(acc, &a[chunks * LANES..], &b[chunks * LANES..])
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn sq_dist_avx2(a: &[f64], b: &[f64]) -> f64 {
        use std::arch::x86_64::*;
        let chunks = a.len().min(b.len()) / LANES;
        let mut v = [_mm256_setzero_pd(); LANES / 4];
        for c in 0..chunks {
            let (pa, pb) = (a.as_ptr().add(c * LANES), b.as_ptr().add(c * LANES));
            for (k, acc) in v.iter_mut().enumerate() {
                let d = _mm256_sub_pd(_mm256_loadu_pd(pa.add(4 * k)), _mm256_loadu_pd(pb.add(4 * k)));
                *acc = _mm256_fmadd_pd(d, d, *acc);
            }
        }
        let mut acc = [0.0f64; LANES];
        for (k, r) in v.iter().enumerate() {
            _mm256_storeu_pd(acc.as_mut_ptr().add(4 * k), *r);
        }
        finish(acc, &a[chunks * LANES..], &b[chunks * LANES..])
    }

    /// Squared distances from `row` to each target, written to `out`.
    /// Bit-identical to calling [`sq_dist`] per target. `next` is a row the
    /// caller will process afterwards; it is prefetched while this one runs.
    pub fn sq_dist_many(row: &[f64], targets: &[&[f64]], out: &mut [f64], next: Option<&[f64]>) {
        debug_assert_eq!(targets.len(), out.len());
        #[cfg(target_arch = "x86_64")]
        {
            if row.len() >= LANES && std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: AVX-512F verified via runtime detection; targets share `row`'s length.
                unsafe { many_avx512(row, targets, out, next) };
                return;
            }
        }
        let _ = next;
        for (o, t) in out.iter_mut().zip(targets) {
            *o = sq_dist(row, t);
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn many_avx512(row: &[f64], targets: &[&[f64]], out: &mut [f64], next: Option<&[f64]>) {
        let mut t = 0;
        let mut next = next;
        while t + GROUP <= targets.len() {
            group_avx512::<GROUP>(row, &targets[t..t + GROUP], &mut out[t..t + GROUP], next.take());
            t += GROUP;
        }
        let (rest, out) = (&targets[t..], &mut out[t..]);
        match rest.len() {
            0 => {}
            1 => group_avx512::<1>(row, rest, out, next),
            2 => group_avx512::<2>(row, rest, out, next),
            3 => group_avx512::<3>(row, rest, out, next),
            4 => group_avx512::<4>(row, rest, out, next),
            _ => group_avx512::<5>(row, rest, out, next),
        }
    }

    /// Targets handled per pass over `row`: 6 targets x 4 registers = 24
    /// accumulators, leaving room for the row chunk in the 32 vector registers.
    #[cfg(target_arch = "x86_64")]
    const GROUP: usize = 6;

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn group_avx512<const C: usize>(row: &[f64], targets: &[&[f64]], out: &mut [f64], next: Option<&[f64]>) {
        use std::arch::x86_64::*;
        let chunks = row.len() / LANES;
        let mut v = [[_mm512_setzero_pd(); LANES / 8]; C];
        for c in 0..chunks {
            if let Some(nx) = next {
                let p = nx.as_ptr().add(c * LANES) as *const i8;
                for line in 0..LANES / 8 {
                    _mm_prefetch::<_MM_HINT_T0>(p.add(64 * line));
                }
            }
            let pr = row.as_ptr().add(c * LANES);
            let r = [
                _mm512_loadu_pd(pr),
                _mm512_loadu_pd(pr.add(8)),
                _mm512_loadu_pd(pr.add(16)),
                _mm512_loadu_pd(pr.add(24)),
            ];
            for j in 0..C {
                let pt = targets[j].as_ptr().add(c * LANES);
                for k in 0..LANES / 8 {
                    let d = _mm512_sub_pd(r[k], _mm512_loadu_pd(pt.add(8 * k)));
                    v[j][k] = _mm512_fmadd_pd(d, d, v[j][k]);
                }
            }
        }
        for j in 0..C {
            let mut acc = [0.0f64; LANES];
            for k in 0..LANES / 8 {
                _mm512_storeu_pd(acc.as_mut_ptr().add(8 * k), v[j][k]);
            }
            out[j] = finish(acc, &row[chunks * LANES..], &targets[j][chunks * LANES..]);
        }
    }

    #[inline]
    pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
        #[cfg(target_arch = "x86_64")]
        {
            if a.len() >= LANES {
                if std::arch::is_x86_feature_detected!("avx512f") {
                    // SAFETY: AVX-512F verified via runtime detection.
                    return unsafe { sq_dist_avx512(a, b) };
                }
                if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                    // SAFETY: AVX2 verified via runtime detection.
                    return unsafe { sq_dist_avx2(a, b) };
                }
            }
        }
        sq_dist_lanes(a, b)
    }

    #[cfg(test)]
    pub fn sq_dist_portable(a: &[f64], b: &[f64]) -> f64 {
        sq_dist_lanes(a, b)
    }

    /// Results of every vector path this CPU supports.
    #[cfg(test)]
    pub fn sq_dist_vector_paths(a: &[f64], b: &[f64]) -> Vec<f64> {
        #[allow(unused_mut)]
        let mut out = Vec::new();
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: feature verified above.
                out.push(unsafe { sq_dist_avx512(a, b) });
            }
            if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                // SAFETY: feature verified above.
                out.push(unsafe { sq_dist_avx2(a, b) });
            }
        }
        out
    }
}
