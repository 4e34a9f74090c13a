//! Shaped array types shared across the crate.
//!
//! Data is stored flat in row-major order with explicit dimensions. The two
//! domain types are [`LatentImage`] (batched `B x C x H x W` pixel tensors)
//! and [`FeatureMap`] (batched `B x N x D` token features).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::require;

/// Batched image tensor `(B, C, H, W)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    pub data: Vec<f64>,
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentImage {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            data: vec![0.0; b * c * h * w],
            b,
            c,
            h,
            w,
        }
    }

    pub fn from_vec(data: Vec<f64>, b: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        require!(
            data.len() == b * c * h * w,
            "latent image data length {} does not match shape ({b}, {c}, {h}, {w})",
            data.len()
        );
        Ok(Self { data, b, c, h, w })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.b == other.b && self.c == other.c && self.h == other.h && self.w == other.w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((b * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[((b * self.c + c) * self.h + y) * self.w + x]
    }

    /// One image of the batch as a borrowed plane stack.
    pub fn batch_item(&self, b: usize) -> &[f64] {
        let plane = self.c * self.h * self.w;
        &self.data[b * plane..(b + 1) * plane]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; images must share a shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Batched token features `(B, N, D)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Vec<f64>,
    pub b: usize,
    pub n: usize,
    pub d: usize,
}

impl FeatureMap {
    pub fn zeros(b: usize, n: usize, d: usize) -> Self {
        Self {
            data: vec![0.0; b * n * d],
            b,
            n,
            d,
        }
    }

    pub fn from_vec(data: Vec<f64>, b: usize, n: usize, d: usize) -> Result<Self> {
        require!(
            data.len() == b * n * d,
            "feature map data length {} does not match shape ({b}, {n}, {d})",
            data.len()
        );
        Ok(Self { data, b, n, d })
    }

    /// Token matrix `(N, D)` of one batch item.
    pub fn tokens(&self, b: usize) -> &[f64] {
        let plane = self.n * self.d;
        &self.data[b * plane..(b + 1) * plane]
    }

    pub fn tokens_mut(&mut self, b: usize) -> &mut [f64] {
        let plane = self.n * self.d;
        &mut self.data[b * plane..(b + 1) * plane]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.b == other.b && self.n == other.n && self.d == other.d
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenate along the token axis. Dimensions must agree.
    pub fn concat_tokens(&self, other: &Self) -> Result<Self> {
        require!(
            self.b == other.b && self.d == other.d,
            "token concat requires matching batch and feature dims: ({}, {}) vs ({}, {})",
            self.b,
            self.d,
            other.b,
            other.d
        );
        let mut out = FeatureMap::zeros(self.b, self.n + other.n, self.d);
        for b in 0..self.b {
            let dst = out.tokens_mut(b);
            dst[..self.n * self.d].copy_from_slice(self.tokens(b));
            dst[self.n * self.d..].copy_from_slice(other.tokens(b));
        }
        Ok(out)
    }
}

/// `out[m, n] = sum_k a[m, k] * b[k, n]` — plain row-major matrix product.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] = sum_k a[m, k] * b[n, k]` — product with the transpose of `b`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out[k, n] += sum_m a[m, k] * b[m, n]` — transpose-product, accumulating.
pub fn matmul_at_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax over an `(rows, cols)` matrix, in place, with
/// max-subtraction for numerical stability.
pub fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = crate::math::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
