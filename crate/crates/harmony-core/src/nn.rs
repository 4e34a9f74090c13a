//! Minimal neural-network layers with explicit forward and backward passes.
//!
//! Every layer caches what its backward pass needs and accumulates weight
//! gradients into [`Param::grad`]. Parameters with `requires_grad == false`
//! never receive gradient, which is how frozen stages are enforced; input
//! gradients still propagate through them.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::CounterRng;
use crate::tensor::{matmul, matmul_at_acc, matmul_bt, softmax_rows};

/// A named tensor of weights plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
}

impl Param {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
            grad: vec![0.0; len],
            requires_grad: true,
        }
    }

    /// Fan-in-scaled Gaussian initialization.
    pub fn gaussian(rng: &mut CounterRng, len: usize, fan_in: usize) -> Self {
        let scale = 1.0 / math::sqrt(fan_in.max(1) as f64);
        let mut data = vec![0.0; len];
        for v in data.iter_mut() {
            *v = rng.next_gaussian() * scale;
        }
        Self {
            grad: vec![0.0; len],
            data,
            requires_grad: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    #[inline]
    pub fn accumulate(&mut self, f: impl FnOnce(&mut [f64])) {
        if self.requires_grad {
            f(&mut self.grad);
        }
    }
}

/// Visitor over named parameters; module trees compose names with `.`.
pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn set_requires_grad(&mut self, value: bool) {
        self.visit_params("", &mut |_, p| p.requires_grad = value);
    }
}

fn join(prefix: &str, name: &str) -> alloc::string::String {
    if prefix.is_empty() {
        alloc::string::String::from(name)
    } else {
        alloc::format!("{prefix}.{name}")
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map on token rows: `y = x W^T + b`, with `W` stored `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(rng: &mut CounterRng, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            w: Param::gaussian(rng, d_out * d_in, d_in),
            b: bias.then(|| Param::zeros(d_out)),
            d_in,
            d_out,
        }
    }

    /// `x` is `(m, d_in)` flattened.
    pub fn forward(&self, x: &[f64], m: usize) -> Vec<f64> {
        let mut y = vec![0.0; m * self.d_out];
        matmul_bt(x, &self.w.data, m, self.d_in, self.d_out, &mut y);
        if let Some(b) = &self.b {
            for row in y.chunks_mut(self.d_out) {
                for (v, bv) in row.iter_mut().zip(&b.data) {
                    *v += bv;
                }
            }
        }
        y
    }

    /// Returns the input gradient; accumulates weight gradients.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], m: usize) -> Vec<f64> {
        let mut dx = vec![0.0; m * self.d_in];
        matmul(dy, &self.w.data, m, self.d_out, self.d_in, &mut dx);
        self.w
            .accumulate(|g| matmul_at_acc(dy, x, m, self.d_out, self.d_in, g));
        if let Some(b) = &mut self.b {
            b.accumulate(|g| {
                for row in dy.chunks(self.d_out) {
                    for (gv, dv) in g.iter_mut().zip(row) {
                        *gv += dv;
                    }
                }
            });
        }
        dx
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&join(prefix, "b"), b);
        }
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution, weights `(c_out, c_in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut CounterRng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            w: Param::gaussian(rng, c_out * c_in * k * k, c_in * k * k),
            b: Param::zeros(c_out),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.k) / self.stride + 1
    }

    /// `x` is `(b, c_in, h, w)` flattened; output `(b, c_out, oh, ow)`.
    pub fn forward(&self, x: &[f64], bsz: usize, h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut y = vec![0.0; bsz * self.c_out * oh * ow];
        for b in 0..bsz {
            for co in 0..self.c_out {
                let yplane = &mut y[((b * self.c_out + co) * oh) * ow..][..oh * ow];
                yplane.fill(self.b.data[co]);
                for ci in 0..self.c_in {
                    let xplane = &x[((b * self.c_in + ci) * h) * w..][..h * w];
                    let wbase = ((co * self.c_in + ci) * self.k) * self.k;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let wv = self.w.data[wbase + ky * self.k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            accumulate_shifted(
                                yplane, xplane, wv, oh, ow, h, w, ky, kx, self.stride, self.pad,
                            );
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(
        &mut self,
        x: &[f64],
        dy: &[f64],
        bsz: usize,
        h: usize,
        w: usize,
    ) -> Vec<f64> {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut dx = vec![0.0; bsz * self.c_in * h * w];
        let k = self.k;
        for b in 0..bsz {
            for co in 0..self.c_out {
                let dyplane = &dy[((b * self.c_out + co) * oh) * ow..][..oh * ow];
                self.b.accumulate(|g| {
                    g[co] += dyplane.iter().sum::<f64>();
                });
                for ci in 0..self.c_in {
                    let xplane = &x[((b * self.c_in + ci) * h) * w..][..h * w];
                    let dxplane = ((b * self.c_in + ci) * h) * w;
                    let wbase = ((co * self.c_in + ci) * k) * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            if self.stride == 1 {
                                let ox_lo = self.pad.saturating_sub(kx);
                                let ox_hi = (w + self.pad - kx).min(ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix_lo = ox_lo + kx - self.pad;
                                let len = ox_hi - ox_lo;
                                let mut acc = 0.0;
                                let wv = self.w.data[wbase + ky * k + kx];
                                for oy in 0..oh {
                                    let iy = oy + ky;
                                    if iy < self.pad || iy >= h + self.pad {
                                        continue;
                                    }
                                    let iy = iy - self.pad;
                                    let dyrow = &dyplane[oy * ow + ox_lo..oy * ow + ox_lo + len];
                                    let xrow = &xplane[iy * w + ix_lo..iy * w + ix_lo + len];
                                    if self.w.requires_grad {
                                        for (xv, dv) in xrow.iter().zip(dyrow) {
                                            acc += xv * dv;
                                        }
                                    }
                                    if wv != 0.0 {
                                        let dxrow = &mut dx
                                            [dxplane + iy * w + ix_lo..dxplane + iy * w + ix_lo + len];
                                        for (dxv, dv) in dxrow.iter_mut().zip(dyrow) {
                                            *dxv += wv * dv;
                                        }
                                    }
                                }
                                if self.w.requires_grad {
                                    self.w.grad[wbase + ky * k + kx] += acc;
                                }
                            } else {
                                let mut acc = 0.0;
                                let wv = self.w.data[wbase + ky * k + kx];
                                for oy in 0..oh {
                                    let iy = oy * self.stride + ky;
                                    if iy < self.pad || iy >= h + self.pad {
                                        continue;
                                    }
                                    let iy = iy - self.pad;
                                    for ox in 0..ow {
                                        let ix = ox * self.stride + kx;
                                        if ix < self.pad || ix >= w + self.pad {
                                            continue;
                                        }
                                        let dv = dyplane[oy * ow + ox];
                                        acc += xplane[iy * w + (ix - self.pad)] * dv;
                                        dx[dxplane + iy * w + (ix - self.pad)] += wv * dv;
                                    }
                                }
                                if self.w.requires_grad {
                                    self.w.grad[wbase + ky * k + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// `yplane[oy, ox] += wv * xplane[oy*stride + ky - pad, ox*stride + kx - pad]`
/// over all in-bounds positions, with the inner loop contiguous in `ox`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_shifted(
    yplane: &mut [f64],
    xplane: &[f64],
    wv: f64,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) {
    for oy in 0..oh {
        let iy = oy * stride + ky;
        if iy < pad || iy >= h + pad {
            continue;
        }
        let iy = iy - pad;
        let yrow = &mut yplane[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            // ix = ox + kx - pad; clip to valid ox range and use slices.
            let ox_lo = pad.saturating_sub(kx);
            let ox_hi = (w + pad - kx).min(ow);
            if ox_lo >= ox_hi {
                continue;
            }
            let ix_lo = ox_lo + kx - pad;
            let xrow = &xplane[iy * w + ix_lo..iy * w + ix_lo + (ox_hi - ox_lo)];
            for (yv, xv) in yrow[ox_lo..ox_hi].iter_mut().zip(xrow) {
                *yv += wv * xv;
            }
        } else {
            for ox in 0..ow {
                let ix = ox * stride + kx;
                if ix < pad || ix >= w + pad {
                    continue;
                }
                yrow[ox] += wv * xplane[iy * w + (ix - pad)];
            }
        }
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

pub struct GroupNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "groups must divide channels");
        let mut gamma = Param::zeros(channels);
        gamma.data.fill(1.0);
        Self {
            gamma,
            beta: Param::zeros(channels),
            channels,
            groups,
            eps: 1e-5,
        }
    }

    /// Pick the widest group count out of {4, 2, 1} dividing `channels`.
    pub fn auto_groups(channels: usize) -> usize {
        if channels % 4 == 0 {
            4
        } else if channels % 2 == 0 {
            2
        } else {
            1
        }
    }

    /// `x` is `(b, channels, hw)` flattened.
    pub fn forward(&self, x: &[f64], bsz: usize, hw: usize) -> (Vec<f64>, GroupNormCache) {
        let cpg = self.channels / self.groups;
        let gsize = cpg * hw;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; bsz * self.groups];
        for b in 0..bsz {
            for g in 0..self.groups {
                let base = (b * self.channels + g * cpg) * hw;
                let xs = &x[base..base + gsize];
                let mean = xs.iter().sum::<f64>() / gsize as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
                let istd = 1.0 / math::sqrt(var + self.eps);
                inv_std[b * self.groups + g] = istd;
                for c in 0..cpg {
                    let ch = g * cpg + c;
                    let (gam, bet) = (self.gamma.data[ch], self.beta.data[ch]);
                    let off = base + c * hw;
                    for i in 0..hw {
                        let xh = (x[off + i] - mean) * istd;
                        xhat[off + i] = xh;
                        y[off + i] = gam * xh + bet;
                    }
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &mut self,
        cache: &GroupNormCache,
        dy: &[f64],
        bsz: usize,
        hw: usize,
    ) -> Vec<f64> {
        let cpg = self.channels / self.groups;
        let gsize = (cpg * hw) as f64;
        let mut dx = vec![0.0; dy.len()];
        for b in 0..bsz {
            for g in 0..self.groups {
                let base = (b * self.channels + g * cpg) * hw;
                let istd = cache.inv_std[b * self.groups + g];
                // Reductions over the group.
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for c in 0..cpg {
                    let ch = g * cpg + c;
                    let gam = self.gamma.data[ch];
                    let off = base + c * hw;
                    for i in 0..hw {
                        let dxh = dy[off + i] * gam;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * cache.xhat[off + i];
                    }
                }
                for c in 0..cpg {
                    let ch = g * cpg + c;
                    let gam = self.gamma.data[ch];
                    let off = base + c * hw;
                    let mut dgam = 0.0;
                    let mut dbet = 0.0;
                    for i in 0..hw {
                        let xh = cache.xhat[off + i];
                        let dxh = dy[off + i] * gam;
                        dx[off + i] =
                            istd * (dxh - (sum_dxhat + xh * sum_dxhat_xhat) / gsize);
                        dgam += dy[off + i] * xh;
                        dbet += dy[off + i];
                    }
                    self.gamma.accumulate(|gr| gr[ch] += dgam);
                    self.beta.accumulate(|gr| gr[ch] += dbet);
                }
            }
        }
        dx
    }
}

impl Module for GroupNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Pointwise and resampling ops
// ---------------------------------------------------------------------------

pub fn silu_forward(x: &mut [f64]) -> Vec<f64> {
    let pre = x.to_vec();
    for v in x.iter_mut() {
        *v *= math::sigmoid(*v);
    }
    pre
}

pub fn silu_backward(pre: &[f64], dy: &mut [f64]) {
    for (d, &x) in dy.iter_mut().zip(pre) {
        let s = math::sigmoid(x);
        *d *= s * (1.0 + x * (1.0 - s));
    }
}

/// 2x2 mean pooling, stride 2. `h` and `w` must be even.
pub fn avg_pool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..][..h * w];
        let yp = &mut y[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                yp[oy * ow + ox] = 0.25 * (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]);
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dyp = &dy[p * oh * ow..][..oh * ow];
        let dxp = &mut dx[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * dyp[oy * ow + ox];
                let i = 2 * oy * w + 2 * ox;
                dxp[i] += g;
                dxp[i + 1] += g;
                dxp[i + w] += g;
                dxp[i + w + 1] += g;
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..][..h * w];
        let yp = &mut y[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                yp[oy * ow + ox] = xp[(oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dyp = &dy[p * oh * ow..][..oh * ow];
        let dxp = &mut dx[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dxp[(oy / 2) * w + ox / 2] += dyp[oy * ow + ox];
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Param,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(rng: &mut CounterRng, vocab: usize, dim: usize) -> Self {
        Self {
            table: Param::gaussian(rng, vocab * dim, dim),
            vocab,
            dim,
        }
    }

    pub fn forward(&self, ids: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; ids.len() * self.dim];
        for (i, &id) in ids.iter().enumerate() {
            out[i * self.dim..(i + 1) * self.dim]
                .copy_from_slice(&self.table.data[id * self.dim..(id + 1) * self.dim]);
        }
        out
    }

    pub fn backward(&mut self, ids: &[usize], dy: &[f64]) {
        self.table.accumulate(|g| {
            for (i, &id) in ids.iter().enumerate() {
                for d in 0..self.dim {
                    g[id * self.dim + d] += dy[i * self.dim + d];
                }
            }
        });
    }
}

impl Module for Embedding {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}

// ---------------------------------------------------------------------------
// Single-head cross-attention (backbone blocks)
// ---------------------------------------------------------------------------

/// Single-head scaled dot-product cross-attention used inside backbone
/// blocks: queries from spatial tokens `(n, c)`, keys and values from a
/// context `(m, d_ctx)`, output mapped back to `(n, c)`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub dim: usize,
}

pub struct CrossAttentionCache {
    pub x: Vec<f64>,
    pub ctx: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub probs: Vec<f64>,
    pub h: Vec<f64>,
    pub n: usize,
    pub m: usize,
}

impl CrossAttention {
    pub fn new(rng: &mut CounterRng, c: usize, d_ctx: usize, dim: usize) -> Self {
        Self {
            wq: Linear::new(rng, c, dim, false),
            wk: Linear::new(rng, d_ctx, dim, false),
            wv: Linear::new(rng, d_ctx, dim, false),
            wo: Linear::new(rng, dim, c, false),
            dim,
        }
    }

    pub fn forward(&self, x: &[f64], n: usize, ctx: &[f64], m: usize) -> (Vec<f64>, CrossAttentionCache) {
        let q = self.wq.forward(x, n);
        let k = self.wk.forward(ctx, m);
        let v = self.wv.forward(ctx, m);
        let scale = 1.0 / math::sqrt(self.dim as f64);
        let mut scores = vec![0.0; n * m];
        matmul_bt(&q, &k, n, self.dim, m, &mut scores);
        for s in scores.iter_mut() {
            *s *= scale;
        }
        softmax_rows(&mut scores, n, m);
        let mut h = vec![0.0; n * self.dim];
        matmul(&scores, &v, n, m, self.dim, &mut h);
        let y = self.wo.forward(&h, n);
        (
            y,
            CrossAttentionCache {
                x: x.to_vec(),
                ctx: ctx.to_vec(),
                q,
                k,
                v,
                probs: scores,
                h,
                n,
                m,
            },
        )
    }

    /// Returns `(dx, dctx)`.
    pub fn backward(&mut self, cache: &CrossAttentionCache, dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, m, dim) = (cache.n, cache.m, self.dim);
        let dh = self.wo.backward(&cache.h, dy, n);
        // h = probs @ v
        let mut dprobs = vec![0.0; n * m];
        matmul_bt(&dh, &cache.v, n, dim, m, &mut dprobs);
        let mut dv = vec![0.0; m * dim];
        matmul_at_acc(&cache.probs, &dh, n, m, dim, &mut dv);
        // softmax backward
        let mut dscores = vec![0.0; n * m];
        for r in 0..n {
            let p = &cache.probs[r * m..(r + 1) * m];
            let dp = &dprobs[r * m..(r + 1) * m];
            let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
            for c in 0..m {
                dscores[r * m + c] = p[c] * (dp[c] - dot);
            }
        }
        let scale = 1.0 / math::sqrt(dim as f64);
        for s in dscores.iter_mut() {
            *s *= scale;
        }
        // scores = q @ k^T
        let mut dq = vec![0.0; n * dim];
        matmul(&dscores, &cache.k, n, m, dim, &mut dq);
        let mut dk = vec![0.0; m * dim];
        matmul_at_acc(&dscores, &cache.q, n, m, dim, &mut dk);
        let dx = self.wq.backward(&cache.x, &dq, n);
        let mut dctx = self.wk.backward(&cache.ctx, &dk, m);
        let dctx_v = self.wv.backward(&cache.ctx, &dv, m);
        for (a, b) in dctx.iter_mut().zip(&dctx_v) {
            *a += b;
        }
        (dx, dctx)
    }
}

impl Module for CrossAttention {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.wq.visit_params(&join(prefix, "wq"), f);
        self.wk.visit_params(&join(prefix, "wk"), f);
        self.wv.visit_params(&join(prefix, "wv"), f);
        self.wo.visit_params(&join(prefix, "wo"), f);
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Central finite difference of `loss` with respect to entry `idx` of the
    /// parameter chosen by `sel`, evaluated on perturbed clones of `obj`.
    pub fn fd_param<T: Clone>(
        obj: &T,
        sel: impl Fn(&mut T) -> &mut Param,
        idx: usize,
        loss: impl Fn(&T) -> f64,
    ) -> f64 {
        let mut hi = obj.clone();
        let eps = {
            let p = sel(&mut hi);
            let e = 1e-5 * p.data[idx].abs().max(1.0);
            p.data[idx] += e;
            e
        };
        let mut lo = obj.clone();
        sel(&mut lo).data[idx] -= eps;
        (loss(&hi) - loss(&lo)) / (2.0 * eps)
    }

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn rand_vec(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = CounterRng::new(seed);
        (0..len).map(|_| rng.next_gaussian()).collect()
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = CounterRng::new(1);
        let mut layer = Linear::new(&mut rng, 3, 4, true);
        let x = rand_vec(2, 2 * 3);
        let dy = rand_vec(3, 2 * 4);
        let loss = |layer: &Linear, x: &[f64]| -> f64 {
            layer
                .forward(x, 2)
                .iter()
                .zip(&dy)
                .map(|(y, d)| y * d)
                .sum()
        };
        layer.zero_grads();
        let dx = layer.backward(&x, &dy, 2);
        for idx in 0..layer.w.data.len() {
            let fd = fd_param(&layer, |l| &mut l.w, idx, |l| loss(l, &x));
            assert!(rel_err(fd, layer.w.grad[idx]) < 1e-6, "w[{idx}]");
        }
        // input gradient
        for idx in 0..x.len() {
            let mut x2 = x.clone();
            let orig = x2[idx];
            let eps = 1e-6;
            x2[idx] = orig + eps;
            let hi = loss(&layer, &x2);
            x2[idx] = orig - eps;
            let lo = loss(&layer, &x2);
            let fd = (hi - lo) / (2.0 * eps);
            assert!(rel_err(fd, dx[idx]) < 1e-5, "x[{idx}]");
        }
    }

    #[test]
    fn conv_gradcheck_k3() {
        let mut rng = CounterRng::new(4);
        let mut conv = Conv2d::new(&mut rng, 2, 3, 3, 1, 1);
        let (h, w) = (4, 4);
        let x = rand_vec(5, 2 * h * w);
        let dy = rand_vec(6, 3 * h * w);
        conv.zero_grads();
        let dx = conv.backward(&x, &dy, 1, h, w);
        let loss = |conv: &Conv2d, x: &[f64]| -> f64 {
            conv.forward(x, 1, h, w)
                .iter()
                .zip(&dy)
                .map(|(y, d)| y * d)
                .sum()
        };
        for idx in (0..conv.w.data.len()).step_by(5) {
            let fd = fd_param(&conv, |c| &mut c.w, idx, |c| loss(c, &x));
            assert!(rel_err(fd, conv.w.grad[idx]) < 1e-6, "w[{idx}]");
        }
        for idx in (0..x.len()).step_by(3) {
            let mut x2 = x.clone();
            let eps = 1e-6;
            x2[idx] += eps;
            let hi = loss(&conv, &x2);
            x2[idx] -= 2.0 * eps;
            let lo = loss(&conv, &x2);
            x2[idx] += eps;
            let fd = (hi - lo) / (2.0 * eps);
            assert!(rel_err(fd, dx[idx]) < 1e-5, "x[{idx}]");
        }
    }

    #[test]
    fn conv_patchify_shapes_and_grad() {
        let mut rng = CounterRng::new(7);
        let mut conv = Conv2d::new(&mut rng, 3, 5, 8, 8, 0);
        let (h, w) = (16, 16);
        assert_eq!(conv.out_size(h), 2);
        let x = rand_vec(8, 3 * h * w);
        let y = conv.forward(&x, 1, h, w);
        assert_eq!(y.len(), 5 * 2 * 2);
        let dy = rand_vec(9, y.len());
        conv.zero_grads();
        conv.backward(&x, &dy, 1, h, w);
        let loss = |conv: &Conv2d, x: &[f64]| -> f64 {
            conv.forward(x, 1, h, w)
                .iter()
                .zip(&dy)
                .map(|(y, d)| y * d)
                .sum()
        };
        for idx in (0..conv.w.data.len()).step_by(37) {
            let fd = fd_param(&conv, |c| &mut c.w, idx, |c| loss(c, &x));
            assert!(rel_err(fd, conv.w.grad[idx]) < 1e-6, "w[{idx}]");
        }
    }

    #[test]
    fn groupnorm_gradcheck() {
        let mut gn = GroupNorm::new(4, 2);
        let mut rng = CounterRng::new(10);
        gn.gamma.data.iter_mut().for_each(|v| *v = 1.0 + 0.1 * rng.next_gaussian());
        gn.beta.data.iter_mut().for_each(|v| *v = 0.1 * rng.next_gaussian());
        let hw = 6;
        let x = rand_vec(11, 4 * hw);
        let dy = rand_vec(12, 4 * hw);
        let loss = |gn: &GroupNorm, x: &[f64]| -> f64 {
            gn.forward(x, 1, hw)
                .0
                .iter()
                .zip(&dy)
                .map(|(y, d)| y * d)
                .sum()
        };
        gn.zero_grads();
        let (_, cache) = gn.forward(&x, 1, hw);
        let dx = gn.backward(&cache, &dy, 1, hw);
        for idx in 0..x.len() {
            let mut x2 = x.clone();
            let eps = 1e-6;
            x2[idx] += eps;
            let hi = loss(&gn, &x2);
            x2[idx] -= 2.0 * eps;
            let lo = loss(&gn, &x2);
            let fd = (hi - lo) / (2.0 * eps);
            assert!(rel_err(fd, dx[idx]) < 1e-4, "x[{idx}]: fd={fd} got={}", dx[idx]);
        }
        for idx in 0..4 {
            let fd = fd_param(&gn, |g| &mut g.gamma, idx, |g| loss(g, &x));
            assert!(rel_err(fd, gn.gamma.grad[idx]) < 1e-5, "gamma[{idx}]");
        }
    }

    #[test]
    fn silu_gradcheck() {
        let x = rand_vec(13, 10);
        let dy = rand_vec(14, 10);
        let mut act = x.clone();
        let pre = silu_forward(&mut act);
        let mut dgot = dy.clone();
        silu_backward(&pre, &mut dgot);
        for i in 0..x.len() {
            let eps = 1e-6;
            let f = |v: f64| v * math::sigmoid(v) * dy[i];
            let fd = (f(x[i] + eps) - f(x[i] - eps)) / (2.0 * eps);
            assert!(rel_err(fd, dgot[i]) < 1e-6);
        }
    }

    #[test]
    fn pool_and_upsample_backward_are_adjoint() {
        // <pool(x), y> == <x, pool_backward(y)> for linear maps.
        let x = rand_vec(15, 2 * 4 * 4);
        let y = rand_vec(16, 2 * 2 * 2);
        let px = avg_pool2(&x, 2, 4, 4);
        let lhs: f64 = px.iter().zip(&y).map(|(a, b)| a * b).sum();
        let bty = avg_pool2_backward(&y, 2, 4, 4);
        let rhs: f64 = x.iter().zip(&bty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let x2 = rand_vec(17, 2 * 2 * 2);
        let y2 = rand_vec(18, 2 * 4 * 4);
        let ux = upsample2(&x2, 2, 2, 2);
        let lhs2: f64 = ux.iter().zip(&y2).map(|(a, b)| a * b).sum();
        let bty2 = upsample2_backward(&y2, 2, 2, 2);
        let rhs2: f64 = x2.iter().zip(&bty2).map(|(a, b)| a * b).sum();
        assert!((lhs2 - rhs2).abs() < 1e-10);
    }

    #[test]
    fn cross_attention_gradcheck() {
        let mut rng = CounterRng::new(20);
        let (n, m, c, dctx, dim) = (3, 4, 5, 6, 4);
        let mut attn = CrossAttention::new(&mut rng, c, dctx, dim);
        let x = rand_vec(21, n * c);
        let ctx = rand_vec(22, m * dctx);
        let dy = rand_vec(23, n * c);
        let loss = |attn: &CrossAttention, x: &[f64], ctx: &[f64]| -> f64 {
            attn.forward(x, n, ctx, m)
                .0
                .iter()
                .zip(&dy)
                .map(|(y, d)| y * d)
                .sum()
        };
        attn.zero_grads();
        let (_, cache) = attn.forward(&x, n, &ctx, m);
        let (dx, dctx_got) = attn.backward(&cache, &dy);
        // weight grads
        let grads: Vec<(usize, f64)> = attn
            .wq
            .w
            .grad
            .iter()
            .chain(&attn.wk.w.grad)
            .chain(&attn.wv.w.grad)
            .chain(&attn.wo.w.grad)
            .cloned()
            .enumerate()
            .collect();
        let mut flat_idx = 0;
        for which in 0..4 {
            let len = match which {
                0 => attn.wq.w.data.len(),
                1 => attn.wk.w.data.len(),
                2 => attn.wv.w.data.len(),
                _ => attn.wo.w.data.len(),
            };
            for idx in (0..len).step_by(3) {
                let mut probe = attn.clone();
                let p = match which {
                    0 => &mut probe.wq.w,
                    1 => &mut probe.wk.w,
                    2 => &mut probe.wv.w,
                    _ => &mut probe.wo.w,
                };
                let orig = p.data[idx];
                let eps = 1e-5;
                p.data[idx] = orig + eps;
                let hi = loss(&probe, &x, &ctx);
                let p = match which {
                    0 => &mut probe.wq.w,
                    1 => &mut probe.wk.w,
                    2 => &mut probe.wv.w,
                    _ => &mut probe.wo.w,
                };
                p.data[idx] = orig - eps;
                let lo = loss(&probe, &x, &ctx);
                let fd = (hi - lo) / (2.0 * eps);
                let got = grads[flat_idx + idx].1;
                assert!(rel_err(fd, got) < 1e-5, "which={which} idx={idx}");
            }
            flat_idx += len;
        }
        // input grads
        for idx in 0..x.len() {
            let mut x2 = x.clone();
            let eps = 1e-6;
            x2[idx] += eps;
            let hi = loss(&attn, &x2, &ctx);
            x2[idx] -= 2.0 * eps;
            let lo = loss(&attn, &x2, &ctx);
            let fd = (hi - lo) / (2.0 * eps);
            assert!(rel_err(fd, dx[idx]) < 1e-5, "x[{idx}]");
        }
        for idx in 0..ctx.len() {
            let mut c2 = ctx.clone();
            let eps = 1e-6;
            c2[idx] += eps;
            let hi = loss(&attn, &x, &c2);
            c2[idx] -= 2.0 * eps;
            let lo = loss(&attn, &x, &c2);
            let fd = (hi - lo) / (2.0 * eps);
            assert!(rel_err(fd, dctx_got[idx]) < 1e-5, "ctx[{idx}]");
        }
    }

    #[test]
    fn frozen_params_do_not_accumulate() {
        let mut rng = CounterRng::new(30);
        let mut layer = Linear::new(&mut rng, 3, 3, true);
        layer.set_requires_grad(false);
        let x = rand_vec(31, 2 * 3);
        let dy = rand_vec(32, 2 * 3);
        let dx = layer.backward(&x, &dy, 2);
        assert!(layer.w.grad.iter().all(|&g| g == 0.0));
        assert!(dx.iter().any(|&g| g != 0.0), "input grad still flows");
    }

    #[test]
    fn embedding_scatter_gradient() {
        let mut rng = CounterRng::new(33);
        let mut emb = Embedding::new(&mut rng, 5, 3);
        let ids = [1usize, 3, 1];
        let y = emb.forward(&ids);
        assert_eq!(y.len(), 9);
        let dy = rand_vec(34, 9);
        emb.zero_grads();
        emb.backward(&ids, &dy);
        // row 1 accumulates positions 0 and 2
        for d in 0..3 {
            let expect = dy[d] + dy[6 + d];
            assert!((emb.table.grad[3 + d] - expect).abs() < 1e-12);
        }
        // untouched rows stay zero
        for d in 0..3 {
            assert_eq!(emb.table.grad[d], 0.0);
            assert_eq!(emb.table.grad[2 * 3 + d], 0.0);
        }
    }
}
