//! Dual-branch injected attention.
//!
//! At the installed block the cross-attention output becomes
//!
//! ```text
//! Z_new = softmax(Q K_t^T / sqrt(d)) V_t + beta * softmax(Q K_h^T / sqrt(d)) V_h
//! ```
//!
//! where `Q = Z_t W_q` comes from the block's own (frozen) query map, the
//! text branch uses the block's frozen key/value maps, and the harmony
//! branch uses newly introduced trainable maps `W_k^h`, `W_v^h` that start
//! as copies of the frozen text maps. The sum then passes through the
//! block's frozen output map. Attention at the injection site is
//! single-headed.
//!
//! The harmony feature reaches this module through a frozen, bias-free
//! projection trained during stage-0 for visual conditioning
//! (`F_h' = F_h W_vc`); that projection lives on the model and is applied by
//! `project_harmony` before the branch maps.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::nn::{CrossAttention, Linear, Module, Param};
use crate::rng::CounterRng;
use crate::tensor::{matmul, matmul_at_acc, matmul_bt, softmax_rows};

/// Trainable key/value maps of the harmony branch at one block.
#[derive(Debug, Clone)]
pub struct HarmonyBranch {
    pub wk: Linear,
    pub wv: Linear,
}

impl HarmonyBranch {
    /// Initialize as copies of the frozen text-branch maps.
    pub fn from_text_branch(attn: &CrossAttention) -> Self {
        let mut wk = attn.wk.clone();
        let mut wv = attn.wv.clone();
        wk.w.requires_grad = true;
        wv.w.requires_grad = true;
        wk.w.zero_grad();
        wv.w.zero_grad();
        Self { wk, wv }
    }

    /// Independent initialization (used by tests).
    pub fn random(rng: &mut CounterRng, d_ctx: usize, dim: usize) -> Self {
        Self {
            wk: Linear::new(rng, d_ctx, dim, false),
            wv: Linear::new(rng, d_ctx, dim, false),
        }
    }
}

impl Module for HarmonyBranch {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.wk.visit_params(&alloc::format!("{prefix}.wk"), f);
        self.wv.visit_params(&alloc::format!("{prefix}.wv"), f);
    }
}

pub struct DualBranchCache {
    x: Vec<f64>,
    text: Vec<f64>,
    harm: Vec<f64>,
    q: Vec<f64>,
    kt: Vec<f64>,
    vt: Vec<f64>,
    kh: Vec<f64>,
    vh: Vec<f64>,
    probs_t: Vec<f64>,
    probs_h: Vec<f64>,
    summed: Vec<f64>,
    beta: f64,
    n: usize,
    m_t: usize,
    m_h: usize,
}

/// Forward pass of the dual-branch attention for one batch item.
///
/// `x` is `(n, c)` query tokens, `text` is `(m_t, d_ctx)` tokens for the
/// frozen branch, `harm` is `(m_h, d_ctx)` projected harmony tokens.
#[allow(clippy::too_many_arguments)]
pub fn dual_branch_forward(
    attn: &CrossAttention,
    branch: &HarmonyBranch,
    x: &[f64],
    n: usize,
    text: &[f64],
    m_t: usize,
    harm: &[f64],
    m_h: usize,
    beta: f64,
) -> (Vec<f64>, DualBranchCache) {
    let dim = attn.dim;
    let scale = 1.0 / math::sqrt(dim as f64);
    let q = attn.wq.forward(x, n);
    let kt = attn.wk.forward(text, m_t);
    let vt = attn.wv.forward(text, m_t);
    let kh = branch.wk.forward(harm, m_h);
    let vh = branch.wv.forward(harm, m_h);
    let attend = |k: &[f64], v: &[f64], m: usize| -> (Vec<f64>, Vec<f64>) {
        let mut s = vec![0.0; n * m];
        matmul_bt(&q, k, n, dim, m, &mut s);
        for x in s.iter_mut() {
            *x *= scale;
        }
        softmax_rows(&mut s, n, m);
        let mut o = vec![0.0; n * dim];
        matmul(&s, v, n, m, dim, &mut o);
        (o, s)
    };
    let (ot, probs_t) = attend(&kt, &vt, m_t);
    let (oh, probs_h) = attend(&kh, &vh, m_h);
    let mut summed = ot;
    for (a, b) in summed.iter_mut().zip(&oh) {
        *a += beta * b;
    }
    let y = attn.wo.forward(&summed, n);
    (
        y,
        DualBranchCache {
            x: x.to_vec(),
            text: text.to_vec(),
            harm: harm.to_vec(),
            q,
            kt,
            vt,
            kh,
            vh,
            probs_t,
            probs_h,
            summed,
            beta,
            n,
            m_t,
            m_h,
        },
    )
}

/// Shared-weight dual attention used during stage-0 visual conditioning:
/// both branches run through the block's own key/value maps, so those maps
/// train on visual tokens and later serve as the frozen projections
/// "originally used for visual conditioning".
pub fn dual_shared_forward(
    attn: &CrossAttention,
    x: &[f64],
    n: usize,
    text: &[f64],
    m_t: usize,
    vis: &[f64],
    m_v: usize,
) -> (Vec<f64>, DualBranchCache) {
    let shared = HarmonyBranch {
        wk: attn.wk.clone(),
        wv: attn.wv.clone(),
    };
    let (y, mut cache) = dual_branch_forward(attn, &shared, x, n, text, m_t, vis, m_v, 1.0);
    cache.beta = 1.0;
    (y, cache)
}

/// Backward for [`dual_shared_forward`]: visual-branch weight gradients
/// accumulate into the block's own key/value maps. Returns
/// `(dx, dtext, dvis)`.
pub fn dual_shared_backward(
    attn: &mut CrossAttention,
    cache: &DualBranchCache,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut shared = HarmonyBranch {
        wk: attn.wk.clone(),
        wv: attn.wv.clone(),
    };
    shared.wk.w.zero_grad();
    shared.wv.w.zero_grad();
    let (dx, dtext, dvis) = dual_branch_backward(attn, &mut shared, cache, dy);
    attn.wk.w.accumulate(|g| {
        for (a, b) in g.iter_mut().zip(&shared.wk.w.grad) {
            *a += b;
        }
    });
    attn.wv.w.accumulate(|g| {
        for (a, b) in g.iter_mut().zip(&shared.wv.w.grad) {
            *a += b;
        }
    });
    (dx, dtext, dvis)
}

/// Backward pass; accumulates into the frozen attention (no-ops when its
/// parameters are frozen) and the trainable branch. Returns
/// `(dx, dtext, dharm)`.
pub fn dual_branch_backward(
    attn: &mut CrossAttention,
    branch: &mut HarmonyBranch,
    cache: &DualBranchCache,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dim = attn.dim;
    let scale = 1.0 / math::sqrt(dim as f64);
    let (n, m_t, m_h) = (cache.n, cache.m_t, cache.m_h);
    let dsummed = attn.wo.backward(&cache.summed, dy, n);
    let mut dq_total = vec![0.0; n * dim];
    let branch_back = |dout_scale: f64,
                           probs: &[f64],
                           k: &[f64],
                           v: &[f64],
                           m: usize,
                           dq_total: &mut [f64]|
     -> (Vec<f64>, Vec<f64>) {
        let dbranch: Vec<f64> = dsummed.iter().map(|g| g * dout_scale).collect();
        let mut dprobs = vec![0.0; n * m];
        matmul_bt(&dbranch, v, n, dim, m, &mut dprobs);
        let mut dv = vec![0.0; m * dim];
        matmul_at_acc(probs, &dbranch, n, m, dim, &mut dv);
        let mut ds = vec![0.0; n * m];
        for r in 0..n {
            let p = &probs[r * m..(r + 1) * m];
            let dp = &dprobs[r * m..(r + 1) * m];
            let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
            for c in 0..m {
                ds[r * m + c] = p[c] * (dp[c] - dot) * scale;
            }
        }
        let mut dq = vec![0.0; n * dim];
        matmul(&ds, k, n, m, dim, &mut dq);
        for (a, b) in dq_total.iter_mut().zip(&dq) {
            *a += b;
        }
        let mut dk = vec![0.0; m * dim];
        matmul_at_acc(&ds, &cache.q, n, m, dim, &mut dk);
        (dk, dv)
    };
    let (dkt, dvt) = branch_back(1.0, &cache.probs_t, &cache.kt, &cache.vt, m_t, &mut dq_total);
    let (dkh, dvh) = branch_back(
        cache.beta,
        &cache.probs_h,
        &cache.kh,
        &cache.vh,
        m_h,
        &mut dq_total,
    );
    let dx = attn.wq.backward(&cache.x, &dq_total, n);
    let mut dtext = attn.wk.backward(&cache.text, &dkt, m_t);
    let dtext_v = attn.wv.backward(&cache.text, &dvt, m_t);
    for (a, b) in dtext.iter_mut().zip(&dtext_v) {
        *a += b;
    }
    let mut dharm = branch.wk.backward(&cache.harm, &dkh, m_h);
    let dharm_v = branch.wv.backward(&cache.harm, &dvh, m_h);
    for (a, b) in dharm.iter_mut().zip(&dharm_v) {
        *a += b;
    }
    (dx, dtext, dharm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn rand_vec(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = CounterRng::new(seed);
        (0..len).map(|_| rng.next_gaussian()).collect()
    }

    fn setup() -> (CrossAttention, HarmonyBranch) {
        let mut rng = CounterRng::new(1);
        let attn = CrossAttention::new(&mut rng, 5, 6, 4);
        let branch = HarmonyBranch::random(&mut rng, 6, 4);
        (attn, branch)
    }

    #[test]
    fn beta_zero_equals_text_branch_alone() {
        let (attn, branch) = setup();
        let (n, m_t, m_h) = (3, 2, 4);
        let x = rand_vec(2, n * 5);
        let text = rand_vec(3, m_t * 6);
        let harm = rand_vec(4, m_h * 6);
        let (dual, _) = dual_branch_forward(&attn, &branch, &x, n, &text, m_t, &harm, m_h, 0.0);
        let (plain, _) = attn.forward(&x, n, &text, m_t);
        for (a, b) in dual.iter().zip(&plain) {
            assert_eq!(a, b, "beta=0 must reduce exactly");
        }
    }

    #[test]
    fn single_text_token_saturates_text_softmax() {
        let (attn, branch) = setup();
        let (n, m_h) = (3, 2);
        let x = rand_vec(5, n * 5);
        let text = rand_vec(6, 6);
        let harm = rand_vec(7, m_h * 6);
        let (_, cache) = dual_branch_forward(&attn, &branch, &x, n, &text, 1, &harm, m_h, 1.0);
        for r in 0..n {
            assert_eq!(cache.probs_t[r], 1.0);
        }
    }

    #[test]
    fn beta_linearity() {
        let (attn, branch) = setup();
        let (n, m_t, m_h) = (2, 3, 3);
        let x = rand_vec(8, n * 5);
        let text = rand_vec(9, m_t * 6);
        let harm = rand_vec(10, m_h * 6);
        let at =
            |beta: f64| dual_branch_forward(&attn, &branch, &x, n, &text, m_t, &harm, m_h, beta).0;
        let y0 = at(0.0);
        let y1 = at(1.0);
        let y2 = at(2.0);
        for i in 0..y0.len() {
            let d1 = y1[i] - y0[i];
            let d2 = y2[i] - y0[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-6, "index {i}");
        }
    }

    #[test]
    fn matches_two_branch_scalar_oracle() {
        let (attn, branch) = setup();
        let (n, m_t, m_h, c, dctx, dim) = (2, 3, 2, 5, 6, 4);
        let x = rand_vec(11, n * c);
        let text = rand_vec(12, m_t * dctx);
        let harm = rand_vec(13, m_h * dctx);
        let beta = 0.7;
        let (got, _) = dual_branch_forward(&attn, &branch, &x, n, &text, m_t, &harm, m_h, beta);
        // scalar oracle: explicit projections and softmax per branch
        let lin = |x: &[f64], rows: usize, din: usize, w: &crate::nn::Linear| -> Vec<f64> {
            let mut y = vec![0.0; rows * w.d_out];
            for i in 0..rows {
                for o in 0..w.d_out {
                    for p in 0..din {
                        y[i * w.d_out + o] += x[i * din + p] * w.w.data[o * din + p];
                    }
                }
            }
            y
        };
        let q = lin(&x, n, c, &attn.wq);
        let kt = lin(&text, m_t, dctx, &attn.wk);
        let vt = lin(&text, m_t, dctx, &attn.wv);
        let kh = lin(&harm, m_h, dctx, &branch.wk);
        let vh = lin(&harm, m_h, dctx, &branch.wv);
        let soft_attend = |k: &[f64], v: &[f64], m: usize| -> Vec<f64> {
            let mut out = vec![0.0; n * dim];
            for i in 0..n {
                let mut s = vec![0.0; m];
                for (j, sj) in s.iter_mut().enumerate() {
                    for p in 0..dim {
                        *sj += q[i * dim + p] * k[j * dim + p];
                    }
                    *sj /= (dim as f64).sqrt();
                }
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for p in 0..dim {
                    for j in 0..m {
                        out[i * dim + p] += e[j] / z * v[j * dim + p];
                    }
                }
            }
            out
        };
        let ot = soft_attend(&kt, &vt, m_t);
        let oh = soft_attend(&kh, &vh, m_h);
        let mut z = vec![0.0; n * dim];
        for i in 0..z.len() {
            z[i] = ot[i] + beta * oh[i];
        }
        let expect = lin(&z, n, dim, &attn.wo);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn branch_from_text_starts_as_copy() {
        let (attn, _) = setup();
        let branch = HarmonyBranch::from_text_branch(&attn);
        assert_eq!(branch.wk.w.data, attn.wk.w.data);
        assert_eq!(branch.wv.w.data, attn.wv.w.data);
        assert!(branch.wk.w.requires_grad);
    }

    #[test]
    fn gradcheck_trainable_and_inputs() {
        let (mut attn, mut branch) = setup();
        // emulate the adapter stage: frozen attention, trainable branch
        attn.set_requires_grad(false);
        let (n, m_t, m_h) = (2, 2, 3);
        let x = rand_vec(14, n * 5);
        let text = rand_vec(15, m_t * 6);
        let harm = rand_vec(16, m_h * 6);
        let dy = rand_vec(17, n * 5);
        let beta = 0.6;
        let loss = |attn: &CrossAttention, branch: &HarmonyBranch, harm: &[f64]| -> f64 {
            dual_branch_forward(attn, branch, &x, n, &text, m_t, harm, m_h, beta)
                .0
                .iter()
                .zip(&dy)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, cache) = dual_branch_forward(&attn, &branch, &x, n, &text, m_t, &harm, m_h, beta);
        branch.zero_grads();
        let (_, _, dharm) = dual_branch_backward(&mut attn, &mut branch, &cache, &dy);
        // frozen text-branch weights receive nothing
        assert!(attn.wk.w.grad.iter().all(|&g| g == 0.0));
        assert!(attn.wq.w.grad.iter().all(|&g| g == 0.0));
        // trainable branch weights match finite differences
        for idx in 0..branch.wk.w.data.len() {
            let fd = crate::nn::tests::fd_param(&branch, |b| &mut b.wk.w, idx, |b| {
                loss(&attn, b, &harm)
            });
            assert!(
                crate::nn::tests::rel_err(fd, branch.wk.w.grad[idx]) < 1e-5,
                "wk[{idx}]"
            );
        }
        for idx in 0..branch.wv.w.data.len() {
            let fd = crate::nn::tests::fd_param(&branch, |b| &mut b.wv.w, idx, |b| {
                loss(&attn, b, &harm)
            });
            assert!(
                crate::nn::tests::rel_err(fd, branch.wv.w.grad[idx]) < 1e-5,
                "wv[{idx}]"
            );
        }
        // input gradient of the harmony tokens
        for idx in 0..harm.len() {
            let mut h2 = harm.clone();
            let eps = 1e-6;
            h2[idx] += eps;
            let hi = loss(&attn, &branch, &h2);
            h2[idx] -= 2.0 * eps;
            let lo = loss(&attn, &branch, &h2);
            let fd = (hi - lo) / (2.0 * eps);
            assert!(
                crate::nn::tests::rel_err(fd, dharm[idx]) < 1e-5,
                "harm[{idx}]"
            );
        }
    }
}
