//! The toy denoising backbone: four down blocks, a mid block, and four up
//! blocks with skip connections, each block two convolutions plus one
//! cross-attention layer over text tokens. Pixel-space, square images.
//!
//! The model owns its encoders, the visual-conditioning projection, the
//! noise schedule, and (once installed) the harmony attention and the
//! injected branch weights. Inference is pure given fixed weights; the
//! training entry points live in [`crate::train`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{BlockSite, HarmonyConfig, InjectMode};
use crate::encoders::{ImageEncoder, TextEncoder, Vocabulary};
use crate::error::{HarmonyError, Result};
use crate::harmony::HarmonyAttention;
use crate::inject::{
    dual_branch_backward, dual_branch_forward, dual_shared_backward, dual_shared_forward,
    DualBranchCache, HarmonyBranch,
};
use crate::math;
use crate::nn::{
    avg_pool2, avg_pool2_backward, silu_backward, silu_forward, upsample2, upsample2_backward,
    Conv2d, CrossAttention, CrossAttentionCache, GroupNorm, GroupNormCache, Linear, Module, Param,
};
use crate::require;
use crate::rng::{substream, CounterRng};
use crate::schedule::NoiseSchedule;
use crate::tensor::FeatureMap;
use crate::tensor::LatentImage;

/// Predicted noise; same shape as the latent it was predicted for.
pub type DenoiserOutput = LatentImage;

const NOISE_SALT: u64 = 0x4E4F4953;

// ---------------------------------------------------------------------------
// Block
// ---------------------------------------------------------------------------

struct BlockSpec {
    site: BlockSite,
    c_in: usize,
    c_out: usize,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub site: BlockSite,
    pub conv1: Conv2d,
    pub gn1: GroupNorm,
    pub tproj: Linear,
    pub conv2: Conv2d,
    pub gn2: GroupNorm,
    pub attn: CrossAttention,
    /// Present when the dual-branch attention is installed at this block.
    pub branch: Option<HarmonyBranch>,
}

enum AttnCacheKind {
    Plain(Vec<CrossAttentionCache>),
    Dual(Vec<DualBranchCache>),
    /// Stage-0 visual conditioning: both branches share the block's maps.
    SharedDual(Vec<DualBranchCache>),
}

pub struct BlockCache {
    x_in: Vec<f64>,
    gn1: GroupNormCache,
    silu1_pre: Vec<f64>,
    conv2_in: Vec<f64>,
    gn2: GroupNormCache,
    silu2_pre: Vec<f64>,
    attn: AttnCacheKind,
    h: usize,
    w: usize,
    bsz: usize,
}

/// `(c, hw)` plane stack to `(hw, c)` token rows.
fn plane_to_tokens(x: &[f64], c: usize, hw: usize, out: &mut [f64]) {
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = x[ch * hw + p];
        }
    }
}

fn tokens_to_plane(x: &[f64], c: usize, hw: usize, out: &mut [f64]) {
    for ch in 0..c {
        for p in 0..hw {
            out[ch * hw + p] = x[p * c + ch];
        }
    }
}

impl Block {
    fn new(rng: &mut CounterRng, spec: &BlockSpec, cfg: &HarmonyConfig) -> Self {
        Self {
            site: spec.site,
            conv1: Conv2d::new(rng, spec.c_in, spec.c_out, 3, 1, 1),
            gn1: GroupNorm::new(spec.c_out, GroupNorm::auto_groups(spec.c_out)),
            tproj: Linear::new(rng, cfg.time_dim, spec.c_out, true),
            conv2: Conv2d::new(rng, spec.c_out, spec.c_out, 3, 1, 1),
            gn2: GroupNorm::new(spec.c_out, GroupNorm::auto_groups(spec.c_out)),
            attn: CrossAttention::new(rng, spec.c_out, cfg.d_t, cfg.attn_dim),
            branch: None,
        }
    }

    /// Context for the attention layer: plain blocks attend `ctx`; a block
    /// with an installed branch runs the dual-branch form, with its text
    /// side on `text_branch_ctx` and the harmony side on `harm`; during
    /// stage-0 visual conditioning (`vis` present, no branch) the block's
    /// own maps serve both branches. `temb` is per item, `(bsz, time_dim)`.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        x: &[f64],
        bsz: usize,
        h: usize,
        w: usize,
        temb: &[f64],
        ctx: &FeatureMap,
        text_branch_ctx: &FeatureMap,
        harm: Option<&FeatureMap>,
        beta: f64,
        vis: Option<&FeatureMap>,
    ) -> (Vec<f64>, BlockCache) {
        let c = self.conv1.c_out;
        let hw = h * w;
        let mut act = self.conv1.forward(x, bsz, h, w);
        let (gn1_out, gn1) = self.gn1.forward(&act, bsz, hw);
        act = gn1_out;
        let tshift = self.tproj.forward(temb, bsz);
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let s = tshift[b * c + ch];
                for v in act[base..base + hw].iter_mut() {
                    *v += s;
                }
            }
        }
        let silu1_pre = silu_forward(&mut act);
        let conv2_in = act.clone();
        let mut act2 = self.conv2.forward(&act, bsz, h, w);
        let (gn2_out, gn2) = self.gn2.forward(&act2, bsz, hw);
        act2 = gn2_out;
        let silu2_pre = silu_forward(&mut act2);
        // attention with residual
        let mut tokens = vec![0.0; bsz * hw * c];
        for b in 0..bsz {
            plane_to_tokens(
                &act2[b * c * hw..(b + 1) * c * hw],
                c,
                hw,
                &mut tokens[b * hw * c..(b + 1) * hw * c],
            );
        }
        let mut out = act2.clone();
        let attn_cache = match (&self.branch, harm) {
            (Some(branch), Some(fh)) => {
                let mut caches = Vec::with_capacity(bsz);
                for b in 0..bsz {
                    let (y, cache) = dual_branch_forward(
                        &self.attn,
                        branch,
                        &tokens[b * hw * c..(b + 1) * hw * c],
                        hw,
                        text_branch_ctx.tokens(b.min(text_branch_ctx.b - 1)),
                        text_branch_ctx.n,
                        fh.tokens(b.min(fh.b - 1)),
                        fh.n,
                        beta,
                    );
                    let mut plane = vec![0.0; c * hw];
                    tokens_to_plane(&y, c, hw, &mut plane);
                    for (o, a) in out[b * c * hw..(b + 1) * c * hw].iter_mut().zip(&plane) {
                        *o += a;
                    }
                    caches.push(cache);
                }
                AttnCacheKind::Dual(caches)
            }
            (None, _) if vis.is_some() => {
                let vis = vis.unwrap();
                let mut caches = Vec::with_capacity(bsz);
                for b in 0..bsz {
                    let (y, cache) = dual_shared_forward(
                        &self.attn,
                        &tokens[b * hw * c..(b + 1) * hw * c],
                        hw,
                        ctx.tokens(b.min(ctx.b - 1)),
                        ctx.n,
                        vis.tokens(b.min(vis.b - 1)),
                        vis.n,
                    );
                    let mut plane = vec![0.0; c * hw];
                    tokens_to_plane(&y, c, hw, &mut plane);
                    for (o, a) in out[b * c * hw..(b + 1) * c * hw].iter_mut().zip(&plane) {
                        *o += a;
                    }
                    caches.push(cache);
                }
                AttnCacheKind::SharedDual(caches)
            }
            (Some(_), None) | (None, _) => {
                // An installed block with no harmony runs its text branch
                // alone, which is exactly the beta = 0 reduction.
                let attend_ctx = if self.branch.is_some() {
                    text_branch_ctx
                } else {
                    ctx
                };
                let mut caches = Vec::with_capacity(bsz);
                for b in 0..bsz {
                    let (y, cache) = self.attn.forward(
                        &tokens[b * hw * c..(b + 1) * hw * c],
                        hw,
                        attend_ctx.tokens(b.min(attend_ctx.b - 1)),
                        attend_ctx.n,
                    );
                    let mut plane = vec![0.0; c * hw];
                    tokens_to_plane(&y, c, hw, &mut plane);
                    for (o, a) in out[b * c * hw..(b + 1) * c * hw].iter_mut().zip(&plane) {
                        *o += a;
                    }
                    caches.push(cache);
                }
                AttnCacheKind::Plain(caches)
            }
        };
        (
            out,
            BlockCache {
                x_in: x.to_vec(),
                gn1,
                silu1_pre,
                conv2_in,
                gn2,
                silu2_pre,
                attn: attn_cache,
                h,
                w,
                bsz,
            },
        )
    }

    /// Returns `(dx, dctx, dtext_branch_ctx, dharm, dvis, dtemb)`; context
    /// gradients are dense over the tokens this block consumed.
    #[allow(clippy::type_complexity)]
    fn backward(
        &mut self,
        cache: &BlockCache,
        dy: &[f64],
        temb: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = self.conv1.c_out;
        let (h, w, bsz) = (cache.h, cache.w, cache.bsz);
        let hw = h * w;
        // residual: dy feeds both the attention output and act2 directly
        let mut dact2 = dy.to_vec();
        let mut dctx = Vec::new();
        let mut dtext = Vec::new();
        let mut dharm = Vec::new();
        let mut dvis = Vec::new();
        match &cache.attn {
            AttnCacheKind::Plain(caches) => {
                for (b, icache) in caches.iter().enumerate() {
                    let mut dtok = vec![0.0; hw * c];
                    plane_to_tokens(&dy[b * c * hw..(b + 1) * c * hw], c, hw, &mut dtok);
                    let (dx_tok, dctx_b) = self.attn.backward(icache, &dtok);
                    let mut dplane = vec![0.0; c * hw];
                    tokens_to_plane(&dx_tok, c, hw, &mut dplane);
                    for (o, a) in dact2[b * c * hw..(b + 1) * c * hw].iter_mut().zip(&dplane) {
                        *o += a;
                    }
                    if self.branch.is_some() {
                        dtext.extend_from_slice(&dctx_b);
                    } else {
                        dctx.extend_from_slice(&dctx_b);
                    }
                }
            }
            AttnCacheKind::Dual(caches) => {
                let branch = self.branch.as_mut().expect("dual cache requires branch");
                for (b, icache) in caches.iter().enumerate() {
                    let mut dtok = vec![0.0; hw * c];
                    plane_to_tokens(&dy[b * c * hw..(b + 1) * c * hw], c, hw, &mut dtok);
                    let (dx_tok, dtext_b, dharm_b) =
                        dual_branch_backward(&mut self.attn, branch, icache, &dtok);
                    let mut dplane = vec![0.0; c * hw];
                    tokens_to_plane(&dx_tok, c, hw, &mut dplane);
                    for (o, a) in dact2[b * c * hw..(b + 1) * c * hw].iter_mut().zip(&dplane) {
                        *o += a;
                    }
                    dtext.extend_from_slice(&dtext_b);
                    dharm.extend_from_slice(&dharm_b);
                }
            }
            AttnCacheKind::SharedDual(caches) => {
                for (b, icache) in caches.iter().enumerate() {
                    let mut dtok = vec![0.0; hw * c];
                    plane_to_tokens(&dy[b * c * hw..(b + 1) * c * hw], c, hw, &mut dtok);
                    let (dx_tok, dctx_b, dvis_b) =
                        dual_shared_backward(&mut self.attn, icache, &dtok);
                    let mut dplane = vec![0.0; c * hw];
                    tokens_to_plane(&dx_tok, c, hw, &mut dplane);
                    for (o, a) in dact2[b * c * hw..(b + 1) * c * hw].iter_mut().zip(&dplane) {
                        *o += a;
                    }
                    dctx.extend_from_slice(&dctx_b);
                    dvis.extend_from_slice(&dvis_b);
                }
            }
        }
        silu_backward(&cache.silu2_pre, &mut dact2);
        let dconv2_out = self.gn2.backward(&cache.gn2, &dact2, bsz, hw);
        let mut dact1 = self.conv2.backward(&cache.conv2_in, &dconv2_out, bsz, h, w);
        silu_backward(&cache.silu1_pre, &mut dact1);
        // time shift: per-item per-channel sums feed the projection backward
        let mut dshift = vec![0.0; bsz * c];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                dshift[b * c + ch] = dact1[base..base + hw].iter().sum::<f64>();
            }
        }
        let dtemb = self.tproj.backward(temb, &dshift, bsz);
        let dgn1_out = dact1;
        let dconv1_out = self.gn1.backward(&cache.gn1, &dgn1_out, bsz, hw);
        let dx = self.conv1.backward(&cache.x_in, &dconv1_out, bsz, h, w);
        (dx, dctx, dtext, dharm, dvis, dtemb)
    }
}

impl Module for Block {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&alloc::format!("{prefix}.conv1"), f);
        self.gn1.visit_params(&alloc::format!("{prefix}.gn1"), f);
        self.tproj.visit_params(&alloc::format!("{prefix}.tproj"), f);
        self.conv2.visit_params(&alloc::format!("{prefix}.conv2"), f);
        self.gn2.visit_params(&alloc::format!("{prefix}.gn2"), f);
        self.attn.visit_params(&alloc::format!("{prefix}.attn"), f);
        if let Some(branch) = &mut self.branch {
            branch.visit_params(&alloc::format!("{prefix}.branch"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct ToyModel {
    pub cfg: HarmonyConfig,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    /// Frozen after stage-0; maps harmony features into the text space
    /// consumed by attention key/value maps (`F_h' = F_h W_vc`).
    pub visual_proj: Linear,
    pub time_l1: Linear,
    pub time_l2: Linear,
    /// Mean-pooled context tokens enter the time embedding through this
    /// map, giving captions a global conditioning pathway.
    pub text_pool: Linear,
    pub blocks: Vec<Block>,
    pub head: Conv2d,
    pub ha: Option<HarmonyAttention>,
    pub schedule: NoiseSchedule,
}

pub struct ModelCache {
    block_caches: Vec<BlockCache>,
    pooled_dims: Vec<(usize, usize)>,
    temb_sin: Vec<f64>,
    temb_mid_pre: Vec<f64>,
    temb_mid: Vec<f64>,
    /// Per-item final time embedding, `(bsz, time_dim)`.
    temb: Vec<f64>,
    /// Mean-pooled context tokens, `(bsz, d_t)`.
    ctx_pooled: Vec<f64>,
    ctx_n: usize,
    head_in: Vec<f64>,
    bsz: usize,
}

impl ToyModel {
    pub fn new(cfg: &HarmonyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::new();
        let mut rng = CounterRng::new(substream(seed, 0x4D4F44454C));
        let ch = &cfg.hidden;
        let specs = [
            BlockSpec { site: BlockSite::D1, c_in: cfg.channels + 2, c_out: ch[0] },
            BlockSpec { site: BlockSite::D2, c_in: ch[0], c_out: ch[1] },
            BlockSpec { site: BlockSite::D3, c_in: ch[1], c_out: ch[2] },
            BlockSpec { site: BlockSite::D4, c_in: ch[2], c_out: ch[3] },
            BlockSpec { site: BlockSite::M, c_in: ch[3], c_out: ch[3] },
            BlockSpec { site: BlockSite::U4, c_in: ch[3] + ch[3], c_out: ch[3] },
            BlockSpec { site: BlockSite::U3, c_in: ch[3] + ch[2], c_out: ch[2] },
            BlockSpec { site: BlockSite::U2, c_in: ch[2] + ch[1], c_out: ch[1] },
            BlockSpec { site: BlockSite::U1, c_in: ch[1] + ch[0], c_out: ch[0] },
        ];
        let blocks = specs.iter().map(|s| Block::new(&mut rng, s, cfg)).collect();
        // zero-initialized head: the first prediction is the noise mean
        let mut head = Conv2d::new(&mut rng, cfg.hidden[0], cfg.channels, 3, 1, 1);
        head.w.data.fill(0.0);
        Ok(Self {
            text: TextEncoder::new(&mut rng, vocab.len(), cfg.d_t),
            image: ImageEncoder::new(&mut rng, cfg.channels, cfg.image_size, cfg.patch, cfg.d_v),
            visual_proj: Linear::new(&mut rng, cfg.d_v, cfg.d_t, false),
            time_l1: Linear::new(&mut rng, cfg.time_dim, cfg.time_dim, true),
            time_l2: Linear::new(&mut rng, cfg.time_dim, cfg.time_dim, true),
            text_pool: Linear::new(&mut rng, cfg.d_t, cfg.time_dim, false),
            blocks,
            head,
            ha: None,
            schedule: NoiseSchedule::cosine(cfg.total_steps, cfg.full_steps)?,
            vocab,
            cfg: cfg.clone(),
        })
    }

    /// Install the dual-branch attention per the model configuration:
    /// at the single configured site, or at every block for whole-image
    /// injection. Creates the harmony attention module when enabled.
    /// Installing twice is a configuration error.
    pub fn install_adapter(&mut self, seed: u64) -> Result<()> {
        if self.blocks.iter().any(|b| b.branch.is_some()) {
            return Err(HarmonyError::Config(String::from(
                "adapter already installed; single-site contract forbids a second install",
            )));
        }
        match self.cfg.inject_mode {
            InjectMode::Site => {
                let site = self.cfg.inject_site;
                let block = self
                    .blocks
                    .iter_mut()
                    .find(|b| b.site == site)
                    .ok_or_else(|| {
                        HarmonyError::Config(alloc::format!("unknown site {}", site.name()))
                    })?;
                block.branch = Some(HarmonyBranch::from_text_branch(&block.attn));
            }
            InjectMode::Whole => {
                for block in self.blocks.iter_mut() {
                    block.branch = Some(HarmonyBranch::from_text_branch(&block.attn));
                }
            }
        }
        if self.cfg.use_ha {
            let mut rng = CounterRng::new(substream(seed, 0x4841));
            self.ha = Some(HarmonyAttention::new(
                &mut rng,
                self.cfg.d_v,
                self.cfg.d_t,
                self.cfg.heads,
            )?);
        }
        Ok(())
    }

    pub fn adapter_installed(&self) -> bool {
        self.blocks.iter().any(|b| b.branch.is_some())
    }

    /// Frozen projection of the harmony feature into the attention context
    /// space: `F_h' = F_h W_vc` (bias-free).
    pub fn project_harmony(&self, f_h: &FeatureMap) -> Result<FeatureMap> {
        require!(
            f_h.d == self.cfg.d_v,
            "harmony feature dim {} does not match d_v {}",
            f_h.d,
            self.cfg.d_v
        );
        let mut out = FeatureMap::zeros(f_h.b, f_h.n, self.cfg.d_t);
        for b in 0..f_h.b {
            let y = self.visual_proj.forward(f_h.tokens(b), f_h.n);
            out.tokens_mut(b).copy_from_slice(&y);
        }
        Ok(out)
    }

    /// Harmony feature for a (visual, auxiliary-text) pair. Applies the
    /// harmony attention when enabled, otherwise passes the visual tokens
    /// straight through (the refinement-bypassed ablations).
    pub fn make_harmony(&self, f_v: &FeatureMap, f_a: &FeatureMap) -> Result<FeatureMap> {
        match (&self.ha, self.cfg.use_ha) {
            (Some(ha), true) => ha.forward(f_v, f_a, self.cfg.alpha),
            _ => Ok(f_v.clone()),
        }
    }

    fn sinusoid(&self, t: usize) -> Vec<f64> {
        let dim = self.cfg.time_dim;
        let half = dim / 2;
        let mut out = vec![0.0; dim];
        for i in 0..half {
            let freq = math::exp(-math::ln(10000.0) * i as f64 / half as f64);
            out[2 * i] = math::sin(t as f64 * freq);
            out[2 * i + 1] = math::cos(t as f64 * freq);
        }
        out
    }

    fn coord_planes(&self, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = x as f64 / (w - 1) as f64 * 2.0 - 1.0;
                out[h * w + y * w + x] = y as f64 / (h - 1) as f64 * 2.0 - 1.0;
            }
        }
        out
    }

    /// Run the backbone. `ctx` conditions every plain block (cross-attention
    /// plus a mean-pooled contribution to the time embedding); blocks with
    /// an installed branch put their frozen text side on the null prompt and
    /// their harmony side on `f_h_prime` (when present) scaled by `beta`.
    /// `vis` is the stage-0 visual-conditioning pathway: projected image
    /// tokens attended through each block's own maps.
    pub fn forward_ctx(
        &self,
        x_t: &LatentImage,
        t: usize,
        ctx: &FeatureMap,
        f_h_prime: Option<&FeatureMap>,
        beta: f64,
        vis: Option<&FeatureMap>,
    ) -> Result<(DenoiserOutput, ModelCache)> {
        require!(
            x_t.h == x_t.w && x_t.h == self.cfg.image_size,
            "latent size ({}, {}) does not match configured {}",
            x_t.h,
            x_t.w,
            self.cfg.image_size
        );
        require!(
            t < self.cfg.total_steps,
            "step {t} out of range 0..{}",
            self.cfg.total_steps
        );
        require!(ctx.d == self.cfg.d_t, "context dim {} != d_t", ctx.d);
        if !x_t.all_finite() || !ctx.all_finite() {
            return Err(HarmonyError::NonFinite {
                context: String::from("backbone inputs"),
            });
        }
        let bsz = x_t.b;
        let (h0, w0) = (x_t.h, x_t.w);
        let null_ctx = self.text.null_features();
        // time embedding MLP plus the pooled-text contribution, per item
        let temb_sin = self.sinusoid(t);
        let mut mid = self.time_l1.forward(&temb_sin, 1);
        let temb_mid_pre = silu_forward(&mut mid);
        let temb_mid = mid.clone();
        let temb_base = self.time_l2.forward(&mid, 1);
        let mut ctx_pooled = vec![0.0; bsz * self.cfg.d_t];
        for b in 0..bsz {
            let toks = ctx.tokens(b);
            let pooled = &mut ctx_pooled[b * self.cfg.d_t..(b + 1) * self.cfg.d_t];
            for row in toks.chunks(self.cfg.d_t) {
                for (p, v) in pooled.iter_mut().zip(row) {
                    *p += v / ctx.n as f64;
                }
            }
        }
        let pooled_shift = self.text_pool.forward(&ctx_pooled, bsz);
        let mut temb = vec![0.0; bsz * self.cfg.time_dim];
        for b in 0..bsz {
            for d in 0..self.cfg.time_dim {
                temb[b * self.cfg.time_dim + d] =
                    temb_base[d] + pooled_shift[b * self.cfg.time_dim + d];
            }
        }
        // input with coordinate planes
        let coords = self.coord_planes(h0, w0);
        let cin = self.cfg.channels + 2;
        let mut x = vec![0.0; bsz * cin * h0 * w0];
        for b in 0..bsz {
            let dst = &mut x[b * cin * h0 * w0..];
            dst[..self.cfg.channels * h0 * w0]
                .copy_from_slice(&x_t.data[b * self.cfg.channels * h0 * w0..][..self.cfg.channels * h0 * w0]);
            dst[self.cfg.channels * h0 * w0..cin * h0 * w0].copy_from_slice(&coords);
        }
        let mut block_caches = Vec::with_capacity(9);
        let mut pooled_dims = Vec::new();
        // Stage-0 visual conditioning runs only at the configured injection
        // site, so that pathway stays load-bearing there and matches the
        // topology the installed branch will have.
        let run = |model: &Self, idx: usize, x: &[f64], h: usize, w: usize| {
            let vis_here = if model.blocks[idx].site == model.cfg.inject_site {
                vis
            } else {
                None
            };
            model.blocks[idx].forward(
                x,
                bsz,
                h,
                w,
                &temb,
                ctx,
                &null_ctx,
                f_h_prime,
                beta,
                vis_here,
            )
        };
        // down path
        let (d1, c1) = run(self, 0, &x, h0, w0);
        block_caches.push(c1);
        let p1 = avg_pool2(&d1, bsz * self.cfg.hidden[0], h0, w0);
        pooled_dims.push((h0, w0));
        let (h1, w1) = (h0 / 2, w0 / 2);
        let (d2, c2) = run(self, 1, &p1, h1, w1);
        block_caches.push(c2);
        let p2 = avg_pool2(&d2, bsz * self.cfg.hidden[1], h1, w1);
        pooled_dims.push((h1, w1));
        let (h2, w2) = (h1 / 2, w1 / 2);
        let (d3, c3) = run(self, 2, &p2, h2, w2);
        block_caches.push(c3);
        let p3 = avg_pool2(&d3, bsz * self.cfg.hidden[2], h2, w2);
        pooled_dims.push((h2, w2));
        let (h3, w3) = (h2 / 2, w2 / 2);
        let (d4, c4) = run(self, 3, &p3, h3, w3);
        block_caches.push(c4);
        let p4 = avg_pool2(&d4, bsz * self.cfg.hidden[3], h3, w3);
        pooled_dims.push((h3, w3));
        let (h4, w4) = (h3 / 2, w3 / 2);
        let (m, cm) = run(self, 4, &p4, h4, w4);
        block_caches.push(cm);
        // up path
        let um = upsample2(&m, bsz * self.cfg.hidden[3], h4, w4);
        let cat4 = concat_channels(&um, &d4, bsz, self.cfg.hidden[3], self.cfg.hidden[3], h3 * w3);
        let (u4, cu4) = run(self, 5, &cat4, h3, w3);
        block_caches.push(cu4);
        let uu4 = upsample2(&u4, bsz * self.cfg.hidden[3], h3, w3);
        let cat3 = concat_channels(&uu4, &d3, bsz, self.cfg.hidden[3], self.cfg.hidden[2], h2 * w2);
        let (u3, cu3) = run(self, 6, &cat3, h2, w2);
        block_caches.push(cu3);
        let uu3 = upsample2(&u3, bsz * self.cfg.hidden[2], h2, w2);
        let cat2 = concat_channels(&uu3, &d2, bsz, self.cfg.hidden[2], self.cfg.hidden[1], h1 * w1);
        let (u2, cu2) = run(self, 7, &cat2, h1, w1);
        block_caches.push(cu2);
        let uu2 = upsample2(&u2, bsz * self.cfg.hidden[1], h1, w1);
        let cat1 = concat_channels(&uu2, &d1, bsz, self.cfg.hidden[1], self.cfg.hidden[0], h0 * w0);
        let (u1, cu1) = run(self, 8, &cat1, h0, w0);
        block_caches.push(cu1);
        let eps = self.head.forward(&u1, bsz, h0, w0);
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(HarmonyError::NonFinite {
                context: String::from("predicted noise"),
            });
        }
        let out = LatentImage::from_vec(eps, bsz, self.cfg.channels, h0, w0)?;
        Ok((
            out,
            ModelCache {
                block_caches,
                pooled_dims,
                temb_sin,
                temb_mid_pre,
                temb_mid,
                temb,
                ctx_pooled,
                ctx_n: ctx.n,
                head_in: u1,
                bsz,
            },
        ))
    }

    /// Gradients flowing out of a training backward pass, for the caller to
    /// route into encoder backward passes: `(dctx, dvis, dharm_prime)`.
    #[allow(clippy::type_complexity)]
    pub fn backward_ctx(
        &mut self,
        cache: &ModelCache,
        d_eps: &LatentImage,
    ) -> (FeatureMap, Option<FeatureMap>, Option<FeatureMap>) {
        let bsz = cache.bsz;
        let ch = self.cfg.hidden.clone();
        let (h0, w0) = cache.pooled_dims[0];
        let (h1, w1) = cache.pooled_dims[1];
        let (h2, w2) = cache.pooled_dims[2];
        let (h3, w3) = cache.pooled_dims[3];
        let (h4, w4) = (h3 / 2, w3 / 2);
        let du1 = self.head.backward(&cache.head_in, &d_eps.data, bsz, h0, w0);
        let mut dtemb_total = vec![0.0; bsz * self.cfg.time_dim];
        let mut dctx_total: Option<Vec<f64>> = None;
        let mut dharm_total: Option<Vec<f64>> = None;
        let mut dvis_total: Option<Vec<f64>> = None;
        let temb = cache.temb.clone();
        let back_block = |model: &mut Self,
                              idx: usize,
                              dy: &[f64],
                              dtemb_total: &mut Vec<f64>,
                              dctx_total: &mut Option<Vec<f64>>,
                              dharm_total: &mut Option<Vec<f64>>,
                              dvis_total: &mut Option<Vec<f64>>|
         -> Vec<f64> {
            let bc = &cache.block_caches[idx];
            let (dx, dctx, _dnull, dharm, dvis, dtemb) =
                model.blocks[idx].backward(bc, dy, &temb);
            add_into(dtemb_total, &dtemb);
            if !dctx.is_empty() {
                match dctx_total {
                    Some(tot) => add_into(tot, &dctx),
                    None => *dctx_total = Some(dctx),
                }
            }
            if !dharm.is_empty() {
                match dharm_total {
                    Some(tot) => add_into(tot, &dharm),
                    None => *dharm_total = Some(dharm),
                }
            }
            if !dvis.is_empty() {
                match dvis_total {
                    Some(tot) => add_into(tot, &dvis),
                    None => *dvis_total = Some(dvis),
                }
            }
            dx
        };
        // up path in reverse
        let dcat1 = back_block(self, 8, &du1, &mut dtemb_total, &mut dctx_total, &mut dharm_total, &mut dvis_total);
        let (duu2, dd1_a) = split_channels(&dcat1, bsz, ch[1], ch[0], h0 * w0);
        let du2 = upsample2_backward(&duu2, bsz * ch[1], h1, w1);
        let dcat2 = back_block(self, 7, &du2, &mut dtemb_total, &mut dctx_total, &mut dharm_total, &mut dvis_total);
        let (duu3, dd2_a) = split_channels(&dcat2, bsz, ch[2], ch[1], h1 * w1);
        let du3 = upsample2_backward(&duu3, bsz * ch[2], h2, w2);
        let dcat3 = back_block(self, 6, &du3, &mut dtemb_total, &mut dctx_total, &mut dharm_total, &mut dvis_total);
        let (duu4, dd3_a) = split_channels(&dcat3, bsz, ch[3], ch[2], h2 * w2);
        let du4 = upsample2_backward(&duu4, bsz * ch[3], h3, w3);
        let dcat4 = back_block(self, 5, &du4, &mut dtemb_total, &mut dctx_total, &mut dharm_total, &mut dvis_total);
        let (dum, dd4_a) = split_channels(&dcat4, bsz, ch[3], ch[3], h3 * w3);
        let dm = upsample2_backward(&dum, bsz * ch[3], h4, w4);
        // mid and down path
        let dp4 = back_block(self, 4, &dm, &mut dtemb_total, &mut dctx_total, &mut dharm_total, &mut dvis_total);
        let mut dd4 = avg_pool2_backward(&dp4, bsz * ch[3], h3, w3);
        add_into(&mut dd4, &dd4_a);
        let dp3 = back_block(self, 3, &dd4, &mut dtemb_total, &mut dctx_total, &mut dharm_total, &mut dvis_total);
        let mut dd3 = avg_pool2_backward(&dp3, bsz * ch[2], h2, w2);
        add_into(&mut dd3, &dd3_a);
        let dp2 = back_block(self, 2, &dd3, &mut dtemb_total, &mut dctx_total, &mut dharm_total, &mut dvis_total);
        let mut dd2 = avg_pool2_backward(&dp2, bsz * ch[1], h1, w1);
        add_into(&mut dd2, &dd2_a);
        let dp1 = back_block(self, 1, &dd2, &mut dtemb_total, &mut dctx_total, &mut dharm_total, &mut dvis_total);
        let mut dd1 = avg_pool2_backward(&dp1, bsz * ch[0], h0, w0);
        add_into(&mut dd1, &dd1_a);
        let _dx5 = back_block(self, 0, &dd1, &mut dtemb_total, &mut dctx_total, &mut dharm_total, &mut dvis_total);
        // pooled-text pathway: gradient into text_pool and back onto the
        // context tokens (mean backward spreads evenly)
        let dpooled = self.text_pool.backward(&cache.ctx_pooled, &dtemb_total, bsz);
        // time MLP backward: the base embedding broadcast over items
        let mut dtemb_base = vec![0.0; self.cfg.time_dim];
        for b in 0..bsz {
            for d in 0..self.cfg.time_dim {
                dtemb_base[d] += dtemb_total[b * self.cfg.time_dim + d];
            }
        }
        let dmid = self.time_l2.backward(&cache.temb_mid, &dtemb_base, 1);
        let mut dmid = dmid;
        silu_backward(&cache.temb_mid_pre, &mut dmid);
        let _ = self.time_l1.backward(&cache.temb_sin, &dmid, 1);
        // package context grads, folding in the pooled contribution
        let mut dctx = dctx_total
            .map(|d| {
                let n = d.len() / (bsz * self.cfg.d_t);
                FeatureMap::from_vec(d, bsz, n, self.cfg.d_t).expect("ctx grad shape")
            })
            .unwrap_or_else(|| FeatureMap::zeros(bsz, cache.ctx_n, self.cfg.d_t));
        debug_assert_eq!(dctx.n, cache.ctx_n);
        for b in 0..bsz {
            let share = &dpooled[b * self.cfg.d_t..(b + 1) * self.cfg.d_t];
            let toks = dctx.tokens_mut(b);
            for row in toks.chunks_mut(self.cfg.d_t) {
                for (v, g) in row.iter_mut().zip(share) {
                    *v += g / cache.ctx_n as f64;
                }
            }
        }
        let dvis = dvis_total.map(|d| {
            let n = d.len() / (bsz * self.cfg.d_t);
            FeatureMap::from_vec(d, bsz, n, self.cfg.d_t).expect("vis grad shape")
        });
        let dharm = dharm_total.map(|d| {
            let n = d.len() / (bsz * self.cfg.d_t);
            FeatureMap::from_vec(d, bsz, n, self.cfg.d_t).expect("harm grad shape")
        });
        (dctx, dvis, dharm)
    }

    // ------------------------------------------------------------------
    // Spec-facing operations
    // ------------------------------------------------------------------

    /// Backbone prediction. At the installed site the dual-branch attention
    /// is applied; when `harmony` is absent the harmony branch contributes
    /// zero.
    pub fn predict_noise(
        &self,
        x_t: &LatentImage,
        t: usize,
        text: &FeatureMap,
        harmony: Option<&FeatureMap>,
    ) -> Result<DenoiserOutput> {
        let fh_prime = match harmony {
            Some(fh) => Some(self.project_harmony(fh)?),
            None => None,
        };
        let (eps, _) = self.forward_ctx(x_t, t, text, fh_prime.as_ref(), self.cfg.beta, None)?;
        Ok(eps)
    }

    /// Guided prediction: `w * eps(cond) + (1 - w) * eps(uncond)` where the
    /// unconditional branch sees the null prompt and no harmony feature.
    pub fn cfg_predict(
        &self,
        x_t: &LatentImage,
        t: usize,
        text: &FeatureMap,
        harmony: Option<&FeatureMap>,
        w: f64,
    ) -> Result<DenoiserOutput> {
        let cond = self.predict_noise(x_t, t, text, harmony)?;
        if w == 1.0 {
            return Ok(cond);
        }
        let null = self.null_text(x_t.b);
        let uncond = self.predict_noise(x_t, t, &null, None)?;
        Ok(guidance_combine(&cond, &uncond, w))
    }

    /// Null-prompt features broadcast to a batch.
    pub fn null_text(&self, bsz: usize) -> FeatureMap {
        let null = self.text.null_features();
        let mut out = FeatureMap::zeros(bsz, 1, self.cfg.d_t);
        for b in 0..bsz {
            out.tokens_mut(b).copy_from_slice(null.tokens(0));
        }
        out
    }

    /// Initial latent drawn deterministically from a seed.
    pub fn seed_noise(&self, seed: u64) -> LatentImage {
        let mut rng = CounterRng::new(substream(seed, NOISE_SALT));
        let mut img = LatentImage::zeros(1, self.cfg.channels, self.cfg.image_size, self.cfg.image_size);
        rng.fill_gaussian(&mut img.data);
        img
    }

    /// Deterministic guided generation: seeded noise, `steps` DDIM
    /// iterations with guided prediction at every step.
    pub fn sample(
        &self,
        seed: u64,
        steps: usize,
        text: &FeatureMap,
        harmony: Option<&FeatureMap>,
        w: f64,
    ) -> Result<LatentImage> {
        let mut x = self.seed_noise(seed);
        let plan = self.schedule.sampler_plan(steps)?;
        for step in &plan {
            let eps = self.cfg_predict(&x, step.t, text, harmony, w)?;
            x = self.schedule.ddim_step(&x, *step, &eps)?;
        }
        Ok(x)
    }

    // ------------------------------------------------------------------
    // Parameter plumbing
    // ------------------------------------------------------------------

    /// Stable, named iteration over every parameter.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.text.visit_params("text", f);
        self.image.visit_params("image", f);
        self.visual_proj.visit_params("visual_proj", f);
        self.time_l1.visit_params("time.l1", f);
        self.time_l2.visit_params("time.l2", f);
        self.text_pool.visit_params("text_pool", f);
        for i in 0..self.blocks.len() {
            let site = self.blocks[i].site.name().to_ascii_lowercase();
            self.blocks[i].visit_params(&alloc::format!("block.{site}"), f);
        }
        self.head.visit_params("head", f);
        if let Some(ha) = &mut self.ha {
            ha.visit_params("ha", f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    /// True for parameter names in the adapter set: harmony attention
    /// weights and the injected branch key/value maps.
    pub fn is_adapter_param(name: &str) -> bool {
        name.starts_with("ha.") || name.contains(".branch.")
    }

    /// Mark every parameter trainable (stage-0).
    pub fn set_all_trainable(&mut self) {
        self.visit_params(&mut |_, p| p.requires_grad = true);
    }

    /// Freeze the base; only the adapter set keeps gradients.
    pub fn set_adapter_trainable_only(&mut self) {
        self.visit_params(&mut |name, p| p.requires_grad = Self::is_adapter_param(name));
    }

    /// Byte-exact snapshot of every parameter, keyed by name.
    pub fn snapshot(&mut self) -> alloc::collections::BTreeMap<String, Vec<u8>> {
        let mut out = alloc::collections::BTreeMap::new();
        self.visit_params(&mut |name, p| {
            let mut bytes = Vec::with_capacity(p.data.len() * 8);
            for v in &p.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            out.insert(String::from(name), bytes);
        });
        out
    }
}

fn concat_channels(a: &[f64], b: &[f64], bsz: usize, ca: usize, cb: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; bsz * (ca + cb) * hw];
    for i in 0..bsz {
        out[i * (ca + cb) * hw..i * (ca + cb) * hw + ca * hw]
            .copy_from_slice(&a[i * ca * hw..(i + 1) * ca * hw]);
        out[i * (ca + cb) * hw + ca * hw..(i + 1) * (ca + cb) * hw]
            .copy_from_slice(&b[i * cb * hw..(i + 1) * cb * hw]);
    }
    out
}

fn split_channels(d: &[f64], bsz: usize, ca: usize, cb: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; bsz * ca * hw];
    let mut db = vec![0.0; bsz * cb * hw];
    for i in 0..bsz {
        da[i * ca * hw..(i + 1) * ca * hw]
            .copy_from_slice(&d[i * (ca + cb) * hw..i * (ca + cb) * hw + ca * hw]);
        db[i * cb * hw..(i + 1) * cb * hw]
            .copy_from_slice(&d[i * (ca + cb) * hw + ca * hw..(i + 1) * (ca + cb) * hw]);
    }
    (da, db)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// The guidance combination exactly as configured: `w * cond + (1 - w) *
/// uncond`. At `w = 0` this is the unconditional branch; at `w = 1` the
/// conditional branch; above 1 it extrapolates.
pub fn guidance_combine(cond: &LatentImage, uncond: &LatentImage, w: f64) -> LatentImage {
    assert!(cond.same_shape(uncond), "guidance branch shapes differ");
    let mut out = cond.clone();
    for (c, u) in out.data.iter_mut().zip(&uncond.data) {
        *c = w * *c + (1.0 - w) * u;
    }
    out
}
