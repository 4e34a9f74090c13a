//! Two-stage training.
//!
//! Stage 0 pretrains the backbone, both encoders, and the
//! visual-conditioning projection on caption-conditioned denoising; the
//! projection learns by stochastically appending projected image tokens to
//! the text context. Everything from stage 0 is frozen afterwards.
//!
//! The adapter stage optimizes exactly the harmony attention weights and
//! the injected branch key/value maps under the noise-prediction objective
//! `L = || eps - eps_theta(x_t, F_t, F_h, t) ||^2` (mean over elements),
//! with joint conditional dropout: with the configured probability a step
//! sees the null prompt and no harmony feature, which trains the
//! unconditional path that guidance needs.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::ToyModel;
use crate::config::{AblationVariant, HarmonyConfig, TrainConfig, TrainStage};
use crate::encoders::auxiliary_caption;
use crate::error::{HarmonyError, Result};
use crate::math;
use crate::require;
use crate::rng::{substream, CounterRng};
use crate::scene::{render_scene, SceneSpec};
use crate::tensor::{FeatureMap, LatentImage};

/// Decoupled-weight-decay adaptive optimizer with per-parameter moments
/// keyed by parameter name.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Apply one update to every trainable parameter of the model.
    pub fn step(&mut self, model: &mut ToyModel) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - math::powf(self.beta1, t);
        let bc2 = 1.0 - math::powf(self.beta2, t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        let moments = &mut self.moments;
        model.visit_params(&mut |name, p| {
            if !p.requires_grad {
                return;
            }
            let (m, v) = moments
                .entry(String::from(name))
                .or_insert_with(|| (alloc::vec![0.0; p.data.len()], alloc::vec![0.0; p.data.len()]));
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * (mhat / (math::sqrt(vhat) + eps) + wd * p.data[i]);
            }
        });
    }
}

/// The training objective: mean squared error between true and predicted
/// noise, and its gradient.
pub fn mse_loss(truth: &LatentImage, pred: &LatentImage) -> (f64, LatentImage) {
    assert!(truth.same_shape(pred), "loss shapes differ");
    let n = truth.data.len() as f64;
    let mut grad = LatentImage::zeros(pred.b, pred.c, pred.h, pred.w);
    let mut loss = 0.0;
    for i in 0..truth.data.len() {
        let d = pred.data[i] - truth.data[i];
        loss += d * d;
        grad.data[i] = 2.0 * d / n;
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn mean_loss(&self, range: core::ops::Range<usize>) -> f64 {
        let slice: Vec<f64> = self
            .records
            .iter()
            .filter(|r| range.contains(&r.step))
            .map(|r| r.loss)
            .collect();
        slice.iter().sum::<f64>() / slice.len().max(1) as f64
    }
}

fn rendered_corpus(corpus: &[SceneSpec], canvas: usize) -> Vec<LatentImage> {
    corpus.iter().map(|s| render_scene(s, canvas)).collect()
}

/// Stage-0 pretraining. Trains everything; returns the loss log. The hook
/// runs after every optimizer step with `(step, loss)` and mutable access
/// to the model, which is how the CLI writes periodic checkpoints.
pub fn pretrain_with(
    model: &mut ToyModel,
    corpus: &[SceneSpec],
    cfg: &TrainConfig,
    mut hook: impl FnMut(&mut ToyModel, usize, f64),
) -> Result<TrainLog> {
    cfg.validate()?;
    require!(cfg.stage == TrainStage::Pretrain, "wrong stage config");
    require!(cfg.batch_size == 1, "this trainer is batch-size-1 only");
    require!(!corpus.is_empty(), "empty training corpus");
    require!(
        !model.adapter_installed(),
        "stage-0 runs on the bare backbone"
    );
    model.set_all_trainable();
    let mut opt = AdamW::new(cfg);
    let mut rng = CounterRng::new(substream(cfg.seed, 0x505245));
    let images = rendered_corpus(corpus, model.cfg.image_size);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let idx = rng.next_below(corpus.len());
        let scene = &corpus[idx];
        let x0 = &images[idx];
        // Per-modality conditioning schedule: full dropout trains the
        // unconditional path; among visual steps, half drop the caption so
        // the visual pathway must carry content alone (the configuration
        // the injected adapter runs in later).
        let drop_cond = rng.next_f64() < cfg.conditional_dropout;
        let with_visual = !drop_cond && rng.next_f64() < cfg.visual_cond_prob;
        let vis_only = with_visual && rng.next_f64() < 0.5;
        let t = rng.next_below(model.cfg.total_steps);
        let mut noise = LatentImage::zeros(1, x0.c, x0.h, x0.w);
        rng.fill_gaussian(&mut noise.data);
        let x_t = model.schedule.add_noise(x0, &noise, t)?;

        let token_ids = if drop_cond || vis_only {
            alloc::vec![0]
        } else {
            model.vocab.tokenize(&scene.caption)?
        };
        let f_t = model.text.encode(&token_ids);
        let (f_v, img_cache, vis) = if with_visual {
            let (f, c) = model.image.encode_cached(x0)?;
            let projected = model.project_harmony(&f)?;
            (Some(f), Some(c), Some(projected))
        } else {
            (None, None, None)
        };
        let (pred, cache) = model.forward_ctx(&x_t, t, &f_t, None, 0.0, vis.as_ref())?;
        let (loss, d_eps) = mse_loss(&noise, &pred);
        if !loss.is_finite() {
            return Err(HarmonyError::Diverged { step });
        }
        model.zero_grads();
        let (dctx, dvis, _) = model.backward_ctx(&cache, &d_eps);
        model.text.backward(&token_ids, &dctx.data);
        if let (Some(f), Some(icache), Some(dv)) = (&f_v, &img_cache, dvis) {
            let dfv = model.visual_proj.backward(f.tokens(0), &dv.data, f.n);
            model.image.backward(icache, &dfv, 1);
        }
        opt.step(model);
        log.records.push(StepRecord {
            step,
            loss,
            lr: cfg.learning_rate,
        });
        hook(model, step, loss);
    }
    Ok(log)
}

pub fn pretrain(model: &mut ToyModel, corpus: &[SceneSpec], cfg: &TrainConfig) -> Result<TrainLog> {
    pretrain_with(model, corpus, cfg, |_, _, _| {})
}

/// Adapter training over exactly the harmony attention weights and the
/// injected branch key/value maps. The base model must already carry its
/// installed adapter. Verifies the freeze contract at the end by byte
/// comparison of every non-adapter parameter. The hook runs after every
/// optimizer step, as in [`pretrain_with`].
pub fn train_adapter_with(
    model: &mut ToyModel,
    corpus: &[SceneSpec],
    cfg: &TrainConfig,
    mut hook: impl FnMut(&mut ToyModel, usize, f64),
) -> Result<TrainLog> {
    cfg.validate()?;
    require!(cfg.stage == TrainStage::Adapter, "wrong stage config");
    require!(cfg.batch_size == 1, "this trainer is batch-size-1 only");
    require!(!corpus.is_empty(), "empty training corpus");
    require!(model.adapter_installed(), "install the adapter first");
    model.set_adapter_trainable_only();
    let frozen_before: BTreeMap<String, Vec<u8>> = model
        .snapshot()
        .into_iter()
        .filter(|(name, _)| !ToyModel::is_adapter_param(name))
        .collect();
    let mut opt = AdamW::new(cfg);
    let mut rng = CounterRng::new(substream(cfg.seed, 0x414441));
    let images = rendered_corpus(corpus, model.cfg.image_size);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let idx = rng.next_below(corpus.len());
        let scene = &corpus[idx];
        let x0 = &images[idx];
        let drop_cond = rng.next_f64() < cfg.conditional_dropout;
        let t = rng.next_below(model.cfg.total_steps);
        let mut noise = LatentImage::zeros(1, x0.c, x0.h, x0.w);
        rng.fill_gaussian(&mut noise.data);
        let x_t = model.schedule.add_noise(x0, &noise, t)?;

        let loss = if drop_cond {
            // unconditional path: null prompt, no harmony feature
            let f_t = model.text.encode(&[0]);
            let (pred, cache) = model.forward_ctx(&x_t, t, &f_t, None, 0.0, None)?;
            let (loss, d_eps) = mse_loss(&noise, &pred);
            if !loss.is_finite() {
                return Err(HarmonyError::Diverged { step });
            }
            model.zero_grads();
            let _ = model.backward_ctx(&cache, &d_eps);
            loss
        } else {
            let token_ids = model.vocab.tokenize(&scene.caption)?;
            let f_t = model.text.encode(&token_ids);
            let f_v = model.image.encode(x0)?;
            let f_a_ids = model.vocab.tokenize(&auxiliary_caption(scene))?;
            let f_a = model.text.encode(&f_a_ids);
            let (f_h, ha_caches) = match (&model.ha, model.cfg.use_ha) {
                (Some(ha), true) => {
                    let (f_h, caches) = ha.forward_cached(&f_v, &f_a, model.cfg.alpha)?;
                    (f_h, Some(caches))
                }
                _ => (f_v.clone(), None),
            };
            let f_h_prime = model.project_harmony(&f_h)?;
            let (pred, cache) =
                model.forward_ctx(&x_t, t, &f_t, Some(&f_h_prime), model.cfg.beta, None)?;
            let (loss, d_eps) = mse_loss(&noise, &pred);
            if !loss.is_finite() {
                return Err(HarmonyError::Diverged { step });
            }
            model.zero_grads();
            let (_dctx, _dvis, dharm_prime) = model.backward_ctx(&cache, &d_eps);
            if let Some(dhp) = dharm_prime {
                // through the frozen projection into the harmony chain
                let dfh = model.visual_proj.backward(f_h.tokens(0), &dhp.data, f_h.n);
                if let (Some(ha), Some(caches)) = (&mut model.ha, &ha_caches) {
                    let dfh_map = FeatureMap::from_vec(dfh, 1, f_h.n, model.cfg.d_v)?;
                    ha.backward(caches, &dfh_map, model.cfg.alpha);
                }
            }
            loss
        };
        opt.step(model);
        log.records.push(StepRecord {
            step,
            loss,
            lr: cfg.learning_rate,
        });
        hook(model, step, loss);
    }
    // freeze contract: every non-adapter array must be byte-identical
    let frozen_after: BTreeMap<String, Vec<u8>> = model
        .snapshot()
        .into_iter()
        .filter(|(name, _)| !ToyModel::is_adapter_param(name))
        .collect();
    if frozen_before != frozen_after {
        let changed: Vec<&String> = frozen_before
            .iter()
            .filter(|(k, v)| frozen_after.get(*k) != Some(v))
            .map(|(k, _)| k)
            .collect();
        return Err(HarmonyError::Config(alloc::format!(
            "freeze contract breached: {changed:?}"
        )));
    }
    Ok(log)
}

pub fn train_adapter(
    model: &mut ToyModel,
    corpus: &[SceneSpec],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_adapter_with(model, corpus, cfg, |_, _, _| {})
}

/// Clone a pretrained base into a configured pipeline for one ablation
/// variant: apply the variant flags, install its adapter, leave the base
/// weights untouched.
pub fn build_variant(
    pretrained: &ToyModel,
    variant: AblationVariant,
    base_cfg: &HarmonyConfig,
    seed: u64,
) -> Result<ToyModel> {
    let mut model = pretrained.clone();
    model.cfg = variant.apply(base_cfg);
    model.install_adapter(substream(seed, variant as u64 + 1))?;
    Ok(model)
}
