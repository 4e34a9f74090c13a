//! Preference-guided noise selection.
//!
//! Two phases. Offline seed search generates one full image per candidate
//! seed under the source caption, scores each with a binary count check,
//! and keeps the top-k seeds (accuracy descending, seed ascending). At edit
//! time, seed selection runs a shallow denoise from every pooled seed under
//! the edit instruction, scores alignment, and the full denoise restarts
//! from the argmax seed. All ties break toward the lower seed so parallel
//! and serial evaluation produce identical results.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::ToyModel;
use crate::encoders::auxiliary_caption;
use crate::error::Result;
use crate::require;
use crate::scene::{render_scene, EditInstruction, SceneSpec};
use crate::scorer::AlignmentScorer;
use crate::tensor::{FeatureMap, LatentImage};

/// One candidate seed with its search accuracy and, once selected against
/// an instruction, its alignment score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedCandidate {
    pub seed: u64,
    /// Binary count accuracy from the search phase.
    pub accuracy: u8,
    /// Alignment score from the selection phase, when scored.
    pub alignment: Option<f64>,
}

/// The retained top-k candidates for one source caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedPool {
    pub prompt_key: String,
    pub candidates: Vec<SeedCandidate>,
    /// Scorer failures observed during the search; informational only.
    pub warnings: Vec<String>,
}

/// Deterministic ordering: accuracy descending, then seed ascending.
pub fn select_top_k(mut candidates: Vec<SeedCandidate>, k: usize) -> Vec<SeedCandidate> {
    candidates.sort_by(|a, b| b.accuracy.cmp(&a.accuracy).then(a.seed.cmp(&b.seed)));
    candidates.truncate(k);
    candidates
}

/// Conditioning features reused across the candidate generations of one
/// source scene.
pub struct SearchContext {
    pub text: FeatureMap,
    pub harmony: Option<FeatureMap>,
}

impl SearchContext {
    /// Conditioning for generating the source caption: prompt text plus,
    /// when an adapter is installed, the harmony feature of the rendered
    /// source scene.
    pub fn for_scene(model: &ToyModel, scene: &SceneSpec) -> Result<Self> {
        let text = model.text.encode(&model.vocab.tokenize(&scene.caption)?);
        let harmony = if model.adapter_installed() {
            let img = render_scene(scene, model.cfg.image_size);
            let f_v = model.image.encode(&img)?;
            let f_a = model.text.encode(&model.vocab.tokenize(&auxiliary_caption(scene))?);
            Some(model.make_harmony(&f_v, &f_a)?)
        } else {
            None
        };
        Ok(Self { text, harmony })
    }
}

/// Generate and score one candidate seed. Scorer failures degrade to
/// accuracy 0 with a warning rather than aborting the search.
pub fn eval_candidate(
    model: &ToyModel,
    ctx: &SearchContext,
    target: &SceneSpec,
    scorer: &dyn AlignmentScorer,
    seed: u64,
) -> Result<(SeedCandidate, Option<String>)> {
    let img = model.sample(
        seed,
        model.cfg.full_steps,
        &ctx.text,
        ctx.harmony.as_ref(),
        model.cfg.guidance,
    )?;
    match scorer.count_accuracy(&img, target) {
        Ok(acc) => Ok((
            SeedCandidate {
                seed,
                accuracy: acc,
                alignment: None,
            },
            None,
        )),
        Err(e) => Ok((
            SeedCandidate {
                seed,
                accuracy: 0,
                alignment: None,
            },
            Some(alloc::format!("scorer failed on seed {seed}: {e}")),
        )),
    }
}

/// Offline seed search over seeds `0..pool_size`: full generation per seed,
/// binary count accuracy, top-k retention.
pub fn seed_search(
    model: &ToyModel,
    target: &SceneSpec,
    scorer: &dyn AlignmentScorer,
) -> Result<SeedPool> {
    let (n, k) = (model.cfg.pool_size, model.cfg.top_k);
    require!(n >= k && k >= 1, "pool_size {n} must be >= top_k {k} >= 1");
    let ctx = SearchContext::for_scene(model, target)?;
    let mut candidates = Vec::with_capacity(n);
    let mut warnings = Vec::new();
    for seed in 0..n as u64 {
        let (cand, warning) = eval_candidate(model, &ctx, target, scorer, seed)?;
        candidates.push(cand);
        if let Some(w) = warning {
            warnings.push(w);
        }
    }
    Ok(SeedPool {
        prompt_key: target.caption.clone(),
        candidates: select_top_k(candidates, k),
        warnings,
    })
}

/// Result of the selection phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub candidate: SeedCandidate,
    /// Set when every candidate scored zero and the lowest seed was used.
    pub degraded: bool,
}

/// Shallow-denoise every pooled candidate under the edit conditioning and
/// return the candidate with the highest alignment score (ties toward the
/// lower seed).
pub fn seed_select(
    model: &ToyModel,
    pool: &SeedPool,
    edit_text: &FeatureMap,
    harmony: Option<&FeatureMap>,
    instruction: &EditInstruction,
    source: &SceneSpec,
    scorer: &dyn AlignmentScorer,
) -> Result<Selection> {
    require!(!pool.candidates.is_empty(), "empty seed pool");
    let mut scored: Vec<SeedCandidate> = Vec::with_capacity(pool.candidates.len());
    for cand in &pool.candidates {
        let img = model.sample(
            cand.seed,
            model.cfg.shallow_steps,
            edit_text,
            harmony,
            model.cfg.guidance,
        )?;
        let r = scorer.alignment_score(&img, instruction, source).unwrap_or(0.0);
        scored.push(SeedCandidate {
            alignment: Some(r),
            ..*cand
        });
    }
    let best = scored
        .iter()
        .copied()
        .max_by(|a, b| {
            let ra = a.alignment.unwrap_or(0.0);
            let rb = b.alignment.unwrap_or(0.0);
            ra.total_cmp(&rb).then(b.seed.cmp(&a.seed))
        })
        .expect("nonempty pool");
    if best.alignment.unwrap_or(0.0) == 0.0 {
        let lowest = scored
            .iter()
            .copied()
            .min_by_key(|c| c.seed)
            .expect("nonempty pool");
        return Ok(Selection {
            candidate: lowest,
            degraded: true,
        });
    }
    Ok(Selection {
        candidate: best,
        degraded: false,
    })
}

/// Everything an edit run reports alongside its image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub seed: u64,
    pub alignment: Option<f64>,
    pub degraded: bool,
    pub alpha: f64,
    pub beta: f64,
    pub guidance: f64,
    pub steps: usize,
}

/// Full preference-guided edit: harmony features from the source image,
/// seed selection from the pool, then the full-step generation from the
/// chosen seed.
pub fn pns_edit(
    model: &ToyModel,
    source_img: &LatentImage,
    source: &SceneSpec,
    instruction: &EditInstruction,
    pool: &SeedPool,
    scorer: &dyn AlignmentScorer,
) -> Result<(LatentImage, EditOutcome)> {
    let edit_text = model.text.encode(&model.vocab.tokenize(&instruction.prompt)?);
    let harmony = if model.adapter_installed() {
        let f_v = model.image.encode(source_img)?;
        let f_a = model
            .text
            .encode(&model.vocab.tokenize(&auxiliary_caption(source))?);
        Some(model.make_harmony(&f_v, &f_a)?)
    } else {
        None
    };
    let selection = seed_select(
        model,
        pool,
        &edit_text,
        harmony.as_ref(),
        instruction,
        source,
        scorer,
    )?;
    let img = model.sample(
        selection.candidate.seed,
        model.cfg.full_steps,
        &edit_text,
        harmony.as_ref(),
        model.cfg.guidance,
    )?;
    Ok((
        img,
        EditOutcome {
            seed: selection.candidate.seed,
            alignment: selection.candidate.alignment,
            degraded: selection.degraded,
            alpha: model.cfg.alpha,
            beta: model.cfg.beta,
            guidance: model.cfg.guidance,
            steps: model.cfg.full_steps,
        },
    ))
}

/// Fixed-seed edit used by the no-selection ablations: same conditioning
/// pipeline, no pool.
pub fn edit_fixed_seed(
    model: &ToyModel,
    source_img: &LatentImage,
    source: &SceneSpec,
    instruction: &EditInstruction,
    seed: u64,
) -> Result<(LatentImage, EditOutcome)> {
    let edit_text = model.text.encode(&model.vocab.tokenize(&instruction.prompt)?);
    let harmony = if model.adapter_installed() {
        let f_v = model.image.encode(source_img)?;
        let f_a = model
            .text
            .encode(&model.vocab.tokenize(&auxiliary_caption(source))?);
        Some(model.make_harmony(&f_v, &f_a)?)
    } else {
        None
    };
    let img = model.sample(
        seed,
        model.cfg.full_steps,
        &edit_text,
        harmony.as_ref(),
        model.cfg.guidance,
    )?;
    Ok((
        img,
        EditOutcome {
            seed,
            alignment: None,
            degraded: false,
            alpha: model.cfg.alpha,
            beta: model.cfg.beta,
            guidance: model.cfg.guidance,
            steps: model.cfg.full_steps,
        },
    ))
}
