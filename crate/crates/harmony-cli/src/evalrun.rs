//! Evaluation harness: drives edits over benchmark entries for one
//! configured pipeline, collects per-edit records, and aggregates OCA, AP,
//! and the mean alignment score. The ablation runner trains each distinct
//! adapter architecture once, reuses it across the variants that share it,
//! and emits a comparison table.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use harmony_core::backbone::ToyModel;
use harmony_core::config::{AblationVariant, InjectMode, TrainConfig, TrainStage};
use harmony_core::metrics::{summarize, EvalRecord, RunSummary};
use harmony_core::pns::{edit_fixed_seed, pns_edit, EditOutcome, SeedPool};
use harmony_core::rng::substream;
use harmony_core::scene::{render_scene, BenchEntry, EditInstruction, EditKind, SceneSpec};
use harmony_core::scorer::{AlignmentScorer, BlobOracle};
use harmony_core::train::{build_variant, train_adapter};
use harmony_core::{HarmonyConfig, LatentImage};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointStage};
use crate::parallel::parallel_seed_search;
use crate::poolstore::PoolStore;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Instruction kinds to evaluate; empty means all three.
    pub kinds: Vec<EditKind>,
    /// Keep only scenes with `count <= max_count`, when set.
    pub max_count: Option<usize>,
    /// Cap on the number of edits, applied after filtering.
    pub max_edits: Option<usize>,
    pub iou_threshold: f64,
    pub threads: usize,
    /// Base seed for the fixed-seed (no selection) pipelines.
    pub eval_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            kinds: Vec::new(),
            max_count: None,
            max_edits: None,
            iou_threshold: 0.5,
            threads: crate::parallel::default_threads(),
            eval_seed: 0,
        }
    }
}

/// One planned edit: scene plus one of its instructions.
#[derive(Debug, Clone)]
pub struct PlannedEdit {
    pub scene_id: usize,
    pub instruction_index: usize,
    pub scene: SceneSpec,
    pub instruction: EditInstruction,
}

/// Select the edits an evaluation will run, in manifest order.
pub fn plan_edits(entries: &[BenchEntry], opts: &EvalOptions) -> Vec<PlannedEdit> {
    let mut out = Vec::new();
    for entry in entries {
        if let Some(maxc) = opts.max_count {
            if entry.scene.count > maxc {
                continue;
            }
        }
        for (idx, inst) in entry.instructions.iter().enumerate() {
            if !opts.kinds.is_empty() && !opts.kinds.contains(&inst.kind) {
                continue;
            }
            out.push(PlannedEdit {
                scene_id: entry.id,
                instruction_index: idx,
                scene: entry.scene.clone(),
                instruction: inst.clone(),
            });
        }
    }
    if let Some(cap) = opts.max_edits {
        out.truncate(cap);
    }
    out
}

/// Make sure the pool store holds a pool for every caption the planned
/// edits will need; searches missing ones with the given model.
pub fn ensure_pools(
    model: &ToyModel,
    edits: &[PlannedEdit],
    store: &mut PoolStore,
    scorer: &(dyn AlignmentScorer + Sync),
    threads: usize,
    mut progress: impl FnMut(&str),
) -> Result<usize> {
    let mut searched = 0;
    for edit in edits {
        let key = edit.scene.caption.clone();
        if store.get(&key).is_some() {
            continue;
        }
        progress(&format!("seed search: {key}"));
        let pool = parallel_seed_search(model, &edit.scene, scorer, threads)
            .with_context(|| format!("seed search for {key:?}"))?;
        store.insert(pool);
        searched += 1;
    }
    Ok(searched)
}

/// Run one edit and build its evaluation record.
pub fn run_single_edit(
    model: &ToyModel,
    edit: &PlannedEdit,
    source_img: &LatentImage,
    pool: Option<&SeedPool>,
    scorer: &dyn AlignmentScorer,
    eval_seed: u64,
) -> Result<(LatentImage, EditOutcome, EvalRecord)> {
    let (img, outcome) = if model.cfg.use_pns {
        let pool = pool.with_context(|| {
            format!("no seed pool for caption {:?}", edit.scene.caption)
        })?;
        pns_edit(model, source_img, &edit.scene, &edit.instruction, pool, scorer)?
    } else {
        let seed = substream(
            eval_seed,
            (edit.scene_id as u64) * 1000 + edit.instruction_index as u64,
        );
        edit_fixed_seed(model, source_img, &edit.scene, &edit.instruction, seed)?
    };
    let detections = scorer.detect(&img)?;
    let target = edit.instruction.apply(&edit.scene);
    let count_match = u8::from(detections.count_of(target.class_id) == target.count);
    let alignment = scorer.alignment_score(&img, &edit.instruction, &edit.scene)?;
    let record = EvalRecord {
        instruction_id: (edit.scene_id, edit.instruction_index),
        kind: edit.instruction.kind,
        detections,
        target,
        count_match,
        alignment,
        seed: outcome.seed,
    };
    Ok((img, outcome, record))
}

/// Evaluate a pipeline over the planned edits. Edits run in parallel;
/// records come back in plan order regardless of scheduling.
pub fn evaluate(
    model: &ToyModel,
    edits: &[PlannedEdit],
    store: Option<&PoolStore>,
    opts: &EvalOptions,
) -> Result<Vec<EvalRecord>> {
    let scorer = BlobOracle::from_config(&model.cfg);
    let threads = opts.threads.clamp(1, edits.len().max(1));
    let results: Vec<Result<EvalRecord>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for worker in 0..threads {
            let scorer = &scorer;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut i = worker;
                while i < edits.len() {
                    let edit = &edits[i];
                    let source_img = render_scene(&edit.scene, model.cfg.image_size);
                    let pool = store.and_then(|s| s.get(&edit.scene.caption));
                    let rec = run_single_edit(
                        model,
                        edit,
                        &source_img,
                        pool,
                        scorer,
                        opts.eval_seed,
                    )
                    .map(|(_, _, rec)| rec);
                    out.push((i, rec));
                    i += threads;
                }
                out
            }));
        }
        let mut indexed: Vec<(usize, Result<EvalRecord>)> = handles
            .into_iter()
            .flat_map(|h| h.join().expect("eval worker panicked"))
            .collect();
        indexed.sort_by_key(|(i, _)| *i);
        indexed.into_iter().map(|(_, r)| r).collect()
    });
    results.into_iter().collect()
}

pub fn write_records(records: &[EvalRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    for rec in records {
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).with_context(|| format!("records line {}", i + 1))?,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

/// Adapter architectures are shared between variants; train each once.
fn arch_key(cfg: &HarmonyConfig) -> &'static str {
    match (cfg.inject_mode, cfg.use_ha) {
        (InjectMode::Site, true) => "site_ha",
        (InjectMode::Site, false) => "site_plain",
        (InjectMode::Whole, false) => "whole_plain",
        (InjectMode::Whole, true) => "whole_ha",
    }
}

pub struct AblationOutcome {
    pub per_variant: Vec<(AblationVariant, RunSummary)>,
    pub records: Vec<(AblationVariant, Vec<EvalRecord>)>,
}

/// Train (or reuse cached) adapters for every variant, evaluate each over
/// the same planned edits, and collect summaries. Deterministic given the
/// base model, the benchmark, and the seeds; cached artifacts in `work_dir`
/// are reused when present.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &ToyModel,
    corpus: &[SceneSpec],
    entries: &[BenchEntry],
    variants: &[AblationVariant],
    train_cfg: &TrainConfig,
    opts: &EvalOptions,
    work_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<AblationOutcome> {
    fs::create_dir_all(work_dir)?;
    let edits = plan_edits(entries, opts);
    if edits.is_empty() {
        bail!("no edits match the evaluation filters");
    }
    progress(&format!("{} edits planned", edits.len()));
    let mut per_variant = Vec::new();
    let mut all_records = Vec::new();
    for &variant in variants {
        let cfg = variant.apply(&base.cfg);
        let key = arch_key(&cfg);
        let ckpt_path = work_dir.join(format!("adapter_{key}.ckpt"));
        let model = if ckpt_path.exists() {
            progress(&format!("{}: reusing {}", variant.name(), ckpt_path.display()));
            let (mut m, _) = load_checkpoint(&ckpt_path)?;
            // PNS flag differs between variants sharing one architecture
            m.cfg.use_pns = cfg.use_pns;
            m
        } else {
            progress(&format!("{}: training adapter ({key})", variant.name()));
            let mut m = build_variant(base, variant, &base.cfg, train_cfg.seed)?;
            let tc = TrainConfig {
                stage: TrainStage::Adapter,
                ..train_cfg.clone()
            };
            train_adapter(&mut m, corpus, &tc)?;
            save_checkpoint(&mut m, CheckpointStage::Adapted, &ckpt_path)?;
            m
        };
        let store = if model.cfg.use_pns {
            let pool_path = work_dir.join(format!("pools_{key}.jsonl"));
            let mut store = PoolStore::load(&pool_path)?;
            let scorer = BlobOracle::from_config(&model.cfg);
            let searched =
                ensure_pools(&model, &edits, &mut store, &scorer, opts.threads, &mut progress)?;
            if searched > 0 {
                store.save(&pool_path)?;
            }
            Some(store)
        } else {
            None
        };
        progress(&format!("{}: evaluating", variant.name()));
        let records = evaluate(&model, &edits, store.as_ref(), opts)?;
        write_records(
            &records,
            &work_dir.join(format!("records_{}.jsonl", variant.name())),
        )?;
        let summary = summarize(&records, opts.iou_threshold)?;
        per_variant.push((variant, summary));
        all_records.push((variant, records));
    }
    Ok(AblationOutcome {
        per_variant,
        records: all_records,
    })
}

pub fn ablation_table(outcome: &AblationOutcome) -> String {
    let rows: Vec<(String, RunSummary)> = outcome
        .per_variant
        .iter()
        .map(|(v, s)| (v.name().to_string(), s.clone()))
        .collect();
    harmony_core::metrics::format_table(&rows)
}

/// Work directory used by trend runs and the `ablate` command when the
/// caller does not name one.
pub fn default_work_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("work")
}
