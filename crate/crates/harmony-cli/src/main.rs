//! Command-line entry point: benchmark generation, two-stage training, seed
//! search, editing, evaluation, and the ablation ladder. Every run writes a
//! `run.json` reproducibility record beside its outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use harmony_core::backbone::ToyModel;
use harmony_core::config::{AblationVariant, TrainConfig};
use harmony_core::metrics::{format_table, summarize};
use harmony_core::scene::{
    generate_benchmark, generate_scene, generate_training_corpus, EditInstruction, EditKind,
    LayoutKind, SceneSpec, BACKGROUNDS, CLASSES, COUNT_WORDS, STYLES,
};
use harmony_core::scorer::{AlignmentScorer, BlobOracle};
use harmony_core::{HarmonyConfig, LatentImage};
use harmony_cli::checkpoint::{load_checkpoint, save_checkpoint, CheckpointStage};
use harmony_cli::evalrun::{
    ablation_table, ensure_pools, evaluate, plan_edits, run_ablation, write_records,
    EvalOptions,
};
use harmony_cli::imgio::{read_png, write_png};
use harmony_cli::manifest::{read_manifest, write_benchmark};
use harmony_cli::parallel::{default_threads, parallel_seed_search};
use harmony_cli::poolstore::PoolStore;
use harmony_cli::runcfg::{write_run_record, Overrides, RunRecord, TOOL_VERSION};

#[derive(Parser)]
#[command(
    name = "harmony",
    version,
    about = "Count- and layout-consistent toy image editing: benchmark, training, seed selection, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonConfig {
    /// Flat key=value config file (flags win over file entries).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Harmony residual scale.
    #[arg(long)]
    alpha: Option<f64>,
    /// Injected-branch scale.
    #[arg(long)]
    beta: Option<f64>,
    /// Guidance scale w.
    #[arg(long)]
    guidance: Option<f64>,
    /// Sampler steps for full generation.
    #[arg(long)]
    steps: Option<usize>,
    /// Injection site (D1..D4, M, U4..U1).
    #[arg(long)]
    site: Option<String>,
}

impl CommonConfig {
    fn overrides(&self) -> Result<Overrides> {
        let mut ov = match &self.config {
            Some(path) => Overrides::from_file(path)?,
            None => Overrides::default(),
        };
        if let Some(v) = self.alpha {
            ov.set("alpha", v.to_string());
        }
        if let Some(v) = self.beta {
            ov.set("beta", v.to_string());
        }
        if let Some(v) = self.guidance {
            ov.set("guidance", v.to_string());
        }
        if let Some(v) = self.steps {
            ov.set("full_steps", v.to_string());
        }
        if let Some(v) = &self.site {
            ov.set("inject_site", v.clone());
        }
        Ok(ov)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark: 200 scenes, counts 1-20, ten
    /// instructions each, verified by the counting oracle.
    Bench {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Stage-0 pretraining of the backbone, encoders, and the
    /// visual-conditioning projection.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optimization steps (default 20000).
        #[arg(long = "train-steps")]
        train_steps: Option<usize>,
        /// Procedurally generated scenes in the training corpus.
        #[arg(long, default_value_t = 2000)]
        corpus_size: usize,
        /// Also write `<out>.stepN.ckpt` every N steps.
        #[arg(long)]
        save_every: Option<usize>,
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Adapter training on a pretrained checkpoint for one variant.
    Train {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pipeline variant: B0, B1, B2, B3, or full.
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "train-steps")]
        train_steps: Option<usize>,
        #[arg(long, default_value_t = 2000)]
        corpus_size: usize,
        /// Also write `<out>.stepN.ckpt` every N steps.
        #[arg(long)]
        save_every: Option<usize>,
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Offline seed search for one source caption; updates the pool store.
    SeedSearch {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Source caption, e.g. "three circles".
        #[arg(long)]
        caption: String,
        /// Pool store file to update.
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Edit one image: detect the source scene, pick a seed (pool or
    /// fixed), generate, and write the image plus a sidecar record.
    Edit {
        #[arg(long)]
        image: PathBuf,
        /// Edit prompt, e.g. "three squares".
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Pool store; searched on demand when the caption is missing.
        #[arg(long)]
        pools: Option<PathBuf>,
        /// Fixed seed (disables preference-guided selection).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Evaluate a checkpoint over a benchmark directory.
    Eval {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to scenes with at most this count.
        #[arg(long)]
        max_count: Option<usize>,
        /// Cap the number of edits.
        #[arg(long)]
        max_edits: Option<usize>,
        /// Comma-separated instruction kinds (class,scene,style).
        #[arg(long)]
        kinds: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Run every ablation variant and print the comparison table.
    Ablate {
        #[arg(long)]
        bench: PathBuf,
        /// Pretrained (stage-0) checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_count: Option<usize>,
        #[arg(long)]
        max_edits: Option<usize>,
        #[arg(long, default_value = "class")]
        kinds: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "train-steps")]
        train_steps: Option<usize>,
        #[arg(long, default_value_t = 2000)]
        corpus_size: usize,
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        common: CommonConfig,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Checkpoint path from the flag or the HARMONY_CKPT environment variable.
fn resolve_ckpt(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Ok(env) = std::env::var("HARMONY_CKPT") {
        return Ok(PathBuf::from(env));
    }
    bail!("no checkpoint: pass --ckpt or set HARMONY_CKPT");
}

fn parse_kinds(spec: &str) -> Result<Vec<EditKind>> {
    let mut kinds = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() || part == "all" {
            continue;
        }
        kinds.push(match part {
            "class" => EditKind::Class,
            "scene" => EditKind::Scene,
            "style" => EditKind::Style,
            other => bail!("unknown edit kind {other:?} (expected class|scene|style)"),
        });
    }
    Ok(kinds)
}

/// Recover a scene description from an arbitrary domain image via the
/// counting oracle: plurality class, its count and boxes, nearest
/// background color.
fn detect_scene(img: &LatentImage, oracle: &BlobOracle) -> Result<SceneSpec> {
    let det = oracle.detect(img)?;
    let class_id = det
        .plurality_class()
        .context("no recognizable shapes in the source image")?;
    let boxes: Vec<[f64; 4]> = det
        .detections
        .iter()
        .filter(|d| d.class_id == class_id)
        .map(|d| d.bbox)
        .collect();
    let count = boxes.len();
    if count == 0 || count > harmony_core::scene::MAX_COUNT {
        bail!("detected {count} objects, outside the supported 1..=20");
    }
    // nearest background roster color to the corner pixel
    let corner = [
        harmony_core::scene::unit_to_u8(img.at(0, 0, 0, 0)) as f64,
        harmony_core::scene::unit_to_u8(img.at(0, 1, 0, 0)) as f64,
        harmony_core::scene::unit_to_u8(img.at(0, 2, 0, 0)) as f64,
    ];
    let background_id = BACKGROUNDS
        .iter()
        .enumerate()
        .min_by(|(_, (_, a)), (_, (_, b))| {
            let da: f64 = (0..3).map(|i| (corner[i] - a[i] as f64).powi(2)).sum();
            let db: f64 = (0..3).map(|i| (corner[i] - b[i] as f64).powi(2)).sum();
            da.total_cmp(&db)
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(SceneSpec {
        class_id,
        count,
        boxes,
        layout: LayoutKind::Random,
        background_id,
        style_id: 0,
        caption: harmony_core::scene::scene_caption(class_id, count, 0, 0),
    })
}

/// Classify an edit prompt against a source scene: background word means a
/// scene edit, style word a style edit, a different class word a class
/// edit.
fn parse_instruction(prompt: &str, source: &SceneSpec) -> Result<EditInstruction> {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    for (i, (name, _)) in BACKGROUNDS.iter().enumerate() {
        if words.contains(name) && i != source.background_id {
            return Ok(EditInstruction {
                kind: EditKind::Scene,
                target_id: i,
                prompt: prompt.to_string(),
            });
        }
    }
    for (i, name) in STYLES.iter().enumerate() {
        if words.contains(name) && i != source.style_id {
            return Ok(EditInstruction {
                kind: EditKind::Style,
                target_id: i,
                prompt: prompt.to_string(),
            });
        }
    }
    for (i, class) in CLASSES.iter().enumerate() {
        if (words.contains(&class.name) || words.contains(&class.plural)) && i != source.class_id
        {
            return Ok(EditInstruction {
                kind: EditKind::Class,
                target_id: i,
                prompt: prompt.to_string(),
            });
        }
    }
    bail!("prompt {prompt:?} names no class, background, or style change against the source");
}

/// Build a canonical scene for a bare caption like "three circles": parse
/// the count word and class word, draw a deterministic layout keyed by the
/// caption.
fn scene_from_caption(caption: &str, image_size: usize) -> Result<SceneSpec> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let count = words
        .iter()
        .find_map(|w| COUNT_WORDS.iter().position(|cw| cw == w).map(|i| i + 1))
        .with_context(|| format!("caption {caption:?} has no count word"))?;
    let class_id = words
        .iter()
        .find_map(|w| {
            CLASSES
                .iter()
                .position(|c| c.name == *w || c.plural == *w)
        })
        .with_context(|| format!("caption {caption:?} has no class word"))?;
    let mut salt = 0u64;
    for b in caption.as_bytes() {
        salt = salt.wrapping_mul(131).wrapping_add(*b as u64);
    }
    let mut rng = harmony_core::rng::CounterRng::new(harmony_core::rng::substream(salt, 0x534E));
    generate_scene(class_id, count, LayoutKind::Grid, 0, 0, image_size, &mut rng)
        .map_err(Into::into)
}

fn load_model(ckpt: Option<PathBuf>) -> Result<(ToyModel, CheckpointStage, PathBuf)> {
    let path = resolve_ckpt(ckpt)?;
    let (model, stage) = load_checkpoint(&path)?;
    Ok((model, stage, path))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Bench { seed, out, common } => {
            let mut cfg = HarmonyConfig::default();
            common.overrides()?.apply_model(&mut cfg)?;
            cfg.validate()?;
            let entries = generate_benchmark(seed, cfg.image_size)?;
            write_benchmark(&entries, cfg.image_size, &out)?;
            write_run_record(
                &RunRecord {
                    tool_version: TOOL_VERSION,
                    command: "bench",
                    args: vec![format!("--seed {seed}")],
                    seed,
                    config: &cfg,
                    train: None,
                },
                &out,
            )?;
            let instructions: usize = entries.iter().map(|e| e.instructions.len()).sum();
            println!(
                "benchmark: {} scenes, {} instructions -> {}",
                entries.len(),
                instructions,
                out.display()
            );
        }
        Command::Pretrain {
            out,
            seed,
            train_steps,
            corpus_size,
            save_every,
            common,
        } => {
            let ov = common.overrides()?;
            let mut cfg = HarmonyConfig::default();
            ov.apply_model(&mut cfg)?;
            cfg.validate()?;
            let mut tc = TrainConfig {
                seed,
                ..TrainConfig::pretrain_default()
            };
            ov.apply_train(&mut tc)?;
            if let Some(steps) = train_steps {
                tc.steps = steps;
            }
            let corpus = generate_training_corpus(seed, corpus_size, cfg.image_size)?;
            let mut model = ToyModel::new(&cfg, seed)?;
            eprintln!(
                "pretraining: {} steps over {} scenes",
                tc.steps,
                corpus.len()
            );
            let log = harmony_core::train::pretrain_with(
                &mut model,
                &corpus,
                &tc,
                periodic_saver(save_every, &out, CheckpointStage::Pretrained),
            )?;
            save_checkpoint(&mut model, CheckpointStage::Pretrained, &out)?;
            write_train_log(&log, &out.with_extension("losses.jsonl"))?;
            if let Some(dir) = out.parent() {
                write_run_record(
                    &RunRecord {
                        tool_version: TOOL_VERSION,
                        command: "pretrain",
                        args: vec![format!("--seed {seed}"), format!("--steps {}", tc.steps)],
                        seed,
                        config: &cfg,
                        train: Some(&tc),
                    },
                    dir,
                )?;
            }
            let last = log.mean_loss(tc.steps.saturating_sub(100)..tc.steps);
            println!("pretrained -> {} (final loss {last:.4})", out.display());
        }
        Command::Train {
            ckpt,
            out,
            variant,
            seed,
            train_steps,
            corpus_size,
            save_every,
            common,
        } => {
            let variant = AblationVariant::parse(&variant)?;
            let (base, stage, _) = load_model(Some(ckpt))?;
            if stage != CheckpointStage::Pretrained {
                bail!("adapter training starts from a stage-0 checkpoint");
            }
            let ov = common.overrides()?;
            let mut cfg = base.cfg.clone();
            ov.apply_model(&mut cfg)?;
            cfg.validate()?;
            let mut tc = TrainConfig {
                seed,
                ..TrainConfig::adapter_default()
            };
            ov.apply_train(&mut tc)?;
            if let Some(steps) = train_steps {
                tc.steps = steps;
            }
            let corpus = generate_training_corpus(seed, corpus_size, cfg.image_size)?;
            let mut model = harmony_core::train::build_variant(&base, variant, &cfg, seed)?;
            eprintln!(
                "adapter training ({}): {} steps",
                variant.name(),
                tc.steps
            );
            let log = harmony_core::train::train_adapter_with(
                &mut model,
                &corpus,
                &tc,
                periodic_saver(save_every, &out, CheckpointStage::Adapted),
            )?;
            save_checkpoint(&mut model, CheckpointStage::Adapted, &out)?;
            write_train_log(&log, &out.with_extension("losses.jsonl"))?;
            if let Some(dir) = out.parent() {
                write_run_record(
                    &RunRecord {
                        tool_version: TOOL_VERSION,
                        command: "train",
                        args: vec![
                            format!("--variant {}", variant.name()),
                            format!("--seed {seed}"),
                        ],
                        seed,
                        config: &model.cfg,
                        train: Some(&tc),
                    },
                    dir,
                )?;
            }
            let last = log.mean_loss(tc.steps.saturating_sub(100)..tc.steps);
            println!(
                "adapter ({}) -> {} (final loss {last:.4})",
                variant.name(),
                out.display()
            );
        }
        Command::SeedSearch {
            ckpt,
            caption,
            pools,
            threads,
            common,
        } => {
            let (mut model, _, _) = load_model(ckpt)?;
            common.overrides()?.apply_model(&mut model.cfg)?;
            let target = scene_from_caption(&caption, model.cfg.image_size)?;
            let scorer = BlobOracle::from_config(&model.cfg);
            let threads = threads.unwrap_or_else(default_threads);
            let pool = parallel_seed_search(&model, &target, &scorer, threads)?;
            let hits = pool.candidates.iter().filter(|c| c.accuracy == 1).count();
            println!(
                "searched {} seeds for {caption:?}: kept {} ({}/{} accurate)",
                model.cfg.pool_size,
                pool.candidates.len(),
                hits,
                pool.candidates.len()
            );
            for warning in &pool.warnings {
                eprintln!("warning: {warning}");
            }
            let mut store = PoolStore::load(&pools)?;
            store.insert(pool);
            store.save(&pools)?;
        }
        Command::Edit {
            image,
            prompt,
            ckpt,
            out,
            pools,
            seed,
            threads,
            common,
        } => {
            let (mut model, _, ckpt_path) = load_model(ckpt)?;
            common.overrides()?.apply_model(&mut model.cfg)?;
            std::fs::create_dir_all(&out)?;
            let source_img = read_png(&image)?;
            if source_img.h != model.cfg.image_size {
                bail!(
                    "image is {}px, model expects {}px",
                    source_img.h,
                    model.cfg.image_size
                );
            }
            let oracle = BlobOracle::from_config(&model.cfg);
            let source = detect_scene(&source_img, &oracle)?;
            let instruction = parse_instruction(&prompt, &source)?;
            let use_fixed = seed.is_some() || !model.cfg.use_pns;
            let (edited, outcome) = if use_fixed {
                harmony_core::pns::edit_fixed_seed(
                    &model,
                    &source_img,
                    &source,
                    &instruction,
                    seed.unwrap_or(0),
                )?
            } else {
                let pool_path = pools
                    .clone()
                    .unwrap_or_else(|| out.join("pools.jsonl"));
                let mut store = PoolStore::load(&pool_path)?;
                if store.get(&source.caption).is_none() {
                    eprintln!("no pool for {:?}; searching", source.caption);
                    let threads = threads.unwrap_or_else(default_threads);
                    let pool = parallel_seed_search(&model, &source, &oracle, threads)?;
                    store.insert(pool);
                    store.save(&pool_path)?;
                }
                let pool = store.get(&source.caption).expect("pool just ensured");
                harmony_core::pns::pns_edit(
                    &model,
                    &source_img,
                    &source,
                    &instruction,
                    pool,
                    &oracle,
                )?
            };
            let out_img = out.join("edited.png");
            write_png(&edited, &out_img)?;
            let sidecar = serde_json::json!({
                "source_image": image.display().to_string(),
                "checkpoint": ckpt_path.display().to_string(),
                "prompt": prompt,
                "source_caption": source.caption,
                "instruction_kind": instruction.kind.name(),
                "selected_seed": outcome.seed,
                "alignment": outcome.alignment,
                "degraded": outcome.degraded,
                "alpha": outcome.alpha,
                "beta": outcome.beta,
                "guidance": outcome.guidance,
                "steps": outcome.steps,
            });
            std::fs::write(
                out.join("edited.json"),
                serde_json::to_string_pretty(&sidecar)? + "\n",
            )?;
            write_run_record(
                &RunRecord {
                    tool_version: TOOL_VERSION,
                    command: "edit",
                    args: vec![format!("--prompt {prompt:?}")],
                    seed: outcome.seed,
                    config: &model.cfg,
                    train: None,
                },
                &out,
            )?;
            println!(
                "edited ({} -> {:?}) with seed {} -> {}",
                source.caption,
                prompt,
                outcome.seed,
                out_img.display()
            );
        }
        Command::Eval {
            bench,
            ckpt,
            out,
            max_count,
            max_edits,
            kinds,
            iou,
            seed,
            threads,
            common,
        } => {
            let (mut model, _, _) = load_model(ckpt)?;
            common.overrides()?.apply_model(&mut model.cfg)?;
            let entries = read_manifest(&bench)?;
            let opts = EvalOptions {
                kinds: kinds.as_deref().map(parse_kinds).transpose()?.unwrap_or_default(),
                max_count,
                max_edits,
                iou_threshold: iou,
                threads: threads.unwrap_or_else(default_threads),
                eval_seed: seed,
            };
            let edits = plan_edits(&entries, &opts);
            if edits.is_empty() {
                bail!("no edits to evaluate under the given filters");
            }
            std::fs::create_dir_all(&out)?;
            let store = if model.cfg.use_pns {
                let pool_path = out.join("pools.jsonl");
                let mut store = PoolStore::load(&pool_path)?;
                let scorer = BlobOracle::from_config(&model.cfg);
                let searched = ensure_pools(
                    &model,
                    &edits,
                    &mut store,
                    &scorer,
                    opts.threads,
                    |msg| eprintln!("{msg}"),
                )?;
                if searched > 0 {
                    store.save(&pool_path)?;
                }
                Some(store)
            } else {
                None
            };
            eprintln!("evaluating {} edits", edits.len());
            let records = evaluate(&model, &edits, store.as_ref(), &opts)?;
            write_records(&records, &out.join("records.jsonl"))?;
            let summary = summarize(&records, iou)?;
            let table = format_table(&[("run".to_string(), summary.clone())]);
            std::fs::write(out.join("summary.txt"), &table)?;
            std::fs::write(
                out.join("summary.json"),
                serde_json::to_string_pretty(&summary)? + "\n",
            )?;
            write_run_record(
                &RunRecord {
                    tool_version: TOOL_VERSION,
                    command: "eval",
                    args: vec![format!("--iou {iou}"), format!("--seed {seed}")],
                    seed,
                    config: &model.cfg,
                    train: None,
                },
                &out,
            )?;
            print!("{table}");
        }
        Command::Ablate {
            bench,
            ckpt,
            out,
            max_count,
            max_edits,
            kinds,
            seed,
            train_steps,
            corpus_size,
            threads,
            common,
        } => {
            let (base, stage, _) = load_model(ckpt)?;
            if stage != CheckpointStage::Pretrained {
                bail!("ablation starts from a stage-0 checkpoint");
            }
            let ov = common.overrides()?;
            let mut cfg = base.cfg.clone();
            ov.apply_model(&mut cfg)?;
            let mut base = base;
            base.cfg = cfg;
            let entries = read_manifest(&bench)?;
            let mut tc = TrainConfig {
                seed,
                ..TrainConfig::adapter_default()
            };
            ov.apply_train(&mut tc)?;
            if let Some(steps) = train_steps {
                tc.steps = steps;
            }
            let corpus = generate_training_corpus(seed, corpus_size, base.cfg.image_size)?;
            let opts = EvalOptions {
                kinds: parse_kinds(&kinds)?,
                max_count,
                max_edits,
                iou_threshold: 0.5,
                threads: threads.unwrap_or_else(default_threads),
                eval_seed: seed,
            };
            std::fs::create_dir_all(&out)?;
            let outcome = run_ablation(
                &base,
                &corpus,
                &entries,
                &AblationVariant::ALL,
                &tc,
                &opts,
                &harmony_cli::evalrun::default_work_dir(&out),
                |msg| eprintln!("{msg}"),
            )?;
            let table = ablation_table(&outcome);
            std::fs::write(out.join("ablation.txt"), &table)?;
            write_run_record(
                &RunRecord {
                    tool_version: TOOL_VERSION,
                    command: "ablate",
                    args: vec![format!("--seed {seed}")],
                    seed,
                    config: &base.cfg,
                    train: Some(&tc),
                },
                &out,
            )?;
            print!("{table}");
        }
    }
    Ok(())
}

/// Step hook that writes `<out>.stepN.ckpt` every `every` steps.
fn periodic_saver(
    every: Option<usize>,
    out: &Path,
    stage: CheckpointStage,
) -> impl FnMut(&mut ToyModel, usize, f64) + '_ {
    move |model, step, _loss| {
        if let Some(every) = every {
            if every > 0 && (step + 1) % every == 0 {
                let path = out.with_extension(format!("step{}.ckpt", step + 1));
                if let Err(e) = save_checkpoint(model, stage, &path) {
                    eprintln!("warning: periodic checkpoint failed: {e:#}");
                }
            }
        }
    }
}

fn write_train_log(log: &harmony_core::train::TrainLog, path: &Path) -> Result<()> {
    let mut out = String::new();
    for rec in &log.records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
