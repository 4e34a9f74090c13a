//! Benchmark directory layout and manifest format.
//!
//! `bench --out DIR` produces:
//!
//! ```text
//! DIR/
//!   manifest.jsonl     one JSON object per scene, field order fixed
//!   images/scene_<id>.png
//!   run.json           reproducibility record
//! ```
//!
//! Manifest record fields, in order: `id`, `image`, `class`, `count`,
//! `layout`, `boxes`, `caption`, `background`, `style`, `instructions`;
//! each instruction carries `kind`, `target`, `prompt`. Names are roster
//! words rather than ids so the file reads naturally; parsing maps them
//! back.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use harmony_core::scene::{
    render_scene, BenchEntry, EditInstruction, EditKind, LayoutKind, SceneSpec, BACKGROUNDS,
    CLASSES, STYLES,
};
use harmony_core::scorer::{AlignmentScorer, BlobOracle};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub kind: String,
    pub target: String,
    pub prompt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub image: String,
    pub class: String,
    pub count: usize,
    pub layout: String,
    pub boxes: Vec<[f64; 4]>,
    pub caption: String,
    pub background: String,
    pub style: String,
    pub instructions: Vec<InstructionRecord>,
}

fn class_id(name: &str) -> Result<usize> {
    CLASSES
        .iter()
        .position(|c| c.name == name)
        .with_context(|| format!("unknown class {name:?}"))
}

fn background_id(name: &str) -> Result<usize> {
    BACKGROUNDS
        .iter()
        .position(|(n, _)| *n == name)
        .with_context(|| format!("unknown background {name:?}"))
}

fn style_id(name: &str) -> Result<usize> {
    STYLES
        .iter()
        .position(|n| *n == name)
        .with_context(|| format!("unknown style {name:?}"))
}

fn instruction_to_record(inst: &EditInstruction) -> InstructionRecord {
    let target = match inst.kind {
        EditKind::Class => CLASSES[inst.target_id].name.to_string(),
        EditKind::Scene => BACKGROUNDS[inst.target_id].0.to_string(),
        EditKind::Style => STYLES[inst.target_id].to_string(),
    };
    InstructionRecord {
        kind: inst.kind.name().to_string(),
        target,
        prompt: inst.prompt.clone(),
    }
}

fn instruction_from_record(rec: &InstructionRecord) -> Result<EditInstruction> {
    let (kind, target_id) = match rec.kind.as_str() {
        "class" => (EditKind::Class, class_id(&rec.target)?),
        "scene" => (EditKind::Scene, background_id(&rec.target)?),
        "style" => (EditKind::Style, style_id(&rec.target)?),
        other => bail!("unknown instruction kind {other:?}"),
    };
    Ok(EditInstruction {
        kind,
        target_id,
        prompt: rec.prompt.clone(),
    })
}

pub fn entry_to_record(entry: &BenchEntry) -> ManifestRecord {
    ManifestRecord {
        id: entry.id,
        image: format!("images/scene_{:03}.png", entry.id),
        class: entry.scene.class().name.to_string(),
        count: entry.scene.count,
        layout: entry.scene.layout.name().to_string(),
        boxes: entry.scene.boxes.clone(),
        caption: entry.scene.caption.clone(),
        background: BACKGROUNDS[entry.scene.background_id].0.to_string(),
        style: STYLES[entry.scene.style_id].to_string(),
        instructions: entry.instructions.iter().map(instruction_to_record).collect(),
    }
}

pub fn entry_from_record(rec: &ManifestRecord) -> Result<BenchEntry> {
    let scene = SceneSpec {
        class_id: class_id(&rec.class)?,
        count: rec.count,
        boxes: rec.boxes.clone(),
        layout: LayoutKind::parse(&rec.layout)?,
        background_id: background_id(&rec.background)?,
        style_id: style_id(&rec.style)?,
        caption: rec.caption.clone(),
    };
    let instructions = rec
        .instructions
        .iter()
        .map(instruction_from_record)
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchEntry {
        id: rec.id,
        scene,
        instructions,
    })
}

/// Render and write the whole benchmark: PNGs, the manifest, and oracle
/// re-verification of every scene before inclusion.
pub fn write_benchmark(entries: &[BenchEntry], canvas: usize, out_dir: &Path) -> Result<PathBuf> {
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)
        .with_context(|| format!("creating {}", images_dir.display()))?;
    let oracle = BlobOracle::default();
    let mut lines = Vec::with_capacity(entries.len());
    for entry in entries {
        let img = render_scene(&entry.scene, canvas);
        if oracle.count_accuracy(&img, &entry.scene)? != 1 {
            bail!(
                "scene {} failed oracle verification before inclusion",
                entry.id
            );
        }
        let rec = entry_to_record(entry);
        crate::imgio::write_png(&img, &out_dir.join(&rec.image))?;
        lines.push(serde_json::to_string(&rec)?);
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut f = fs::File::create(&manifest_path)?;
    for line in &lines {
        writeln!(f, "{line}")?;
    }
    Ok(manifest_path)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<BenchEntry>> {
    let path = dir.join("manifest.jsonl");
    let f = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).with_context(|| format!("manifest line {}", i + 1))?;
        entries.push(entry_from_record(&rec)?);
    }
    if entries.is_empty() {
        bail!("manifest {} holds no records", path.display());
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use harmony_core::scene::generate_benchmark;

    #[test]
    fn manifest_round_trips_through_disk() {
        let entries = generate_benchmark(3, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_benchmark(&entries, 32, dir.path()).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(entries, back);
        // every referenced image exists and reverifies
        let oracle = BlobOracle::default();
        for entry in &back {
            let img = crate::imgio::read_png(
                &dir.path().join(format!("images/scene_{:03}.png", entry.id)),
            )
            .unwrap();
            assert_eq!(oracle.count_accuracy(&img, &entry.scene).unwrap(), 1);
        }
    }

    #[test]
    fn regeneration_with_same_seed_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        for dir in [&dir_a, &dir_b] {
            let entries = generate_benchmark(9, 32).unwrap();
            write_benchmark(&entries, 32, dir.path()).unwrap();
        }
        let a = fs::read(dir_a.path().join("manifest.jsonl")).unwrap();
        let b = fs::read(dir_b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_manifest(dir.path()).is_err());
    }
}
