//! Count verification and alignment scoring.
//!
//! The [`AlignmentScorer`] trait is the pluggable evaluator interface: a
//! binary count check for seed search and a `[0, 1]` alignment score for
//! seed selection and reporting. The default implementation is
//! [`BlobOracle`], an exact connected-component counter for the synthetic
//! domain: pixels are classified by nearest class color (within a distance
//! threshold, otherwise background), per-class masks are labeled with
//! 8-connectivity, and every component at or above the minimum area becomes
//! one detection.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::HarmonyConfig;
use crate::error::Result;
use crate::math;
use crate::scene::{unit_to_u8, EditInstruction, EditKind, SceneSpec, CLASSES};
use crate::tensor::LatentImage;

/// One detection: class, normalized box, confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    /// `[x0, y0, x1, y1]` in `[0, 1]`, `x0 < x1`, `y0 < y1`.
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn count_of(&self, class_id: usize) -> usize {
        self.detections
            .iter()
            .filter(|d| d.class_id == class_id)
            .count()
    }

    /// The class with the most detections; ties resolve to the lower id.
    pub fn plurality_class(&self) -> Option<usize> {
        let mut counts = [0usize; CLASSES.len()];
        for d in &self.detections {
            counts[d.class_id] += 1;
        }
        (0..CLASSES.len())
            .filter(|&i| counts[i] > 0)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
    }
}

/// Behavioral contract of an evaluator: pure and deterministic. Failures
/// are surfaced as errors so callers can degrade gracefully.
pub trait AlignmentScorer {
    fn detect(&self, img: &LatentImage) -> Result<DetectionSet>;

    /// 1 iff the detected count of the target class equals the target count.
    fn count_accuracy(&self, img: &LatentImage, target: &SceneSpec) -> Result<u8> {
        let det = self.detect(img)?;
        Ok(u8::from(det.count_of(target.class_id) == target.count))
    }

    /// Alignment of an edited image with its instruction:
    /// `class_match * max(0, 1 - |detected - target| / target)`, where the
    /// class under test is the instruction's target class for class edits
    /// and the source class otherwise. `class_match` requires the class
    /// under test to be the plurality class among detections.
    fn alignment_score(
        &self,
        img: &LatentImage,
        instruction: &EditInstruction,
        source: &SceneSpec,
    ) -> Result<f64> {
        let det = self.detect(img)?;
        let class_id = match instruction.kind {
            EditKind::Class => instruction.target_id,
            _ => source.class_id,
        };
        let n = det.count_of(class_id);
        let class_match = det.plurality_class() == Some(class_id) && n > 0;
        if !class_match {
            return Ok(0.0);
        }
        let target = source.count as f64;
        let dev = (n as f64 - target).abs() / target;
        Ok((1.0 - dev).clamp(0.0, 1.0))
    }
}

/// Exact counting oracle for rendered and generated shape scenes.
#[derive(Debug, Clone)]
pub struct BlobOracle {
    /// Maximum RGB distance (0..=441) at which a pixel claims a class.
    pub threshold: f64,
    /// Minimum component area, in pixels.
    pub min_area: usize,
}

impl Default for BlobOracle {
    fn default() -> Self {
        Self {
            threshold: 90.0,
            min_area: 5,
        }
    }
}

impl BlobOracle {
    pub fn from_config(cfg: &HarmonyConfig) -> Self {
        Self {
            threshold: cfg.detect_threshold,
            min_area: cfg.detect_min_area,
        }
    }

    /// Nearest class for each pixel, or `usize::MAX` for background.
    fn classify(&self, img: &LatentImage) -> (Vec<usize>, Vec<f64>) {
        let (h, w) = (img.h, img.w);
        let mut labels = vec![usize::MAX; h * w];
        let mut dists = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let r = unit_to_u8(img.at(0, 0, y, x)) as f64;
                let g = unit_to_u8(img.at(0, 1.min(img.c - 1), y, x)) as f64;
                let b = unit_to_u8(img.at(0, 2.min(img.c - 1), y, x)) as f64;
                let mut best = usize::MAX;
                let mut best_d = f64::INFINITY;
                for (ci, class) in CLASSES.iter().enumerate() {
                    let dr = r - class.color[0] as f64;
                    let dg = g - class.color[1] as f64;
                    let db = b - class.color[2] as f64;
                    let d = math::sqrt(dr * dr + dg * dg + db * db);
                    if d < best_d {
                        best_d = d;
                        best = ci;
                    }
                }
                if best_d <= self.threshold {
                    labels[y * w + x] = best;
                    dists[y * w + x] = best_d;
                }
            }
        }
        (labels, dists)
    }
}

impl AlignmentScorer for BlobOracle {
    fn detect(&self, img: &LatentImage) -> Result<DetectionSet> {
        crate::require!(
            img.b == 1,
            "oracle expects a single image, got batch {}",
            img.b
        );
        let (h, w) = (img.h, img.w);
        let (labels, dists) = self.classify(img);
        let mut visited = vec![false; h * w];
        let mut detections = Vec::new();
        let mut stack = Vec::new();
        for start in 0..h * w {
            if visited[start] || labels[start] == usize::MAX {
                continue;
            }
            let class_id = labels[start];
            // flood fill with 8-connectivity over same-class pixels
            let mut area = 0usize;
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
            let mut dist_sum = 0.0;
            stack.push(start);
            visited[start] = true;
            while let Some(p) = stack.pop() {
                let (py, px) = (p / w, p % w);
                area += 1;
                dist_sum += dists[p];
                x0 = x0.min(px);
                y0 = y0.min(py);
                x1 = x1.max(px);
                y1 = y1.max(py);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = py as i64 + dy;
                        let nx = px as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let np = ny as usize * w + nx as usize;
                        if !visited[np] && labels[np] == class_id {
                            visited[np] = true;
                            stack.push(np);
                        }
                    }
                }
            }
            if area >= self.min_area {
                let mean_dist = dist_sum / area as f64;
                detections.push(Detection {
                    class_id,
                    bbox: [
                        x0 as f64 / w as f64,
                        y0 as f64 / h as f64,
                        (x1 + 1) as f64 / w as f64,
                        (y1 + 1) as f64 / h as f64,
                    ],
                    score: (1.0 - mean_dist / self.threshold).clamp(0.0, 1.0),
                });
            }
        }
        Ok(DetectionSet { detections })
    }
}

/// A scorer that always fails, for exercising degraded paths in tests.
#[derive(Debug, Clone, Default)]
pub struct FailingScorer;

impl AlignmentScorer for FailingScorer {
    fn detect(&self, _img: &LatentImage) -> Result<DetectionSet> {
        Err(crate::error::HarmonyError::UndefinedMetric(String::from(
            "scorer unavailable",
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::scene::{
        generate_benchmark, generate_scene, render_scene, LayoutKind, BACKGROUNDS, STYLES,
    };

    fn oracle() -> BlobOracle {
        BlobOracle::default()
    }

    #[test]
    fn blank_background_has_no_detections() {
        for bg in 0..BACKGROUNDS.len() {
            let mut rng = CounterRng::new(1);
            let mut scene = generate_scene(0, 1, LayoutKind::Grid, bg, 0, 32, &mut rng).unwrap();
            scene.boxes.clear();
            let img = render_scene(&scene, 32);
            let det = oracle().detect(&img).unwrap();
            assert!(det.detections.is_empty(), "background {bg}");
        }
    }

    #[test]
    fn fresh_render_detects_exact_count_and_class() {
        let mut rng = CounterRng::new(2);
        let scene = generate_scene(0, 3, LayoutKind::Random, 0, 0, 32, &mut rng).unwrap();
        let img = render_scene(&scene, 32);
        let det = oracle().detect(&img).unwrap();
        assert_eq!(det.detections.len(), 3);
        assert!(det.detections.iter().all(|d| d.class_id == 0));
        for d in &det.detections {
            assert!(d.score > 0.9, "clean render should score high");
            assert!(d.bbox[0] < d.bbox[2] && d.bbox[1] < d.bbox[3]);
        }
    }

    #[test]
    fn every_benchmark_scene_reverifies() {
        // Exhaustive sweep: detected count equals manifest count for all
        // 200 scenes.
        let bench = generate_benchmark(7, 32).unwrap();
        let oracle = oracle();
        for entry in &bench {
            let img = render_scene(&entry.scene, 32);
            let det = oracle.detect(&img).unwrap();
            assert_eq!(
                det.count_of(entry.scene.class_id),
                entry.scene.count,
                "scene {} ({})",
                entry.id,
                entry.scene.caption
            );
            assert_eq!(oracle.count_accuracy(&img, &entry.scene).unwrap(), 1);
        }
    }

    #[test]
    fn count_accuracy_is_binary_on_mismatch() {
        let mut rng = CounterRng::new(3);
        let scene7 = generate_scene(2, 7, LayoutKind::Grid, 0, 0, 32, &mut rng).unwrap();
        let img7 = render_scene(&scene7, 32);
        assert_eq!(oracle().count_accuracy(&img7, &scene7).unwrap(), 1);
        let mut target6 = scene7.clone();
        target6.count = 6;
        assert_eq!(oracle().count_accuracy(&img7, &target6).unwrap(), 0);
    }

    #[test]
    fn styles_change_palette_but_not_counts() {
        let mut rng = CounterRng::new(4);
        let base = generate_scene(4, 5, LayoutKind::Ring, 1, 0, 32, &mut rng).unwrap();
        let base_img = render_scene(&base, 32);
        let base_sum: f64 = base_img.data.iter().sum();
        for style in 1..STYLES.len() {
            let styled = SceneSpec {
                style_id: style,
                ..base.clone()
            };
            let img = render_scene(&styled, 32);
            let det = oracle().detect(&img).unwrap();
            assert_eq!(det.count_of(4), 5, "style {style}");
            let sum: f64 = img.data.iter().sum();
            assert_ne!(sum, base_sum, "style {style} should alter the palette");
        }
    }

    #[test]
    fn detection_is_translation_consistent() {
        let mut rng = CounterRng::new(5);
        let scene = generate_scene(1, 2, LayoutKind::Row, 0, 0, 32, &mut rng).unwrap();
        let img = render_scene(&scene, 32);
        // translate one pixel right and down, filling with background
        let mut moved = img.clone();
        let bgc = crate::scene::style_background_color(0, BACKGROUNDS[0].1);
        for c in 0..3 {
            let fill = crate::scene::u8_to_unit(bgc[c]);
            for y in 0..32 {
                for x in 0..32 {
                    *moved.at_mut(0, c, y, x) = fill;
                }
            }
            for y in 1..32 {
                for x in 1..32 {
                    *moved.at_mut(0, c, y, x) = img.at(0, c, y - 1, x - 1);
                }
            }
        }
        let a = oracle().detect(&img).unwrap();
        let b = oracle().detect(&moved).unwrap();
        assert_eq!(a.detections.len(), b.detections.len());
    }

    #[test]
    fn scorer_is_pure() {
        let mut rng = CounterRng::new(6);
        let scene = generate_scene(5, 4, LayoutKind::Grid, 2, 1, 32, &mut rng).unwrap();
        let img = render_scene(&scene, 32);
        let a = oracle().detect(&img).unwrap();
        let b = oracle().detect(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn alignment_score_formula() {
        let mut rng = CounterRng::new(8);
        // source: ten circles; edit: class -> squares
        let source = generate_scene(0, 10, LayoutKind::Grid, 0, 0, 32, &mut rng).unwrap();
        let instruction = EditInstruction {
            kind: EditKind::Class,
            target_id: 1,
            prompt: String::from("ten squares"),
        };
        // exact class and count scores 1.0
        let exact = generate_scene(1, 10, LayoutKind::Grid, 0, 0, 32, &mut rng).unwrap();
        let s = oracle()
            .alignment_score(&render_scene(&exact, 32), &instruction, &source)
            .unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        // eight squares against target ten: 1 - 2/10 = 0.8
        let eight = generate_scene(1, 8, LayoutKind::Grid, 0, 0, 32, &mut rng).unwrap();
        let s = oracle()
            .alignment_score(&render_scene(&eight, 32), &instruction, &source)
            .unwrap();
        assert!((s - 0.8).abs() < 1e-12);
        // wrong class entirely: zero
        let wrong = generate_scene(2, 10, LayoutKind::Grid, 0, 0, 32, &mut rng).unwrap();
        let s = oracle()
            .alignment_score(&render_scene(&wrong, 32), &instruction, &source)
            .unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn perfect_alignment_implies_count_accuracy() {
        let mut rng = CounterRng::new(9);
        for count in [1, 4, 9] {
            let source = generate_scene(3, count, LayoutKind::Random, 0, 0, 32, &mut rng).unwrap();
            let instruction = EditInstruction {
                kind: EditKind::Class,
                target_id: 6,
                prompt: String::from("stars"),
            };
            let edited = generate_scene(6, count, LayoutKind::Random, 0, 0, 32, &mut rng).unwrap();
            let img = render_scene(&edited, 32);
            let aln = oracle()
                .alignment_score(&img, &instruction, &source)
                .unwrap();
            if (aln - 1.0).abs() < 1e-12 {
                let target = instruction.apply(&source);
                assert_eq!(oracle().count_accuracy(&img, &target).unwrap(), 1);
            }
        }
    }

    #[test]
    fn scene_and_style_edits_score_against_source_class() {
        let mut rng = CounterRng::new(10);
        let source = generate_scene(0, 4, LayoutKind::Grid, 0, 0, 32, &mut rng).unwrap();
        let instruction = EditInstruction {
            kind: EditKind::Scene,
            target_id: 2,
            prompt: String::from("four circles on earth background"),
        };
        let edited = generate_scene(0, 4, LayoutKind::Grid, 2, 0, 32, &mut rng).unwrap();
        let s = oracle()
            .alignment_score(&render_scene(&edited, 32), &instruction, &source)
            .unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn failing_scorer_reports_errors() {
        let img = LatentImage::zeros(1, 3, 8, 8);
        assert!(FailingScorer.detect(&img).is_err());
    }
}
