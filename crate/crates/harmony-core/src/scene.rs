//! Synthetic shape-scene domain: class/background/style rosters, layout
//! generation, deterministic rasterization, and edit-instruction suites.
//!
//! Scenes are single-class: `count` shapes of one class over a solid
//! background, optionally restyled. Shape classes are keyed by color so the
//! counting oracle can classify pixels; glyph outlines are flavor. Boxes are
//! placed so that their 1-pixel dilations stay disjoint, which guarantees
//! both IoU 0 between boxes and separation of connected components under
//! 8-connectivity.

use alloc::format;
use alloc::string::String;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{HarmonyError, Result};
use crate::require;
use crate::rng::CounterRng;
use crate::tensor::LatentImage;

/// Shape classes. Colors are chosen pairwise-distant in RGB so nearest-color
/// classification stays correct under every style transform.
pub const CLASSES: [ClassDef; 8] = [
    ClassDef::new("circle", "circles", [220, 45, 45]),
    ClassDef::new("square", "squares", [55, 100, 235]),
    ClassDef::new("triangle", "triangles", [45, 195, 85]),
    ClassDef::new("diamond", "diamonds", [235, 220, 40]),
    ClassDef::new("cross", "crosses", [190, 60, 225]),
    ClassDef::new("ring", "rings", [55, 215, 215]),
    ClassDef::new("star", "stars", [250, 120, 20]),
    ClassDef::new("hex", "hexes", [250, 150, 170]),
];

pub const BACKGROUNDS: [(&str, [u8; 3]); 4] = [
    ("night", [20, 20, 24]),
    ("slate", [52, 58, 72]),
    ("earth", [70, 52, 40]),
    ("moss", [30, 56, 44]),
];

pub const STYLES: [&str; 4] = ["flat", "neon", "pastel", "deep"];

pub const COUNT_WORDS: [&str; 20] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
    "twenty",
];

pub const MAX_COUNT: usize = 20;

#[derive(Debug, Clone, Copy)]
pub struct ClassDef {
    pub name: &'static str,
    pub plural: &'static str,
    pub color: [u8; 3],
}

impl ClassDef {
    const fn new(name: &'static str, plural: &'static str, color: [u8; 3]) -> Self {
        Self {
            name,
            plural,
            color,
        }
    }

    /// Singular below two, plural from two up.
    pub fn word(&self, count: usize) -> &'static str {
        if count == 1 {
            self.name
        } else {
            self.plural
        }
    }
}

/// Style transform applied to shape colors.
pub fn style_shape_color(style_id: usize, c: [u8; 3]) -> [u8; 3] {
    let f = |v: u8| -> u8 {
        match style_id {
            1 => ((v as f64 * 1.2).min(255.0)) as u8,           // neon
            2 => (v as f64 + 0.2 * (255.0 - v as f64)) as u8,   // pastel
            3 => (v as f64 * 0.82) as u8,                        // deep
            _ => v,
        }
    };
    [f(c[0]), f(c[1]), f(c[2])]
}

/// Style transform applied to the background color.
pub fn style_background_color(style_id: usize, c: [u8; 3]) -> [u8; 3] {
    let f = |v: u8| -> u8 {
        match style_id {
            1 => (v as f64 * 0.55) as u8,
            2 => (v as f64 + 0.15 * (255.0 - v as f64)) as u8,
            3 => (v as f64 * 0.8) as u8,
            _ => v,
        }
    };
    [f(c[0]), f(c[1]), f(c[2])]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutKind {
    Grid,
    Row,
    Ring,
    Random,
}

impl LayoutKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayoutKind::Grid => "grid",
            LayoutKind::Row => "row",
            LayoutKind::Ring => "ring",
            LayoutKind::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(LayoutKind::Grid),
            "row" => Ok(LayoutKind::Row),
            "ring" => Ok(LayoutKind::Ring),
            "random" => Ok(LayoutKind::Random),
            other => Err(HarmonyError::Config(format!("unknown layout {other:?}"))),
        }
    }
}

/// Ground-truth description of one scene. Boxes are normalized
/// `[x0, y0, x1, y1]` with `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub class_id: usize,
    pub count: usize,
    pub boxes: Vec<[f64; 4]>,
    pub layout: LayoutKind,
    pub background_id: usize,
    pub style_id: usize,
    pub caption: String,
}

impl SceneSpec {
    pub fn class(&self) -> &'static ClassDef {
        &CLASSES[self.class_id]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditKind {
    Class,
    Scene,
    Style,
}

impl EditKind {
    pub fn name(&self) -> &'static str {
        match self {
            EditKind::Class => "class",
            EditKind::Scene => "scene",
            EditKind::Style => "style",
        }
    }
}

/// One editing instruction against a source scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditInstruction {
    pub kind: EditKind,
    /// Class id, background id, or style id depending on `kind`.
    pub target_id: usize,
    pub prompt: String,
}

impl EditInstruction {
    /// The scene the edited image should depict.
    pub fn apply(&self, source: &SceneSpec) -> SceneSpec {
        let mut target = source.clone();
        match self.kind {
            EditKind::Class => target.class_id = self.target_id,
            EditKind::Scene => target.background_id = self.target_id,
            EditKind::Style => target.style_id = self.target_id,
        }
        target.caption = self.prompt.clone();
        target
    }
}

/// Caption for a scene. Background and style are mentioned only when they
/// differ from the defaults, matching the edit-prompt templates.
pub fn scene_caption(class_id: usize, count: usize, background_id: usize, style_id: usize) -> String {
    let mut cap = format!("{} {}", COUNT_WORDS[count - 1], CLASSES[class_id].word(count));
    if background_id != 0 {
        cap.push_str(&format!(" on {} background", BACKGROUNDS[background_id].0));
    }
    if style_id != 0 {
        cap.push_str(&format!(" in {} style", STYLES[style_id]));
    }
    cap
}

// ---------------------------------------------------------------------------
// Layout generation
// ---------------------------------------------------------------------------

/// Integer pixel box `(x0, y0, x1, y1)`, half-open.
type PixBox = (usize, usize, usize, usize);

fn boxes_separated(a: PixBox, b: PixBox) -> bool {
    // 1-pixel dilations must stay disjoint.
    let (ax0, ay0, ax1, ay1) = a;
    let (bx0, by0, bx1, by1) = b;
    ax1 + 1 <= bx0 || bx1 + 1 <= ax0 || ay1 + 1 <= by0 || by1 + 1 <= ay0
}

fn shape_size(count: usize, canvas: usize) -> usize {
    let budget = ((canvas - 2) * (canvas - 2)) as f64 * 0.30 / count as f64;
    let s = crate::math::floor(crate::math::sqrt(budget)) as usize;
    s.clamp(3, canvas / 4)
}

fn place_grid(count: usize, s: usize, canvas: usize, rng: &mut CounterRng) -> Option<Vec<PixBox>> {
    let mut cols = 1;
    while cols * cols < count {
        cols += 1;
    }
    let rows = count.div_ceil(cols);
    let cell_w = (canvas - 2) / cols;
    let cell_h = (canvas - 2) / rows;
    if cell_w < s + 1 || cell_h < s + 1 {
        return None;
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (r, c) = (i / cols, i % cols);
        let slack_x = cell_w - s - 1;
        let slack_y = cell_h - s - 1;
        let jx = if slack_x > 0 { rng.next_below(slack_x + 1) } else { 0 };
        let jy = if slack_y > 0 { rng.next_below(slack_y + 1) } else { 0 };
        let x0 = 1 + c * cell_w + jx;
        let y0 = 1 + r * cell_h + jy;
        out.push((x0, y0, x0 + s, y0 + s));
    }
    Some(out)
}

fn place_row(count: usize, s: usize, canvas: usize, rng: &mut CounterRng) -> Option<Vec<PixBox>> {
    let per_row = ((canvas - 2) / (s + 1)).max(1);
    let rows = count.div_ceil(per_row);
    let row_h = (canvas - 2) / rows;
    if row_h < s + 1 {
        return None;
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (r, c) = (i / per_row, i % per_row);
        let in_this_row = if r == rows - 1 && count % per_row != 0 {
            count % per_row
        } else {
            per_row
        };
        let span = in_this_row * (s + 1);
        let left = 1 + (canvas - 2 - span) / 2;
        let jy = if row_h > s + 1 { rng.next_below(row_h - s - 1 + 1) } else { 0 };
        let x0 = left + c * (s + 1);
        let y0 = 1 + r * row_h + jy;
        out.push((x0, y0, x0 + s, y0 + s));
    }
    // Center spacing keeps 1-px gaps only if s+1 spacing holds; verify.
    for i in 0..out.len() {
        for j in 0..i {
            if !boxes_separated(out[i], out[j]) {
                return None;
            }
        }
    }
    Some(out)
}

fn place_ring(count: usize, s: usize, canvas: usize, rng: &mut CounterRng) -> Option<Vec<PixBox>> {
    let center = canvas as f64 / 2.0;
    let r_max = (canvas as f64 - 2.0 - s as f64) / 2.0 - 1.0;
    if r_max < 1.0 {
        return None;
    }
    let phase = rng.next_f64() * 2.0 * crate::math::PI;
    let try_place = |radius: f64, n: usize, phase: f64, out: &mut Vec<PixBox>| -> bool {
        for i in 0..n {
            let theta = phase + 2.0 * crate::math::PI * i as f64 / n as f64;
            let cx = center + radius * crate::math::cos(theta);
            let cy = center + radius * crate::math::sin(theta);
            let x0 = (cx - s as f64 / 2.0) as isize;
            let y0 = (cy - s as f64 / 2.0) as isize;
            if x0 < 1 || y0 < 1 {
                return false;
            }
            let bx = (x0 as usize, y0 as usize, x0 as usize + s, y0 as usize + s);
            if bx.2 >= canvas - 1 || bx.3 >= canvas - 1 {
                return false;
            }
            if out.iter().any(|&b| !boxes_separated(b, bx)) {
                return false;
            }
            out.push(bx);
        }
        true
    };
    let mut out: Vec<PixBox> = Vec::with_capacity(count);
    if count == 1 {
        return try_place(0.0, 1, phase, &mut out).then_some(out);
    }
    // Outer ring capacity from arc spacing; overflow goes to an inner ring.
    let capacity = ((2.0 * crate::math::PI * r_max) / (s as f64 + 1.5)) as usize;
    if capacity == 0 {
        return None;
    }
    let outer = count.min(capacity);
    if !try_place(r_max, outer, phase, &mut out) {
        return None;
    }
    let rest = count - outer;
    if rest > 0 {
        let inner_r = r_max - s as f64 - 1.5;
        if inner_r < 0.0 || !try_place(inner_r, rest, phase + 0.35, &mut out) {
            return None;
        }
    }
    Some(out)
}

fn place_random(count: usize, s: usize, canvas: usize, rng: &mut CounterRng) -> Option<Vec<PixBox>> {
    let mut out: Vec<PixBox> = Vec::with_capacity(count);
    let span = canvas - 1 - s;
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..200 {
            let x0 = 1 + rng.next_below(span - 1);
            let y0 = 1 + rng.next_below(span - 1);
            let bx = (x0, y0, x0 + s, y0 + s);
            if out.iter().all(|&b| boxes_separated(b, bx)) {
                out.push(bx);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(out)
}

/// Place `count` boxes under `layout`, shrinking the shape size on failure.
/// Layout kinds that cannot host the count fall back to `Random`.
fn place_boxes(
    count: usize,
    layout: LayoutKind,
    canvas: usize,
    rng: &mut CounterRng,
) -> Result<(Vec<PixBox>, usize)> {
    let mut s = shape_size(count, canvas);
    let mut attempts = 0;
    loop {
        for kind in [layout, LayoutKind::Random] {
            let got = match kind {
                LayoutKind::Grid => place_grid(count, s, canvas, rng),
                LayoutKind::Row => place_row(count, s, canvas, rng),
                LayoutKind::Ring => place_ring(count, s, canvas, rng),
                LayoutKind::Random => place_random(count, s, canvas, rng),
            };
            attempts += 1;
            if let Some(boxes) = got {
                return Ok((boxes, s));
            }
            if attempts > 400 {
                return Err(HarmonyError::LayoutExhausted { count, attempts });
            }
        }
        if s > 3 {
            s -= 1;
        }
    }
}

/// Build a scene with the given roster ids and a seeded layout draw.
pub fn generate_scene(
    class_id: usize,
    count: usize,
    layout: LayoutKind,
    background_id: usize,
    style_id: usize,
    canvas: usize,
    rng: &mut CounterRng,
) -> Result<SceneSpec> {
    require!(
        (1..=MAX_COUNT).contains(&count),
        "count {count} outside 1..={MAX_COUNT}"
    );
    require!(class_id < CLASSES.len(), "class id {class_id} out of roster");
    require!(
        background_id < BACKGROUNDS.len(),
        "background id {background_id} out of roster"
    );
    require!(style_id < STYLES.len(), "style id {style_id} out of roster");
    let (pix_boxes, _s) = place_boxes(count, layout, canvas, rng)?;
    let boxes = pix_boxes
        .iter()
        .map(|&(x0, y0, x1, y1)| {
            [
                x0 as f64 / canvas as f64,
                y0 as f64 / canvas as f64,
                x1 as f64 / canvas as f64,
                y1 as f64 / canvas as f64,
            ]
        })
        .collect();
    Ok(SceneSpec {
        class_id,
        count,
        boxes,
        layout,
        background_id,
        style_id,
        caption: scene_caption(class_id, count, background_id, style_id),
    })
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

/// Map a u8 channel value into the `[-1, 1]` pixel range.
pub fn u8_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`u8_to_unit`], with clamping for generated images.
pub fn unit_to_u8(v: f64) -> u8 {
    crate::math::round((v.clamp(-1.0, 1.0) + 1.0) * 127.5) as u8
}

fn glyph_covers(class_id: usize, dx: f64, dy: f64, half: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match class_id {
        0 => dx * dx + dy * dy <= half * half,                        // circle
        1 => ax <= half && ay <= half,                                // square
        2 => dy <= half && ax <= (dy + half) / 2.0 + 0.26,            // triangle
        3 => ax + ay <= half * 1.2,                                   // diamond
        4 => ax <= half / 2.6 + 0.3 || ay <= half / 2.6 + 0.3,        // cross (within box)
        5 => {
            let r2 = dx * dx + dy * dy;
            r2 <= half * half && r2 >= (half * 0.45) * (half * 0.45)  // ring
        }
        6 => ax + ay <= half * 1.25 || ax <= half * 0.35 || ay <= half * 0.35, // star
        _ => ax + ay <= half * 1.45 && ax <= half && ay <= half,      // hex
    }
}

/// Deterministically rasterize a scene at `canvas` pixels per side. Output
/// values lie exactly on the u8 grid so a lossless file round-trip is exact.
pub fn render_scene(spec: &SceneSpec, canvas: usize) -> LatentImage {
    let bg = style_background_color(spec.style_id, BACKGROUNDS[spec.background_id].1);
    let fg = style_shape_color(spec.style_id, CLASSES[spec.class_id].color);
    let mut img = LatentImage::zeros(1, 3, canvas, canvas);
    for ch in 0..3 {
        let v = u8_to_unit(bg[ch]);
        let plane = &mut img.data[ch * canvas * canvas..(ch + 1) * canvas * canvas];
        plane.fill(v);
    }
    for bx in &spec.boxes {
        let x0 = (bx[0] * canvas as f64) as usize;
        let y0 = (bx[1] * canvas as f64) as usize;
        let x1 = (bx[2] * canvas as f64) as usize;
        let y1 = (bx[3] * canvas as f64) as usize;
        let cx = (x0 + x1) as f64 / 2.0 - 0.5;
        let cy = (y0 + y1) as f64 / 2.0 - 0.5;
        let half = (x1 - x0) as f64 / 2.0;
        for y in y0..y1.min(canvas) {
            for x in x0..x1.min(canvas) {
                if glyph_covers(spec.class_id, x as f64 - cx, y as f64 - cy, half) {
                    for ch in 0..3 {
                        img.data[(ch * canvas + y) * canvas + x] = u8_to_unit(fg[ch]);
                    }
                }
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Instruction suites and benchmark assembly
// ---------------------------------------------------------------------------

/// Build `n` instructions for a scene: class edits, scene edits, and style
/// edits in an interleaved, seeded order. The kind receiving the extra
/// instruction rotates with `count` so the benchmark splits 4/3/3 evenly.
pub fn instruction_suite(spec: &SceneSpec, n: usize, seed: u64) -> Result<Vec<EditInstruction>> {
    require!(n >= 3, "instruction suite needs at least 3 entries, got {n}");
    let mut rng = CounterRng::new(crate::rng::substream(seed, 0x494E5354));
    let base = n / 3;
    let extra = n % 3;
    let rot = spec.count % 3;
    let mut quota = [base; 3]; // class, scene, style
    for i in 0..extra {
        quota[(rot + i) % 3] += 1;
    }
    let mut picks: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    // class targets differ from the source class
    let mut class_pool: Vec<usize> = (0..CLASSES.len()).filter(|&c| c != spec.class_id).collect();
    let mut bg_pool: Vec<usize> = (0..BACKGROUNDS.len())
        .filter(|&b| b != spec.background_id)
        .collect();
    let mut style_pool: Vec<usize> = (0..STYLES.len()).filter(|&s| s != spec.style_id).collect();
    for (k, pool) in [&mut class_pool, &mut bg_pool, &mut style_pool]
        .into_iter()
        .enumerate()
    {
        for _ in 0..quota[k] {
            if pool.is_empty() {
                pool.extend(match k {
                    0 => (0..CLASSES.len()).filter(|&c| c != spec.class_id).collect::<Vec<_>>(),
                    1 => (0..BACKGROUNDS.len())
                        .filter(|&b| b != spec.background_id)
                        .collect(),
                    _ => (0..STYLES.len()).filter(|&s| s != spec.style_id).collect(),
                });
            }
            let idx = rng.next_below(pool.len());
            picks[k].push(pool.remove(idx));
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut cursors = [0usize; 3];
    let mut kind_order = 0usize;
    while out.len() < n {
        let k = kind_order % 3;
        kind_order += 1;
        if cursors[k] >= picks[k].len() {
            continue;
        }
        let target = picks[k][cursors[k]];
        cursors[k] += 1;
        let (kind, prompt) = match k {
            0 => (
                EditKind::Class,
                scene_caption(target, spec.count, spec.background_id, spec.style_id),
            ),
            1 => (
                EditKind::Scene,
                scene_caption(spec.class_id, spec.count, target, spec.style_id),
            ),
            _ => (
                EditKind::Style,
                scene_caption(spec.class_id, spec.count, spec.background_id, target),
            ),
        };
        out.push(EditInstruction {
            kind,
            target_id: target,
            prompt,
        });
    }
    Ok(out)
}

/// One benchmark entry: a source scene plus its instruction suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub id: usize,
    pub scene: SceneSpec,
    pub instructions: Vec<EditInstruction>,
}

/// Deterministically generate the full benchmark: counts 1..=20, ten layout
/// draws per count, ten instructions per scene. Sources use the default
/// background and style; classes rotate through the roster.
pub fn generate_benchmark(seed: u64, canvas: usize) -> Result<Vec<BenchEntry>> {
    const LAYOUT_CYCLE: [LayoutKind; 4] = [
        LayoutKind::Grid,
        LayoutKind::Row,
        LayoutKind::Ring,
        LayoutKind::Random,
    ];
    let mut out = Vec::with_capacity(MAX_COUNT * 10);
    let mut id = 0;
    for count in 1..=MAX_COUNT {
        for layout_idx in 0..10 {
            let layout = LAYOUT_CYCLE[layout_idx % 4];
            let class_id = (count * 10 + layout_idx) % CLASSES.len();
            let mut rng = CounterRng::new(crate::rng::substream(seed, 0xB3 + id as u64));
            let scene = generate_scene(class_id, count, layout, 0, 0, canvas, &mut rng)?;
            let instructions = instruction_suite(&scene, 10, crate::rng::substream(seed, id as u64))?;
            out.push(BenchEntry {
                id,
                scene,
                instructions,
            });
            id += 1;
        }
    }
    Ok(out)
}

/// Procedurally generated training corpus, disjoint from the benchmark via a
/// salted seed stream: varied classes, counts, layouts, backgrounds, styles.
pub fn generate_training_corpus(seed: u64, size: usize, canvas: usize) -> Result<Vec<SceneSpec>> {
    const LAYOUT_CYCLE: [LayoutKind; 4] = [
        LayoutKind::Grid,
        LayoutKind::Row,
        LayoutKind::Ring,
        LayoutKind::Random,
    ];
    // A canvas fits roughly ((side - 2) / 4)^2 shapes at the minimum size;
    // cap counts so small test canvases stay placeable.
    let cells = (canvas - 2) / 4;
    let max_count = MAX_COUNT.min(cells * cells);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = CounterRng::new(crate::rng::substream(seed, 0x7261494E_0000 + i as u64));
        let count = 1 + rng.next_below(max_count);
        let class_id = rng.next_below(CLASSES.len());
        let layout = LAYOUT_CYCLE[rng.next_below(4)];
        let background_id = rng.next_below(BACKGROUNDS.len());
        let style_id = rng.next_below(STYLES.len());
        out.push(generate_scene(
            class_id,
            count,
            layout,
            background_id,
            style_id,
            canvas,
            &mut rng,
        )?);
    }
    Ok(out)
}
