//! Synthetic scenes: flat backgrounds with crisp colored shapes, plus the
//! captions and token layouts used for training.
//!
//! Scenes are built so the edge detector always sees every shape: each
//! background tone excludes the one color too close to it in luma, and
//! two-shape scenes also drop the highest-contrast color so the weaker
//! boundary still clears the relative hysteresis thresholds.

use rand::Rng;

use crate::canny::{canny_edges, EdgeMap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::masks::{
    boundary_band, PatchMask, PromptSpan, RegionRole, RegionSpan, SpanRole, TokenLayout,
};
use crate::text::{PromptRole, PromptTokens, Vocabulary, EMPTY_ID};

/// Blur width for edge maps over these scenes.
pub const EDGE_SIGMA: f64 = 1.0;
/// Weak hysteresis threshold, relative to the strongest gradient.
pub const EDGE_LOW: f64 = 0.15;
/// Strong hysteresis threshold, relative to the strongest gradient.
pub const EDGE_HIGH: f64 = 0.35;

/// Boundary-band width in patches, shared by the editing defaults and the
/// structured training records so both build the same layouts.
pub const BAND_RADIUS: usize = 2;

/// Default strength of injected control features. Training weights the
/// control branch the same way so the inference defaults stay on the
/// training distribution.
pub const CTRL_BETA: f64 = 0.8;

/// Rec. 601 luma.
pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn from_word(w: &str) -> Option<ShapeKind> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl ColorName {
    pub const ALL: [ColorName; 6] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::Cyan,
        ColorName::Magenta,
    ];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorName::Red => [0.85, 0.10, 0.10],
            ColorName::Green => [0.10, 0.80, 0.15],
            ColorName::Blue => [0.15, 0.20, 0.90],
            ColorName::Yellow => [0.95, 0.90, 0.20],
            ColorName::Cyan => [0.15, 0.85, 0.85],
            ColorName::Magenta => [0.85, 0.15, 0.80],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Cyan => "cyan",
            ColorName::Magenta => "magenta",
        }
    }

    pub fn from_word(w: &str) -> Option<ColorName> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BgKind {
    Dark,
    Light,
}

impl BgKind {
    pub fn value(self) -> f64 {
        match self {
            BgKind::Dark => 0.08,
            BgKind::Light => 0.92,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            BgKind::Dark => "dark",
            BgKind::Light => "light",
        }
    }

    /// Colors with enough luma contrast against this background.
    pub fn allowed_colors(self) -> &'static [ColorName] {
        match self {
            // Blue sits too close to the dark tone, yellow to the light one.
            BgKind::Dark => &[
                ColorName::Red,
                ColorName::Green,
                ColorName::Yellow,
                ColorName::Cyan,
                ColorName::Magenta,
            ],
            BgKind::Light => &[
                ColorName::Red,
                ColorName::Green,
                ColorName::Blue,
                ColorName::Cyan,
                ColorName::Magenta,
            ],
        }
    }

    /// Colors safe for scenes with several shapes: the strongest-contrast
    /// color is dropped so the weakest boundary stays above the relative
    /// strong threshold.
    pub fn paired_colors(self) -> &'static [ColorName] {
        match self {
            BgKind::Dark => &[
                ColorName::Red,
                ColorName::Green,
                ColorName::Cyan,
                ColorName::Magenta,
            ],
            BgKind::Light => &[
                ColorName::Red,
                ColorName::Green,
                ColorName::Cyan,
                ColorName::Magenta,
            ],
        }
    }
}

/// Binary coverage of a shape filling an `h` by `w` bounding box, tested at
/// pixel centers. The renderer and the scoring templates share this, so a
/// rendered shape matches its template exactly.
pub fn shape_coverage(shape: ShapeKind, h: usize, w: usize) -> Vec<bool> {
    let (hw, hh) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - hw;
            let dy = y as f64 + 0.5 - hh;
            let inside = match shape {
                ShapeKind::Square => true,
                ShapeKind::Circle => (dx / hw) * (dx / hw) + (dy / hh) * (dy / hh) <= 1.0,
                ShapeKind::Triangle => {
                    let down = y as f64 + 0.5; // distance from the box top
                    dx.abs() <= down / (h as f64) * hw
                }
            };
            out[y * w + x] = inside;
        }
    }
    out
}

/// A shape planted at an integer-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub shape: ShapeKind,
    pub color: ColorName,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl PlacedShape {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.size || y >= self.y0 + self.size {
            return false;
        }
        shape_coverage(self.shape, self.size, self.size)
            [(y - self.y0) * self.size + (x - self.x0)]
    }

    /// Patches touched by the bounding box (any-pixel rule).
    pub fn patch_mask(&self, image_size: usize, patch: usize) -> PatchMask {
        let grid = image_size / patch;
        let mut m = PatchMask::filled(grid, grid, false);
        let x1 = (self.x0 + self.size).min(image_size);
        let y1 = (self.y0 + self.size).min(image_size);
        for gy in self.y0 / patch..=(y1 - 1) / patch {
            for gx in self.x0 / patch..=(x1 - 1) / patch {
                m.set(gy, gx, true);
            }
        }
        m
    }

    /// Nearest of the five named anchor positions.
    pub fn position_word(&self, image_size: usize) -> &'static str {
        let cx = (self.x0 as f64 + self.size as f64 / 2.0) / image_size as f64;
        let cy = (self.y0 as f64 + self.size as f64 / 2.0) / image_size as f64;
        let mut best = "center";
        let mut bd = f64::INFINITY;
        for (word, ax, ay) in anchors() {
            let d = (cx - ax) * (cx - ax) + (cy - ay) * (cy - ay);
            if d < bd {
                bd = d;
                best = word;
            }
        }
        best
    }

    /// "red circle"
    pub fn phrase(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }

    /// "red circle on the left"
    pub fn clause(&self, image_size: usize) -> String {
        format!("{} on the {}", self.phrase(), self.position_word(image_size))
    }
}

fn anchors() -> [(&'static str, f64, f64); 5] {
    [
        ("left", 0.25, 0.5),
        ("right", 0.75, 0.5),
        ("top", 0.5, 0.25),
        ("bottom", 0.5, 0.75),
        ("center", 0.5, 0.5),
    ]
}

/// Bounding-box origin that centers a shape of `size` on a named anchor.
pub fn place_at(position: &str, size: usize, image_size: usize) -> Result<(usize, usize)> {
    let (_, ax, ay) = anchors()
        .into_iter()
        .find(|(w, _, _)| *w == position)
        .ok_or_else(|| Error::UnknownClass(format!("position {position}")))?;
    let hi = image_size.saturating_sub(size + 1).max(1);
    let clamp = |c: f64| -> usize {
        let o = c * image_size as f64 - size as f64 / 2.0;
        (o.round().max(1.0) as usize).min(hi)
    };
    Ok((clamp(ax), clamp(ay)))
}

/// One synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub bg: BgKind,
    pub shapes: Vec<PlacedShape>,
}

impl Scene {
    pub fn render(&self, image_size: usize) -> Image {
        let mut img = Image::zeros(image_size, image_size, 3);
        let b = self.bg.value();
        for v in img.data_mut() {
            *v = b;
        }
        for s in &self.shapes {
            let rgb = s.color.rgb();
            for y in s.y0..(s.y0 + s.size).min(image_size) {
                for x in s.x0..(s.x0 + s.size).min(image_size) {
                    if s.covers(x, y) {
                        for (ch, &c) in rgb.iter().enumerate() {
                            img.set(y, x, ch, c);
                        }
                    }
                }
            }
        }
        img
    }

    /// Full-image caption: clauses joined with "and".
    pub fn caption(&self, image_size: usize) -> String {
        self.shapes
            .iter()
            .map(|s| s.clause(image_size))
            .collect::<Vec<_>>()
            .join(" and ")
    }

    /// "dark background"
    pub fn background_phrase(&self) -> String {
        format!("{} background", self.bg.word())
    }

    pub fn edge_map(&self, image_size: usize) -> Result<EdgeMap> {
        canny_edges(&self.render(image_size), EDGE_SIGMA, EDGE_LOW, EDGE_HIGH)
    }
}

/// Parse "red circle" (in any word order, extra words ignored) into a scoring
/// class.
pub fn parse_class(text: &str) -> Result<(ColorName, ShapeKind)> {
    let words = crate::text::tokenize(text);
    let color = words.iter().find_map(|w| ColorName::from_word(w));
    let shape = words.iter().find_map(|w| ShapeKind::from_word(w));
    match (color, shape) {
        (Some(c), Some(s)) => Ok((c, s)),
        _ => Err(Error::UnknownClass(text.to_string())),
    }
}

/// How a training sample presents its caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    /// Whole-image caption; edge control on for half the draws.
    Plain,
    /// One shape treated as an edited region: a local prompt bound to its
    /// patches, a boundary band, the rest of the scene captioned as
    /// background, and a whole-image caption on top. Edge control on but
    /// weighted to zero over the region, exactly as at edit time. A share
    /// of these collapse every prompt to the empty token so the layout is
    /// also trained caption-free.
    Structured,
    /// Empty caption over a plain layout with edge control on.
    EmptyCaption,
}

/// One training sample: the image, its token layout, prompt ids, and the
/// edge map when control is on.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub kind: RecordKind,
    pub scene: Scene,
    pub image: Image,
    pub layout: TokenLayout,
    pub token_ids: Vec<usize>,
    pub edges: Option<EdgeMap>,
}

/// Shape size as a fraction of the image side, at least 2 pixels.
fn scaled_size(image_size: usize, fraction: f64) -> usize {
    ((image_size as f64 * fraction).round() as usize).max(2)
}

/// Sample one scene with `n_shapes` in 1..=2.
pub fn sample_scene(rng: &mut impl Rng, image_size: usize, n_shapes: usize) -> Scene {
    let bg = if rng.gen_bool(0.5) { BgKind::Dark } else { BgKind::Light };
    let mut shapes = Vec::with_capacity(n_shapes);
    if n_shapes == 1 {
        let positions = ["left", "right", "top", "bottom", "center"];
        let pos = positions[rng.gen_range(0..positions.len())];
        let size = scaled_size(image_size, [0.31, 0.375, 0.44][rng.gen_range(0..3)]);
        shapes.push(sample_placed(rng, bg.allowed_colors(), pos, size, image_size, &[]));
    } else {
        let pairs = [("left", "right"), ("top", "bottom")];
        let (a, b) = pairs[rng.gen_range(0..pairs.len())];
        let (a, b) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
        let palette = bg.paired_colors();
        let size_a = scaled_size(image_size, [0.31, 0.375][rng.gen_range(0..2)]);
        let size_b = scaled_size(image_size, [0.31, 0.375][rng.gen_range(0..2)]);
        let mut first = sample_placed(rng, palette, a, size_a, image_size, &[]);
        let mut second = sample_placed(rng, palette, b, size_b, image_size, &[first.color]);
        clamp_into_half(&mut first, a, image_size);
        clamp_into_half(&mut second, b, image_size);
        shapes.push(first);
        shapes.push(second);
    }
    Scene { bg, shapes }
}

/// Keep a paired shape strictly inside its own half of the image so the two
/// regions can never share a patch (the image half must be patch-aligned).
fn clamp_into_half(s: &mut PlacedShape, position: &str, image_size: usize) {
    let half = image_size / 2;
    match position {
        "left" => s.x0 = s.x0.min(half.saturating_sub(s.size)).max(1),
        "right" => s.x0 = s.x0.max(half),
        "top" => s.y0 = s.y0.min(half.saturating_sub(s.size)).max(1),
        "bottom" => s.y0 = s.y0.max(half),
        _ => {}
    }
}

fn sample_placed(
    rng: &mut impl Rng,
    palette: &[ColorName],
    position: &str,
    size: usize,
    image_size: usize,
    taken: &[ColorName],
) -> PlacedShape {
    let color = loop {
        let c = palette[rng.gen_range(0..palette.len())];
        if !taken.contains(&c) {
            break c;
        }
    };
    let shape = ShapeKind::ALL[rng.gen_range(0..3)];
    let (mut x0, mut y0) = place_at(position, size, image_size).expect("known anchor");
    let hi = image_size.saturating_sub(size + 1).max(1) as i64;
    let jitter = |v: usize, rng: &mut dyn rand::RngCore| -> usize {
        let d: i64 = rng.gen_range(-1..=1);
        (v as i64 + d).clamp(1, hi) as usize
    };
    x0 = jitter(x0, rng);
    y0 = jitter(y0, rng);
    PlacedShape { shape, color, x0, y0, size }
}

/// Sample one training record with the plain/structured/empty mix.
pub fn sample_record(
    vocab: &Vocabulary,
    rng: &mut impl Rng,
    image_size: usize,
    patch: usize,
) -> Result<TrainRecord> {
    let kind = match rng.gen_range(0..10) {
        0..=2 => RecordKind::Plain,
        3..=8 => RecordKind::Structured,
        _ => RecordKind::EmptyCaption,
    };
    let n_shapes = if rng.gen_bool(0.5) { 1 } else { 2 };
    let scene = sample_scene(rng, image_size, n_shapes);
    let image = scene.render(image_size);
    let grid = image_size / patch;
    let n_patches = grid * grid;

    match kind {
        RecordKind::Plain | RecordKind::EmptyCaption => {
            let text = if kind == RecordKind::Plain {
                scene.caption(image_size)
            } else {
                String::new()
            };
            let prompt = PromptTokens::encode(vocab, &text, PromptRole::Global);
            let layout = TokenLayout::plain(n_patches, prompt.ids.len());
            // Inversion runs captioned with live control, captioned sampling
            // runs without; cover both.
            let edges = if kind == RecordKind::EmptyCaption || rng.gen_bool(0.5) {
                Some(scene.edge_map(image_size)?)
            } else {
                None
            };
            Ok(TrainRecord { kind, scene, image, layout, token_ids: prompt.ids, edges })
        }
        RecordKind::Structured => {
            // Mirror the editing layout: one shape is the region, a band
            // wraps it, everything else is background.
            let subject_index = rng.gen_range(0..scene.shapes.len());
            let subject = scene.shapes[subject_index];
            let hard = subject.patch_mask(image_size, patch);
            let band = boundary_band(&hard, BAND_RADIUS);
            let bg = PatchMask::filled(grid, grid, true).minus(&hard).minus(&band);
            let mut regions =
                vec![RegionSpan { role: RegionRole::Edit(0), patches: hard.indices() }];
            if band.any() {
                regions.push(RegionSpan { role: RegionRole::Band, patches: band.indices() });
            }
            if bg.any() {
                regions.push(RegionSpan { role: RegionRole::Background, patches: bg.indices() });
            }

            // The rest of the scene plays the source image: its caption goes
            // to the background span, the full caption to the global span.
            let rest = Scene {
                bg: scene.bg,
                shapes: scene
                    .shapes
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != subject_index)
                    .map(|(_, s)| *s)
                    .collect(),
            };
            let rest_text = if rest.shapes.is_empty() {
                rest.background_phrase()
            } else {
                rest.caption(image_size)
            };
            let local = PromptTokens::encode(vocab, &subject.phrase(), PromptRole::Local(0));
            let bg_prompt = PromptTokens::encode(vocab, &rest_text, PromptRole::Background);
            let global = PromptTokens::encode(vocab, &scene.caption(image_size), PromptRole::Global);

            // A fifth of these drop every caption so the guidance branch that
            // sees empty prompts over this same layout is also on-distribution.
            let caption_free = rng.gen_bool(0.2);
            let span = |ids: &[usize]| if caption_free { 1 } else { ids.len() };
            let prompts = vec![
                PromptSpan { role: SpanRole::Local(0), len: span(&local.ids) },
                PromptSpan { role: SpanRole::Background, len: span(&bg_prompt.ids) },
                PromptSpan { role: SpanRole::Global, len: span(&global.ids) },
            ];
            let token_ids = if caption_free {
                vec![EMPTY_ID; 3]
            } else {
                let mut ids = local.ids.clone();
                ids.extend(bg_prompt.ids.iter().copied());
                ids.extend(global.ids.iter().copied());
                ids
            };
            let layout = TokenLayout::new(n_patches, regions, prompts)?;
            let edges = Some(scene.edge_map(image_size)?);
            Ok(TrainRecord { kind, scene, image, layout, token_ids, edges })
        }
    }
}

/// A seeded add-object task: a one-shape source scene, a disjoint region in
/// the opposite half where a new shape belongs, and the three prompts that
/// describe the edit.
#[derive(Debug, Clone)]
pub struct EditTask {
    /// Source scene (one shape).
    pub scene: Scene,
    /// Rendered source image.
    pub source: Image,
    /// Patch mask over the target bounding box.
    pub mask: PatchMask,
    /// Where the new shape should land.
    pub placed: PlacedShape,
    /// The source scene plus the new shape, used for reference renders.
    pub target_scene: Scene,
    /// Caption of the source scene.
    pub source_prompt: String,
    /// "color shape" for the new object.
    pub local_prompt: String,
    /// Caption of the target scene.
    pub target_prompt: String,
}

/// Sample an add-object task. The existing shape is clamped into one half of
/// the image and the new shape into the other, so their patch regions never
/// overlap. Requires patch-aligned image halves.
pub fn sample_edit_task(rng: &mut impl Rng, image_size: usize, patch: usize) -> Result<EditTask> {
    if (image_size / 2) % patch != 0 {
        return Err(Error::InvalidConfig(format!(
            "image half {} is not a multiple of patch {patch}",
            image_size / 2
        )));
    }
    let pairs = [("left", "right"), ("top", "bottom")];
    let (a, b) = pairs[rng.gen_range(0..pairs.len())];
    let (a, b) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
    let bg = if rng.gen_bool(0.5) { BgKind::Dark } else { BgKind::Light };
    let palette = bg.paired_colors();

    let size_a = scaled_size(image_size, [0.31, 0.375][rng.gen_range(0..2)]);
    let mut existing = sample_placed(rng, palette, a, size_a, image_size, &[]);
    clamp_into_half(&mut existing, a, image_size);
    let scene = Scene { bg, shapes: vec![existing] };
    let source = scene.render(image_size);

    let size_b = scaled_size(image_size, [0.31, 0.375][rng.gen_range(0..2)]);
    let mut placed = sample_placed(rng, palette, b, size_b, image_size, &[existing.color]);
    clamp_into_half(&mut placed, b, image_size);
    let mask = placed.patch_mask(image_size, patch);
    let target_scene = Scene { bg, shapes: vec![existing, placed] };

    Ok(EditTask {
        source_prompt: scene.caption(image_size),
        local_prompt: placed.phrase(),
        target_prompt: target_scene.caption(image_size),
        scene,
        source,
        mask,
        placed,
        target_scene,
    })
}
