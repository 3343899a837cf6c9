//! Proxy quality metrics over the synthetic scene grammar.
//!
//! Edits are judged three ways: how little the background moved (pixel MSE
//! and PSNR outside the dilated edit region), how well the structural layout
//! survived (edge-map IoU away from the edit), and whether the edited region
//! actually contains the requested color and shape (scored against the same
//! palette and coverage templates the renderer draws from). Region scores
//! read only pixels inside the region, so they cannot be gamed by background
//! changes, and a region rendered verbatim by the dataset scores exactly 1.

use serde::{Deserialize, Serialize};

use crate::canny::canny_edges;
use crate::dataset::{shape_coverage, BgKind, ColorName, ShapeKind};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::masks::PatchMask;

/// Everything one edit gets scored on. `psnr` is infinite when the
/// backgrounds are identical; background fields are absent when the edit
/// regions leave no background to compare; `mask_iou` is absent when there
/// is no reference mask to compare against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxyScores {
    pub background_mse: Option<f64>,
    pub psnr: Option<f64>,
    pub edge_iou_outside_mask: f64,
    /// Absent when the region prompt names no renderable class.
    pub region_target_score: Option<f64>,
    pub mask_iou: Option<f64>,
}

/// Peak signal-to-noise ratio in dB for unit-range images; infinite at zero
/// error by convention.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::ShapeMismatch(format!(
            "images {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Pixel side of one mask cell, inferred from the image it covers.
fn patch_side(img: &Image, mask: &PatchMask) -> Result<usize> {
    let (h, w) = (img.height(), img.width());
    let (mh, mw) = (mask.height(), mask.width());
    if mh == 0 || mw == 0 || h % mh != 0 || w % mw != 0 || h / mh != w / mw {
        return Err(Error::ShapeMismatch(format!(
            "mask grid {mh}x{mw} does not tile a {h}x{w} image"
        )));
    }
    Ok(h / mh)
}

/// Mean squared error and PSNR over pixels outside the edit region dilated
/// by `dilation` patches. Symmetric in the two images.
pub fn background_mse(
    source: &Image,
    edited: &Image,
    edit: &PatchMask,
    dilation: usize,
) -> Result<(f64, f64)> {
    check_same_shape(source, edited)?;
    let patch = patch_side(source, edit)?;
    let excluded = edit.dilate(dilation).to_pixels(patch);
    let ch = source.channels();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, &ex) in excluded.iter().enumerate() {
        if ex {
            continue;
        }
        for c in 0..ch {
            let d = source.data()[p * ch + c] - edited.data()[p * ch + c];
            sum += d * d;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyBackground);
    }
    let mse = sum / (n * ch) as f64;
    Ok((mse, psnr(mse)))
}

/// IoU between the edge maps of the two images, restricted to pixels outside
/// the edit region dilated by two patches. Both maps empty there counts as
/// perfect agreement.
pub fn edge_iou_outside_mask(
    source: &Image,
    edited: &Image,
    edit: &PatchMask,
    sigma: f64,
    low: f64,
    high: f64,
) -> Result<f64> {
    check_same_shape(source, edited)?;
    let patch = patch_side(source, edit)?;
    let excluded = edit.dilate(2).to_pixels(patch);
    let ea = canny_edges(source, sigma, low, high)?;
    let eb = canny_edges(edited, sigma, low, high)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, &ex) in excluded.iter().enumerate() {
        if ex {
            continue;
        }
        let (a, b) = (ea.data()[p], eb.data()[p]);
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// The full palette a region pixel can be attributed to: every object color
/// plus the two background grays.
fn palette() -> Vec<[f64; 3]> {
    let mut p: Vec<[f64; 3]> = ColorName::ALL.iter().map(|c| c.rgb()).collect();
    for bg in [BgKind::Dark, BgKind::Light] {
        let v = bg.value();
        p.push([v, v, v]);
    }
    p
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Largest distance between any two palette entries, the normalizer for the
/// color-margin term.
fn palette_diameter() -> f64 {
    let p = palette();
    let mut best = 0.0f64;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            best = best.max(dist(p[i], p[j]));
        }
    }
    best
}

/// All color-by-shape classes the grammar can name, in a fixed order.
pub fn grammar_classes() -> Vec<(ColorName, ShapeKind)> {
    let mut out = Vec::with_capacity(ColorName::ALL.len() * ShapeKind::ALL.len());
    for &c in &ColorName::ALL {
        for &s in &ShapeKind::ALL {
            out.push((c, s));
        }
    }
    out
}

struct RegionForeground {
    /// Row-major flags over the region's bounding box.
    cover: Vec<bool>,
    bbox_h: usize,
    bbox_w: usize,
    /// Colors of the foreground pixels.
    colors: Vec<[f64; 3]>,
    /// Per-pixel nearest-palette votes, in palette order.
    votes: Vec<usize>,
}

/// Foreground extraction: region pixels nearer to an object color than to
/// either background gray. Returns `None` when nothing qualifies.
fn region_foreground(img: &Image, edit: &PatchMask, patch: usize) -> Option<RegionForeground> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    debug_assert_eq!(ch, 3);
    let region = edit.to_pixels(patch);
    let pal = palette();
    let n_colors = ColorName::ALL.len();

    let mut pts: Vec<(usize, usize)> = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut votes = vec![0usize; pal.len()];
    for r in 0..h {
        for c in 0..w {
            if !region[r * w + c] {
                continue;
            }
            let px = [
                img.data()[(r * w + c) * ch],
                img.data()[(r * w + c) * ch + 1],
                img.data()[(r * w + c) * ch + 2],
            ];
            let nearest = (0..pal.len())
                .min_by(|&i, &j| dist(px, pal[i]).partial_cmp(&dist(px, pal[j])).unwrap())
                .unwrap();
            votes[nearest] += 1;
            if nearest < n_colors {
                pts.push((r, c));
                colors.push(px);
            }
        }
    }
    if pts.is_empty() {
        return None;
    }
    let (r0, r1) = (
        pts.iter().map(|p| p.0).min().unwrap(),
        pts.iter().map(|p| p.0).max().unwrap(),
    );
    let (c0, c1) = (
        pts.iter().map(|p| p.1).min().unwrap(),
        pts.iter().map(|p| p.1).max().unwrap(),
    );
    let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
    let mut cover = vec![false; bh * bw];
    for &(r, c) in &pts {
        cover[(r - r0) * bw + (c - c0)] = true;
    }
    Some(RegionForeground { cover, bbox_h: bh, bbox_w: bw, colors, votes })
}

fn score_foreground(fg: &RegionForeground, color: ColorName, shape: ShapeKind) -> f64 {
    let target = color.rgb();
    let idx = ColorName::ALL.iter().position(|&c| c == color).unwrap();
    let n = fg.colors.len();
    let frac = fg.votes[idx] as f64 / n as f64;
    let mean_dist = fg.colors.iter().map(|&px| dist(px, target)).sum::<f64>() / n as f64;
    let margin = (1.0 - mean_dist / palette_diameter()).max(0.0);
    let s_color = 0.5 * frac + 0.5 * margin;

    let template = shape_coverage(shape, fg.bbox_h, fg.bbox_w);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (a, b) in fg.cover.iter().zip(&template) {
        if *a && *b {
            inter += 1;
        }
        if *a || *b {
            union += 1;
        }
    }
    let s_shape = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    s_color * s_shape
}

/// How well the edit region matches a grammar class, in [0, 1]. Reads only
/// pixels inside the region; an exact render of the class scores 1, an
/// untouched background region scores 0.
pub fn region_target_score(
    edited: &Image,
    edit: &PatchMask,
    color: ColorName,
    shape: ShapeKind,
) -> Result<f64> {
    if edited.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "region scoring needs 3 channels, image has {}",
            edited.channels()
        )));
    }
    let patch = patch_side(edited, edit)?;
    match region_foreground(edited, edit, patch) {
        None => Ok(0.0),
        Some(fg) => Ok(score_foreground(&fg, color, shape)),
    }
}

/// Scores the region against every grammar class and returns them best
/// first, ties broken by the fixed class order.
pub fn rank_classes(edited: &Image, edit: &PatchMask) -> Result<Vec<((ColorName, ShapeKind), f64)>> {
    if edited.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "region scoring needs 3 channels, image has {}",
            edited.channels()
        )));
    }
    let patch = patch_side(edited, edit)?;
    let fg = region_foreground(edited, edit, patch);
    let mut out: Vec<((ColorName, ShapeKind), f64)> = grammar_classes()
        .into_iter()
        .map(|(c, s)| {
            let score = match &fg {
                None => 0.0,
                Some(fg) => score_foreground(fg, c, s),
            };
            ((c, s), score)
        })
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{PlacedShape, Scene};

    fn scene_with(color: ColorName, shape: ShapeKind) -> (Scene, PatchMask) {
        let placed = PlacedShape { shape, color, x0: 10, y0: 10, size: 12 };
        let mask = placed.patch_mask(32, 4);
        let scene = Scene { bg: BgKind::Dark, shapes: vec![placed] };
        (scene, mask)
    }

    #[test]
    fn identical_images_score_zero_error_and_infinite_psnr() {
        let (scene, mask) = scene_with(ColorName::Red, ShapeKind::Circle);
        let img = scene.render(32);
        let (mse, p) = background_mse(&img, &img, &mask, 1).unwrap();
        assert_eq!(mse, 0.0);
        assert!(p.is_infinite());
        let iou = edge_iou_outside_mask(&img, &img, &mask, 1.0, 0.15, 0.35).unwrap();
        assert_eq!(iou, 1.0);
    }

    #[test]
    fn changes_inside_the_dilated_region_are_ignored() {
        let (scene, mask) = scene_with(ColorName::Green, ShapeKind::Square);
        let img = scene.render(32);
        let mut edited = img.clone();
        // Scribble over the region itself.
        for r in 10..22 {
            for c in 10..22 {
                for ch in 0..3 {
                    edited.set(r, c, ch, 1.0 - edited.get(r, c, ch));
                }
            }
        }
        let (mse, _) = background_mse(&img, &edited, &mask, 1).unwrap();
        assert_eq!(mse, 0.0);
    }

    #[test]
    fn uniform_background_shift_gives_its_square_as_mse() {
        let (scene, mask) = scene_with(ColorName::Cyan, ShapeKind::Circle);
        let img = scene.render(32);
        let excluded = mask.dilate(1).to_pixels(4);
        let mut edited = img.clone();
        for r in 0..32 {
            for c in 0..32 {
                if excluded[r * 32 + c] {
                    continue;
                }
                for ch in 0..3 {
                    edited.set(r, c, ch, edited.get(r, c, ch) + 0.1);
                }
            }
        }
        let (mse, p) = background_mse(&img, &edited, &mask, 1).unwrap();
        assert!((mse - 0.01).abs() < 1e-12, "mse {mse}");
        assert!((p - 20.0).abs() < 1e-9);
    }

    #[test]
    fn blurring_the_background_lowers_edge_agreement() {
        let scene = Scene {
            bg: BgKind::Light,
            shapes: vec![
                PlacedShape {
                    shape: ShapeKind::Square,
                    color: ColorName::Blue,
                    x0: 4,
                    y0: 4,
                    size: 10,
                },
                PlacedShape {
                    shape: ShapeKind::Circle,
                    color: ColorName::Red,
                    x0: 18,
                    y0: 18,
                    size: 11,
                },
            ],
        };
        let img = scene.render(32).to_grayscale();
        let mask = scene.shapes[1].patch_mask(32, 4);
        let blurred = crate::canny::gaussian_blur(&img, 1.4).unwrap();
        let iou = edge_iou_outside_mask(&img, &blurred, &mask, 1.0, 0.15, 0.35).unwrap();
        assert!(iou < 1.0, "blur did not move any edges: {iou}");
    }

    #[test]
    fn rendered_region_scores_exactly_one_for_its_own_class() {
        for (color, shape) in [
            (ColorName::Blue, ShapeKind::Square),
            (ColorName::Red, ShapeKind::Circle),
            (ColorName::Magenta, ShapeKind::Triangle),
        ] {
            let (scene, mask) = scene_with(color, shape);
            let img = scene.render(32);
            let s = region_target_score(&img, &mask, color, shape).unwrap();
            if shape == ShapeKind::Triangle {
                // The apex row of a rasterized triangle can fall outside its
                // own tight bounding box, so only near-perfect here.
                assert!(s > 0.85, "triangle score {s}");
            } else {
                assert_eq!(s, 1.0, "{color:?} {shape:?} scored {s}");
            }
        }
    }

    #[test]
    fn empty_and_wrong_color_regions_order_correctly() {
        let (scene, mask) = scene_with(ColorName::Green, ShapeKind::Square);
        let img = scene.render(32);
        // Score an untouched background patch area: move the mask elsewhere.
        let mut far = PatchMask::filled(8, 8, false);
        for r in 0..2 {
            for c in 6..8 {
                far.set(r, c, true);
            }
        }
        let empty_score =
            region_target_score(&img, &far, ColorName::Blue, ShapeKind::Square).unwrap();
        assert_eq!(empty_score, 0.0);

        let wrong_color =
            region_target_score(&img, &mask, ColorName::Blue, ShapeKind::Square).unwrap();
        let right = region_target_score(&img, &mask, ColorName::Green, ShapeKind::Square).unwrap();
        assert!(wrong_color > empty_score && wrong_color < right);
        assert!(right > 0.5 && wrong_color < 0.5);
    }

    #[test]
    fn rendered_classes_rank_themselves_first() {
        for (color, shape) in grammar_classes() {
            let (scene, mask) = scene_with(color, shape);
            let img = scene.render(32);
            let ranked = rank_classes(&img, &mask).unwrap();
            assert_eq!(ranked[0].0, (color, shape), "misranked: {:?}", &ranked[..3]);
        }
    }

    #[test]
    fn region_score_ignores_pixels_outside_the_region() {
        let (scene, mask) = scene_with(ColorName::Yellow, ShapeKind::Circle);
        let img = scene.render(32);
        let mut vandalized = img.clone();
        let region = mask.to_pixels(4);
        for r in 0..32 {
            for c in 0..32 {
                if region[r * 32 + c] {
                    continue;
                }
                for ch in 0..3 {
                    vandalized.set(r, c, ch, ((r + c + ch) % 2) as f64);
                }
            }
        }
        let a = region_target_score(&img, &mask, ColorName::Yellow, ShapeKind::Circle).unwrap();
        let b =
            region_target_score(&vandalized, &mask, ColorName::Yellow, ShapeKind::Circle).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
