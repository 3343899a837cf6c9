//! Patch masks, soft point masks, token layouts, and attention masks.
//!
//! The token sequence seen by the transformer is all image patches (row-major
//! grid order) followed by the prompt spans in declaration order. A
//! [`TokenLayout`] names which patches belong to which region and how long
//! each prompt span is; [`build_attention_mask`] turns that into a boolean
//! keep/drop matrix. Masking is exclusion before softmax, never a multiply:
//! dropped pairs get exactly zero attention weight.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Shared clamp floor for soft masks and log biases.
pub const MASK_EPSILON: f64 = 1e-4;

/// Boolean patch grid; `true` marks editable patches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl PatchMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::DimensionMismatch(format!(
                "{h}x{w} patch mask with {} entries",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: bool) -> Self {
        Self { h, w, data: vec![v; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|&i| self.data[i]).collect()
    }

    /// Chebyshev (8-connected) dilation by `radius` patches.
    pub fn dilate(&self, radius: usize) -> PatchMask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let mut out = PatchMask::filled(self.h, self.w, false);
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let mut hit = false;
                'scan: for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny >= 0
                            && nx >= 0
                            && ny < self.h as isize
                            && nx < self.w as isize
                            && self.get(ny as usize, nx as usize)
                        {
                            hit = true;
                            break 'scan;
                        }
                    }
                }
                out.set(y as usize, x as usize, hit);
            }
        }
        out
    }

    pub fn union(&self, other: &PatchMask) -> PatchMask {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect();
        PatchMask { h: self.h, w: self.w, data }
    }

    pub fn intersect(&self, other: &PatchMask) -> PatchMask {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect();
        PatchMask { h: self.h, w: self.w, data }
    }

    pub fn minus(&self, other: &PatchMask) -> PatchMask {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && !b).collect();
        PatchMask { h: self.h, w: self.w, data }
    }

    pub fn iou(&self, other: &PatchMask) -> f64 {
        let inter = self.intersect(other).count();
        let uni = self.union(other).count();
        if uni == 0 {
            1.0
        } else {
            inter as f64 / uni as f64
        }
    }

    /// Center of mass of the true patches in normalized (x, y) coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for r in 0..self.h {
            for c in 0..self.w {
                if self.get(r, c) {
                    n += 1;
                    sx += (c as f64 + 0.5) / self.w as f64;
                    sy += (r as f64 + 0.5) / self.h as f64;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Lift to a pixel-level mask.
    pub fn to_pixels(&self, patch: usize) -> Vec<bool> {
        let (ph, pw) = (self.h * patch, self.w * patch);
        let mut out = vec![false; ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                out[y * pw + x] = self.get(y / patch, x / patch);
            }
        }
        out
    }
}

/// Collapse a pixel mask (values > 0.5 are editable) to the patch grid: a
/// patch is editable if any of its pixels is.
pub fn pixel_mask_to_patch_mask(mask: &Image, patch: usize) -> Result<PatchMask> {
    let (h, w) = (mask.height(), mask.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{h}x{w} pixels not divisible into {patch}x{patch} patches"
        )));
    }
    let gray = mask.to_grayscale();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = PatchMask::filled(gh, gw, false);
    for y in 0..h {
        for x in 0..w {
            if gray.get(y, x, 0) > 0.5 {
                out.set(y / patch, x / patch, true);
            }
        }
    }
    Ok(out)
}

/// The ring of patches within `radius` (Chebyshev) of the editable region but
/// not inside it.
pub fn boundary_band(edit: &PatchMask, radius: usize) -> PatchMask {
    edit.dilate(radius).minus(edit)
}

/// Soft editability in `[epsilon, 1]`, peaking at a hinted point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl SoftMask {
    /// Build from explicit per-patch values, which must lie in `(0, 1]`.
    pub fn from_values(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {h}x{w} grid",
                data.len()
            )));
        }
        if data.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::InvalidConfig(
                "soft mask values must lie in (0, 1]".into(),
            ));
        }
        Ok(Self { h, w, data })
    }

    /// Hard mask lifted to soft values: 1 inside, `epsilon` outside.
    pub fn from_hard(mask: &PatchMask, epsilon: f64) -> Self {
        Self {
            h: mask.height(),
            w: mask.width(),
            data: mask.data().iter().map(|&b| if b { 1.0 } else { epsilon }).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// First row-major argmax.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut bv = f64::NEG_INFINITY;
        for r in 0..self.h {
            for c in 0..self.w {
                if self.get(r, c) > bv {
                    bv = self.get(r, c);
                    best = (r, c);
                }
            }
        }
        best
    }

    /// Patches whose soft value exceeds `threshold`.
    pub fn support(&self, threshold: f64) -> PatchMask {
        PatchMask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| v > threshold).collect(),
        }
    }

    /// Pointwise maximum of several soft masks.
    pub fn union_max(masks: &[&SoftMask]) -> SoftMask {
        assert!(!masks.is_empty());
        let mut out = masks[0].clone();
        for m in &masks[1..] {
            for (o, &v) in out.data.iter_mut().zip(&m.data) {
                *o = o.max(v);
            }
        }
        out
    }
}

/// Soft mask from a hint point in normalized `[0,1]^2` coordinates
/// (x rightward, y downward): each patch center gets
/// `clamp(1 - distance, epsilon, 1)`.
pub fn soft_mask_from_point(
    point: (f64, f64),
    grid_h: usize,
    grid_w: usize,
    epsilon: f64,
) -> Result<SoftMask> {
    let (x, y) = point;
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::OutOfRangePoint(x, y));
    }
    let mut data = Vec::with_capacity(grid_h * grid_w);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let cx = (c as f64 + 0.5) / grid_w as f64;
            let cy = (r as f64 + 0.5) / grid_h as f64;
            let d = ((cx - x) * (cx - x) + (cy - y) * (cy - y)).sqrt();
            data.push((1.0 - d).clamp(epsilon, 1.0));
        }
    }
    Ok(SoftMask { h: grid_h, w: grid_w, data })
}

/// Per-patch additive attention bias `ln(soft + epsilon)`.
pub fn log_bias(soft: &SoftMask, epsilon: f64) -> Vec<f64> {
    soft.data.iter().map(|&v| (v + epsilon).ln()).collect()
}

/// Which image region a patch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionRole {
    /// Editable region `k` (0-based).
    Edit(usize),
    /// Background outside any edit region or band.
    Background,
    /// Boundary band around the editable regions.
    Band,
}

/// Which region a prompt span addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanRole {
    /// Local prompt for edit region `k`.
    Local(usize),
    /// Background prompt; covers background and band patches.
    Background,
    /// Global prompt; covers every patch.
    Global,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSpan {
    pub role: RegionRole,
    pub patches: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSpan {
    pub role: SpanRole,
    pub len: usize,
}

/// Region and prompt structure of one token sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenLayout {
    n_patches: usize,
    regions: Vec<RegionSpan>,
    prompts: Vec<PromptSpan>,
    /// Region index per patch.
    patch_region: Vec<usize>,
}

impl TokenLayout {
    pub fn new(
        n_patches: usize,
        regions: Vec<RegionSpan>,
        prompts: Vec<PromptSpan>,
    ) -> Result<Self> {
        let mut patch_region = vec![usize::MAX; n_patches];
        let mut n_edit = 0usize;
        let mut n_bg = 0usize;
        let mut n_band = 0usize;
        let mut edit_ids = Vec::new();
        for (ri, region) in regions.iter().enumerate() {
            match region.role {
                RegionRole::Edit(k) => {
                    n_edit += 1;
                    edit_ids.push(k);
                }
                RegionRole::Background => n_bg += 1,
                RegionRole::Band => n_band += 1,
            }
            for &p in &region.patches {
                if p >= n_patches {
                    return Err(Error::InvalidLayout(format!(
                        "patch {p} outside grid of {n_patches}"
                    )));
                }
                if patch_region[p] != usize::MAX {
                    return Err(Error::InvalidLayout(format!(
                        "patch {p} assigned to two regions"
                    )));
                }
                patch_region[p] = ri;
            }
        }
        if patch_region.iter().any(|&r| r == usize::MAX) {
            return Err(Error::InvalidLayout(
                "image spans do not cover the patch grid".into(),
            ));
        }
        edit_ids.sort_unstable();
        edit_ids.dedup();
        if edit_ids.len() != n_edit {
            return Err(Error::InvalidLayout("duplicate edit region id".into()));
        }
        if edit_ids.iter().enumerate().any(|(i, &k)| i != k) {
            return Err(Error::InvalidLayout(
                "edit region ids must be dense from 0".into(),
            ));
        }
        if n_bg > 1 || n_band > 1 {
            return Err(Error::InvalidLayout(
                "at most one background and one band region".into(),
            ));
        }
        if n_band > 0 && n_edit == 0 {
            return Err(Error::InvalidLayout("band without an edit region".into()));
        }
        for prompt in &prompts {
            if prompt.len == 0 {
                return Err(Error::InvalidLayout("empty prompt span".into()));
            }
            if let SpanRole::Local(k) = prompt.role {
                if !edit_ids.contains(&k) {
                    return Err(Error::InvalidLayout(format!(
                        "local prompt {k} has no edit region"
                    )));
                }
            }
        }
        Ok(Self { n_patches, regions, prompts, patch_region })
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn n_text(&self) -> usize {
        self.prompts.iter().map(|p| p.len).sum()
    }

    pub fn seq_len(&self) -> usize {
        self.n_patches + self.n_text()
    }

    pub fn regions(&self) -> &[RegionSpan] {
        &self.regions
    }

    pub fn prompts(&self) -> &[PromptSpan] {
        &self.prompts
    }

    pub fn region_role_of_patch(&self, p: usize) -> RegionRole {
        self.regions[self.patch_region[p]].role
    }

    /// Token positions of prompt span `i`.
    pub fn prompt_range(&self, i: usize) -> std::ops::Range<usize> {
        let mut at = self.n_patches;
        for p in &self.prompts[..i] {
            at += p.len;
        }
        at..at + self.prompts[i].len
    }

    /// Token positions of the first span with the given role.
    pub fn span_range(&self, role: SpanRole) -> Option<std::ops::Range<usize>> {
        self.prompts
            .iter()
            .position(|p| p.role == role)
            .map(|i| self.prompt_range(i))
    }

    /// Patch indices of the first region with the given role.
    pub fn region_patches(&self, role: RegionRole) -> Option<&[usize]> {
        self.regions
            .iter()
            .find(|r| r.role == role)
            .map(|r| r.patches.as_slice())
    }

    /// Single-region, single-prompt layout (plain captioned image).
    pub fn plain(n_patches: usize, prompt_len: usize) -> Self {
        Self::new(
            n_patches,
            vec![RegionSpan { role: RegionRole::Background, patches: (0..n_patches).collect() }],
            vec![PromptSpan { role: SpanRole::Global, len: prompt_len }],
        )
        .expect("plain layout is always valid")
    }
}

/// How image patches may attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntraImageMode {
    /// Regions only see themselves.
    BlockDiag,
    /// Edit regions additionally read the background (one-way).
    EditToBg,
    /// As `EditToBg`, plus the boundary band reads the edit regions.
    EditBgBand,
}

/// Boolean attention mask over the token sequence. Row = query, col = key.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    n: usize,
    allow: Rc<Vec<bool>>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut allow = vec![false; n * n];
        for q in 0..n {
            let mut any = false;
            for k in 0..n {
                let v = f(q, k);
                allow[q * n + k] = v;
                any |= v;
            }
            if !any {
                return Err(Error::FullyMaskedRow(q));
            }
        }
        Ok(Self { n, allow: Rc::new(allow) })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.n + k]
    }

    /// Shared flat row-major buffer for the attention kernel.
    pub fn shared(&self) -> Rc<Vec<bool>> {
        self.allow.clone()
    }
}

enum TokenRole {
    Image(RegionRole),
    Text { span: usize, role: SpanRole },
}

fn token_roles(layout: &TokenLayout) -> Vec<TokenRole> {
    let mut roles: Vec<TokenRole> = (0..layout.n_patches)
        .map(|p| TokenRole::Image(layout.region_role_of_patch(p)))
        .collect();
    for (i, p) in layout.prompts.iter().enumerate() {
        for _ in 0..p.len {
            roles.push(TokenRole::Text { span: i, role: p.role });
        }
    }
    roles
}

fn text_sees_region(span: SpanRole, region: RegionRole) -> bool {
    match span {
        SpanRole::Global => true,
        SpanRole::Local(k) => region == RegionRole::Edit(k),
        SpanRole::Background => {
            matches!(region, RegionRole::Background | RegionRole::Band)
        }
    }
}

fn image_sees_image(mode: IntraImageMode, q: RegionRole, k: RegionRole) -> bool {
    use RegionRole::*;
    if q == k {
        return true;
    }
    match mode {
        IntraImageMode::BlockDiag => false,
        IntraImageMode::EditToBg => matches!(
            (q, k),
            (Edit(_), Background) | (Edit(_), Band) | (Background, Band) | (Band, Background)
        ),
        IntraImageMode::EditBgBand => match (q, k) {
            (Edit(_), Edit(_)) => false, // distinct edit regions stay independent
            (Edit(_), _) => true,
            (Band, _) => true,
            (Background, Edit(_)) => false,
            (Background, _) => true,
        },
    }
}

/// Build the attention mask for a layout: prompt spans only see themselves
/// among text tokens, each prompt sees exactly the patches it addresses (and
/// transposed for image-to-text), and image-to-image follows `mode`.
pub fn build_attention_mask(layout: &TokenLayout, mode: IntraImageMode) -> Result<AttentionMask> {
    let roles = token_roles(layout);
    AttentionMask::from_fn(layout.seq_len(), |q, k| match (&roles[q], &roles[k]) {
        (TokenRole::Text { span: sq, .. }, TokenRole::Text { span: sk, .. }) => sq == sk,
        (TokenRole::Text { role, .. }, TokenRole::Image(r)) => text_sees_region(*role, *r),
        (TokenRole::Image(r), TokenRole::Text { role, .. }) => text_sees_region(*role, *r),
        (TokenRole::Image(a), TokenRole::Image(b)) => image_sees_image(mode, *a, *b),
    })
}

/// Stage-1 (pre-refinement) mask: only text-to-text block-diagonality is
/// enforced; all image-text and image-image pairs stay open and are shaped by
/// the soft log-bias instead of hard exclusion.
pub fn build_soft_attention_mask(layout: &TokenLayout) -> Result<AttentionMask> {
    let roles = token_roles(layout);
    AttentionMask::from_fn(layout.seq_len(), |q, k| match (&roles[q], &roles[k]) {
        (TokenRole::Text { span: sq, .. }, TokenRole::Text { span: sk, .. }) => sq == sk,
        _ => true,
    })
}

/// Additive logit bias for refinement stage 1: image queries are biased
/// toward each local prompt by `ln(soft + eps)` of the query patch (and
/// transposed for text queries). With `i2i_boost`, image keys whose combined
/// soft value exceeds 0.5 also bias every image query toward them.
pub fn stage1_bias(
    layout: &TokenLayout,
    softs: &[&SoftMask],
    epsilon: f64,
    i2i_boost: bool,
) -> Result<Tensor> {
    let n = layout.seq_len();
    let np = layout.n_patches();
    let mut bias = vec![0.0; n * n];
    for (i, prompt) in layout.prompts().iter().enumerate() {
        let SpanRole::Local(k) = prompt.role else {
            continue;
        };
        let soft = softs.get(k).ok_or_else(|| {
            Error::InvalidLayout(format!("no soft mask for local prompt {k}"))
        })?;
        if soft.data().len() != np {
            return Err(Error::DimensionMismatch(format!(
                "soft mask {} has {} patches, layout has {np}",
                k,
                soft.data().len()
            )));
        }
        let range = layout.prompt_range(i);
        for p in 0..np {
            let b = (soft.data()[p] + epsilon).ln();
            for t in range.clone() {
                bias[p * n + t] += b;
                bias[t * n + p] += b;
            }
        }
    }
    if i2i_boost && !softs.is_empty() {
        let combined = SoftMask::union_max(softs);
        for key in 0..np {
            let v = combined.data()[key];
            if v > 0.5 {
                let b = (v + epsilon).ln();
                for q in 0..np {
                    bias[q * n + key] += b;
                }
            }
        }
    }
    Tensor::new(vec![n, n], bias)
}
