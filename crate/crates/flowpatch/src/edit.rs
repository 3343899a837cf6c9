//! Region editing: invert the source, then denoise under region-scoped
//! prompts with edge control gated out of the editable patches. Point hints
//! go through a two-stage pass that discovers the region mid-denoise.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::canny::canny_edges;
use crate::dataset::{self, parse_class};
use crate::error::{Error, Result};
use crate::flow::{
    denoise_segment, invert, preview_origin, Carry, OdeMethod, Schedule, StepInfo, StepKind,
    VelocityField,
};
use crate::image::Image;
use crate::masks::{
    boundary_band, build_attention_mask, build_soft_attention_mask, soft_mask_from_point,
    stage1_bias, AttentionMask, IntraImageMode, PatchMask, PromptSpan, RegionRole, RegionSpan,
    SoftMask, SpanRole, TokenLayout, MASK_EPSILON,
};
use crate::metrics::{self, ProxyScores};
use crate::model::{
    patchify, patchify_edges, unpatchify, ActProbe, ControlArg, ControlCache, CtrlCoeffs,
    EvalTrace, Model, VelocityArgs,
};
use crate::tensor::Tensor;
use crate::text::{tokenize, PromptRole, PromptTokens, EMPTY_ID};

/// What the edit does inside its regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Add,
    Replace,
    Remove,
}

/// One editable region: either an explicit patch mask or a point hint whose
/// mask is discovered during denoising.
#[derive(Debug, Clone)]
pub enum RegionSpec {
    Mask { mask: PatchMask, prompt: String },
    Point { point: (f64, f64), prompt: String },
}

/// A full editing job on one source image.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub kind: EditKind,
    pub source: Image,
    /// Caption describing the source; feeds inversion and the background
    /// prompt span.
    pub source_prompt: String,
    /// Full description of the desired result; feeds the global prompt span.
    pub target_prompt: String,
    /// Description of the object to remove. Required for [`EditKind::Remove`],
    /// ignored otherwise.
    pub negative_prompt: Option<String>,
    pub regions: Vec<RegionSpec>,
}

/// Where the edge-control features come from during denoising.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSource {
    /// Features cached during inversion, gated out of editable patches.
    CachedSelective,
    /// Cached features applied to every patch, editable ones included.
    CachedEverywhere,
    /// Re-run the edge branch on the current state each evaluation,
    /// with the same selective gating.
    CurrentPass,
    /// No edge control in either pass.
    Off,
}

/// Which prompt spans the denoising pass carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSources {
    /// Local prompts per region, the source caption over the background,
    /// and the target prompt over everything.
    Dual,
    /// Drop the global span; local prompts and the background caption only.
    LocalOnly,
    /// Drop the local spans; the global target prompt does all the work.
    TargetOnly,
}

/// Knobs for one editing run. `validate` enforces the documented ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditConfig {
    pub n_steps: usize,
    pub method: OdeMethod,
    /// Guidance scale; at least 1. Exactly 1 skips the second branch.
    pub guidance: f64,
    /// Strength of the injected control features.
    pub beta: f64,
    pub i2i_mode: IntraImageMode,
    /// Width of the boundary band around editable regions, in patches.
    pub band_radius: usize,
    /// Fraction of the noise scale at which point-hinted regions are
    /// re-estimated; the hard-mask stage runs from there down to zero.
    pub refine_frac: f64,
    /// Mean absolute pixel deviation that marks a patch as changed.
    pub refine_threshold: f64,
    /// Keep refined patches within this dilation radius of the hint support;
    /// `None` lifts the restriction.
    pub refine_bound: Option<usize>,
    /// Bias image-to-image attention toward strongly hinted patches during
    /// the soft stage.
    pub stage1_boost: bool,
    /// Floor for soft mask values and the log-bias argument.
    pub epsilon: f64,
    /// Number of most-attended patches used to seed refinement.
    pub salient_k: usize,
    pub control: ControlSource,
    pub prompts: PromptSources,
    pub edge_sigma: f64,
    pub edge_low: f64,
    pub edge_high: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            method: OdeMethod::SecondOrder,
            guidance: 4.0,
            beta: dataset::CTRL_BETA,
            i2i_mode: IntraImageMode::EditBgBand,
            band_radius: dataset::BAND_RADIUS,
            refine_frac: 0.3,
            refine_threshold: 0.25,
            refine_bound: Some(4),
            stage1_boost: true,
            epsilon: MASK_EPSILON,
            salient_k: 3,
            control: ControlSource::CachedSelective,
            prompts: PromptSources::Dual,
            edge_sigma: dataset::EDGE_SIGMA,
            edge_low: dataset::EDGE_LOW,
            edge_high: dataset::EDGE_HIGH,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.n_steps == 0 {
            return bad("n_steps must be positive");
        }
        if !self.guidance.is_finite() || self.guidance < 1.0 {
            return bad("guidance must be finite and at least 1");
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return bad("beta must be finite and non-negative");
        }
        if !(self.refine_frac > 0.0 && self.refine_frac < 1.0) {
            return bad("refine_frac must lie strictly between 0 and 1");
        }
        if !(self.refine_threshold > 0.0) || !self.refine_threshold.is_finite() {
            return bad("refine_threshold must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie strictly between 0 and 1");
        }
        if self.salient_k == 0 {
            return bad("salient_k must be positive");
        }
        Ok(())
    }
}

/// Why a cached control entry was consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsumeKind {
    Bootstrap,
    Endpoint,
    Midpoint,
    /// Extra evaluation used only to pick refinement seeds.
    Probe,
}

/// One consumption of the control cache: the schedule key, the time the
/// entry was recorded at, and the time it was replayed at.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CacheUse {
    pub kind: ConsumeKind,
    pub key: usize,
    pub eval_t: f64,
    pub recorded_t: f64,
}

/// Per-region slice of the final report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionReport {
    pub prompt: String,
    pub point: Option<(f64, f64)>,
    /// Patch indices of the mask the denoise started from.
    pub initial_patches: Vec<usize>,
    /// Patch indices after refinement (same as initial without a hint).
    pub final_patches: Vec<usize>,
    /// Refinement seed patches, most attended first.
    pub salient: Option<Vec<usize>>,
}

/// Everything needed to audit or replay one editing run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditReport {
    pub kind: EditKind,
    pub source_prompt: String,
    pub target_prompt: String,
    pub negative_prompt: Option<String>,
    pub config: EditConfig,
    /// Patch grid side length; region patch indices are row-major into it.
    pub grid: usize,
    pub regions: Vec<RegionReport>,
    /// Schedule interval at which refinement ran, when hints were present.
    pub refine_interval: Option<usize>,
    pub nfe_invert: usize,
    pub nfe_denoise: usize,
    pub nfe_probe: usize,
    pub cache_audit: Vec<CacheUse>,
    pub scores: ProxyScores,
}

/// Rebuild a patch mask from report indices.
pub fn mask_from_indices(grid: usize, indices: &[usize]) -> Result<PatchMask> {
    let mut m = PatchMask::filled(grid, grid, false);
    for &p in indices {
        if p >= grid * grid {
            return Err(Error::InvalidRequest(format!(
                "patch index {p} outside a {grid}x{grid} grid"
            )));
        }
        m.set(p / grid, p % grid, true);
    }
    Ok(m)
}

/// `base + g * (toward - base)` elementwise: the guided blend of two
/// velocity estimates.
pub fn guide_mix(base: &Tensor, toward: &Tensor, g: f64) -> Result<Tensor> {
    if base.shape() != toward.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            base.shape(),
            toward.shape()
        )));
    }
    let data = base
        .data()
        .iter()
        .zip(toward.data())
        .map(|(&u, &c)| u + g * (c - u))
        .collect();
    Tensor::new(base.shape().to_vec(), data)
}

/// Removal guidance: steer away from the object description and toward the
/// empty-background branch, `v_neg + g * (v_pos - v_neg)`.
pub fn removal_guidance(v_pos: &Tensor, v_neg: &Tensor, g: f64) -> Result<Tensor> {
    guide_mix(v_neg, v_pos, g)
}

/// Indices of the `k` highest-salience patches, best first. Ties keep the
/// lower row-major index, so a uniform map yields `0..k`.
pub fn salient_points(salience: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..salience.len()).collect();
    idx.sort_by(|&a, &b| salience[b].total_cmp(&salience[a]).then(a.cmp(&b)));
    idx.truncate(k.min(salience.len()));
    idx
}

/// Grow a mask out of a per-patch deviation map: patches at or above
/// `threshold` form 8-connected components, components containing a seed are
/// kept, and the union is clipped to `bound`. An empty result falls back to
/// `fallback`.
pub fn refine_mask(
    deviation: &[f64],
    grid_h: usize,
    grid_w: usize,
    threshold: f64,
    seeds: &[usize],
    bound: Option<&PatchMask>,
    fallback: &PatchMask,
) -> Result<PatchMask> {
    if deviation.len() != grid_h * grid_w {
        return Err(Error::DimensionMismatch(format!(
            "{} deviations for a {grid_h}x{grid_w} grid",
            deviation.len()
        )));
    }
    let candidate: Vec<bool> = deviation.iter().map(|&d| d >= threshold).collect();
    let mut keep = PatchMask::filled(grid_h, grid_w, false);
    let mut visited = vec![false; candidate.len()];
    for &seed in seeds {
        if seed >= candidate.len() || !candidate[seed] || visited[seed] {
            continue;
        }
        let mut queue = vec![seed];
        visited[seed] = true;
        while let Some(p) = queue.pop() {
            let (r, c) = (p / grid_w, p % grid_w);
            keep.set(r, c, true);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= grid_h as i64 || nc >= grid_w as i64 {
                        continue;
                    }
                    let q = nr as usize * grid_w + nc as usize;
                    if candidate[q] && !visited[q] {
                        visited[q] = true;
                        queue.push(q);
                    }
                }
            }
        }
    }
    let refined = match bound {
        Some(b) => keep.intersect(b),
        None => keep,
    };
    Ok(if refined.any() { refined } else { fallback.clone() })
}

// ---------------------------------------------------------------------------
// internal plumbing

struct Region {
    prompt: PromptTokens,
    point: Option<(f64, f64)>,
    soft: Option<SoftMask>,
    hard: PatchMask,
    initial: PatchMask,
}

impl Region {
    /// Soft editability for the first stage: the hint falloff when hinted,
    /// the lifted hard mask otherwise.
    fn effective_soft(&self, epsilon: f64) -> SoftMask {
        match &self.soft {
            Some(s) => s.clone(),
            None => SoftMask::from_hard(&self.hard, epsilon),
        }
    }
}

fn union_hard(regions: &[Region], grid: usize) -> PatchMask {
    let mut u = PatchMask::filled(grid, grid, false);
    for r in regions {
        u = u.union(&r.hard);
    }
    u
}

fn resolve_regions(
    model: &Model,
    request: &EditRequest,
    config: &EditConfig,
    grid: usize,
) -> Result<Vec<Region>> {
    if request.regions.is_empty() {
        return Err(Error::InvalidRequest("an edit needs at least one region".into()));
    }
    if matches!(request.kind, EditKind::Remove) {
        let neg = request.negative_prompt.as_deref().unwrap_or("");
        if tokenize(neg).is_empty() {
            return Err(Error::InvalidRequest(
                "removal needs a negative prompt describing the object".into(),
            ));
        }
    }
    let mut out: Vec<Region> = Vec::with_capacity(request.regions.len());
    let mut taken = PatchMask::filled(grid, grid, false);
    for (k, spec) in request.regions.iter().enumerate() {
        let (hard, soft, point, text) = match spec {
            RegionSpec::Mask { mask, prompt } => {
                if mask.height() != grid || mask.width() != grid {
                    return Err(Error::InvalidRequest(format!(
                        "region {k} mask is {}x{}, expected {grid}x{grid}",
                        mask.height(),
                        mask.width()
                    )));
                }
                if !mask.any() {
                    return Err(Error::InvalidRequest(format!("region {k} mask is empty")));
                }
                if mask.intersect(&taken).any() {
                    return Err(Error::InvalidRequest(format!(
                        "region {k} overlaps an earlier region"
                    )));
                }
                (mask.clone(), None, None, prompt.clone())
            }
            RegionSpec::Point { point, prompt } => {
                if matches!(request.kind, EditKind::Remove) {
                    return Err(Error::InvalidRequest(
                        "removal requires an explicit mask, not a point hint".into(),
                    ));
                }
                let soft = soft_mask_from_point(*point, grid, grid, config.epsilon)?;
                let hard = soft.support(0.5).minus(&taken);
                if !hard.any() {
                    return Err(Error::InvalidRequest(format!(
                        "region {k}'s hint support is covered by earlier regions"
                    )));
                }
                (hard, Some(soft), Some(*point), prompt.clone())
            }
        };
        // Removal steers toward emptiness, so a blank local prompt gets the
        // canonical one.
        let text = if matches!(request.kind, EditKind::Remove) && tokenize(&text).is_empty() {
            "empty background".to_string()
        } else {
            text
        };
        let prompt = PromptTokens::encode(&model.vocab, &text, PromptRole::Local(k));
        taken = taken.union(&hard);
        out.push(Region { prompt, point, soft, hard: hard.clone(), initial: hard });
    }
    Ok(out)
}

/// Which token ids fill the prompt spans of one guidance branch.
#[derive(Clone, Copy, PartialEq)]
enum BranchText {
    /// Region prompts, source caption, target prompt.
    Cond,
    /// Every span collapses to a single empty token.
    Uncond,
    /// Local spans carry the negative prompt; the rest matches `Cond`.
    Negative,
}

struct Branch {
    layout: TokenLayout,
    ids: Vec<usize>,
    mask: AttentionMask,
    bias: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn build_branch(
    grid: usize,
    regions: &[Region],
    text: BranchText,
    source_tokens: &PromptTokens,
    target_tokens: &PromptTokens,
    negative_tokens: Option<&PromptTokens>,
    config: &EditConfig,
    soft_stage: bool,
) -> Result<Branch> {
    let np = grid * grid;
    let include_locals = config.prompts != PromptSources::TargetOnly;
    let include_global = config.prompts != PromptSources::LocalOnly;

    let mut region_spans = Vec::new();
    for (k, r) in regions.iter().enumerate() {
        region_spans.push(RegionSpan { role: RegionRole::Edit(k), patches: r.hard.indices() });
    }
    let union = union_hard(regions, grid);
    let band = boundary_band(&union, config.band_radius);
    if band.any() {
        region_spans.push(RegionSpan { role: RegionRole::Band, patches: band.indices() });
    }
    let bg = PatchMask::filled(grid, grid, true).minus(&union).minus(&band);
    if bg.any() {
        region_spans.push(RegionSpan { role: RegionRole::Background, patches: bg.indices() });
    }

    let empty = vec![EMPTY_ID];
    let mut prompt_spans = Vec::new();
    let mut ids = Vec::new();
    let mut push = |role: SpanRole, span_ids: &[usize]| {
        prompt_spans.push(PromptSpan { role, len: span_ids.len() });
        ids.extend_from_slice(span_ids);
    };
    if include_locals {
        for (k, r) in regions.iter().enumerate() {
            let span_ids = match text {
                BranchText::Cond => &r.prompt.ids,
                BranchText::Uncond => &empty,
                BranchText::Negative => {
                    &negative_tokens
                        .ok_or_else(|| {
                            Error::InvalidRequest("negative branch without a prompt".into())
                        })?
                        .ids
                }
            };
            push(SpanRole::Local(k), span_ids);
        }
    }
    let bg_ids = match text {
        BranchText::Uncond => &empty,
        _ => &source_tokens.ids,
    };
    push(SpanRole::Background, bg_ids);
    if include_global {
        let global_ids = match text {
            BranchText::Uncond => &empty,
            _ => &target_tokens.ids,
        };
        push(SpanRole::Global, global_ids);
    }

    let layout = TokenLayout::new(np, region_spans, prompt_spans)?;
    let (mask, bias) = if soft_stage {
        let softs: Vec<SoftMask> = regions.iter().map(|r| r.effective_soft(config.epsilon)).collect();
        let refs: Vec<&SoftMask> = softs.iter().collect();
        (
            build_soft_attention_mask(&layout)?,
            Some(stage1_bias(&layout, &refs, config.epsilon, config.stage1_boost)?),
        )
    } else {
        (build_attention_mask(&layout, config.i2i_mode)?, None)
    };
    Ok(Branch { layout, ids, mask, bias })
}

/// Control strength per patch for one denoising stage.
fn stage_coeffs(regions: &[Region], grid: usize, config: &EditConfig, soft_stage: bool) -> CtrlCoeffs {
    match config.control {
        ControlSource::Off => CtrlCoeffs::Uniform(0.0),
        ControlSource::CachedEverywhere => CtrlCoeffs::Uniform(config.beta),
        ControlSource::CachedSelective | ControlSource::CurrentPass => {
            if soft_stage {
                let softs: Vec<SoftMask> =
                    regions.iter().map(|r| r.effective_soft(config.epsilon)).collect();
                let refs: Vec<&SoftMask> = softs.iter().collect();
                let combined = SoftMask::union_max(&refs);
                CtrlCoeffs::PerPatch(Rc::new(
                    combined.data().iter().map(|&v| config.beta * (1.0 - v)).collect(),
                ))
            } else {
                let union = union_hard(regions, grid);
                CtrlCoeffs::PerPatch(Rc::new(
                    union
                        .data()
                        .iter()
                        .map(|&b| if b { 0.0 } else { config.beta })
                        .collect(),
                ))
            }
        }
    }
}

enum StageControl<'a> {
    Off,
    Cached(&'a ControlCache),
    Live(&'a Tensor),
}

fn control_arg<'c>(
    control: &'c StageControl<'_>,
    coeffs: &'c CtrlCoeffs,
    key: usize,
) -> ControlArg<'c> {
    match control {
        StageControl::Off => ControlArg::Off,
        StageControl::Cached(cache) => ControlArg::Cached { cache, key, coeffs },
        StageControl::Live(edge_tokens) => {
            ControlArg::Live { edge_tokens, coeffs, record: None }
        }
    }
}

/// The denoising field: a conditional branch, an optional second branch
/// (empty prompts, or the negative prompt for removal), and the shared
/// control source. Counts evaluations and logs every cache consumption.
struct GuidedField<'a> {
    model: &'a Model,
    cond: Branch,
    second: Option<Branch>,
    guidance: f64,
    control: StageControl<'a>,
    coeffs: CtrlCoeffs,
    n_control: usize,
    audit: Vec<CacheUse>,
    evals: usize,
    probe_evals: usize,
    probing: bool,
    probe: Option<&'a mut ActProbe>,
}

impl GuidedField<'_> {
    fn bump(&mut self) {
        if self.probing {
            self.probe_evals += 1;
        } else {
            self.evals += 1;
        }
    }

    fn eval_full(
        &mut self,
        x: &Tensor,
        step: &StepInfo,
        mut trace: Option<&mut EvalTrace>,
    ) -> Result<Tensor> {
        let key = step.interval;
        if let StageControl::Cached(cache) = &self.control {
            let t0 = cache.get(0, key)?.t;
            for b in 1..self.n_control {
                if cache.get(b, key)?.t.to_bits() != t0.to_bits() {
                    return Err(Error::InvalidRequest(format!(
                        "control cache blocks disagree on the time of step {key}"
                    )));
                }
            }
            let kind = if self.probing {
                ConsumeKind::Probe
            } else {
                match step.kind {
                    StepKind::Bootstrap => ConsumeKind::Bootstrap,
                    StepKind::Endpoint => ConsumeKind::Endpoint,
                    StepKind::Midpoint => ConsumeKind::Midpoint,
                }
            };
            self.audit.push(CacheUse { kind, key, eval_t: step.t, recorded_t: t0 });
        }
        let v_cond = {
            let mut args = VelocityArgs {
                layout: &self.cond.layout,
                token_ids: &self.cond.ids,
                mask: &self.cond.mask,
                bias: self.cond.bias.as_ref(),
                control: control_arg(&self.control, &self.coeffs, key),
                trace: trace.as_deref_mut(),
                probe: self.probe.as_deref_mut(),
            };
            self.model.velocity(x, step.t, &mut args)?
        };
        self.bump();
        match &self.second {
            None => Ok(v_cond),
            Some(b) => {
                let v_second = {
                    let mut args = VelocityArgs {
                        layout: &b.layout,
                        token_ids: &b.ids,
                        mask: &b.mask,
                        bias: b.bias.as_ref(),
                        control: control_arg(&self.control, &self.coeffs, key),
                        trace: None,
                        probe: None,
                    };
                    self.model.velocity(x, step.t, &mut args)?
                };
                self.bump();
                guide_mix(&v_second, &v_cond, self.guidance)
            }
        }
    }
}

impl VelocityField for GuidedField<'_> {
    fn eval(&mut self, x: &Tensor, step: &StepInfo) -> Result<Tensor> {
        self.eval_full(x, step, None)
    }
}

#[allow(clippy::too_many_arguments)]
fn build_guided<'a>(
    model: &'a Model,
    regions: &[Region],
    kind: EditKind,
    source_tokens: &PromptTokens,
    target_tokens: &PromptTokens,
    negative_tokens: Option<&PromptTokens>,
    config: &EditConfig,
    soft_stage: bool,
    control: StageControl<'a>,
    probe: Option<&'a mut ActProbe>,
) -> Result<GuidedField<'a>> {
    let grid = model.config.grid();
    let cond = build_branch(
        grid,
        regions,
        BranchText::Cond,
        source_tokens,
        target_tokens,
        None,
        config,
        soft_stage,
    )?;
    let second = if config.guidance == 1.0 {
        None
    } else {
        let text = match kind {
            EditKind::Remove => BranchText::Negative,
            _ => BranchText::Uncond,
        };
        Some(build_branch(
            grid,
            regions,
            text,
            source_tokens,
            target_tokens,
            negative_tokens,
            config,
            soft_stage,
        )?)
    };
    Ok(GuidedField {
        model,
        cond,
        second,
        guidance: config.guidance,
        control,
        coeffs: stage_coeffs(regions, grid, config, soft_stage),
        n_control: model.config.n_control,
        audit: Vec::new(),
        evals: 0,
        probe_evals: 0,
        probing: false,
        probe,
    })
}

/// The inversion field: the source caption over a plain layout, with the
/// live control branch recording its features for later replay.
struct InvertField<'a> {
    model: &'a Model,
    layout: TokenLayout,
    ids: Vec<usize>,
    mask: AttentionMask,
    edge_tokens: Option<&'a Tensor>,
    coeffs: CtrlCoeffs,
    record: Option<&'a mut ControlCache>,
    evals: usize,
}

impl VelocityField for InvertField<'_> {
    fn eval(&mut self, x: &Tensor, step: &StepInfo) -> Result<Tensor> {
        let control = match self.edge_tokens {
            None => ControlArg::Off,
            Some(edge_tokens) => {
                // The bootstrap shares its interval with the first real step;
                // recording it would collide and it has no denoise twin.
                let record = match (&mut self.record, step.kind) {
                    (Some(cache), kind) if !matches!(kind, StepKind::Bootstrap) => {
                        Some((&mut **cache, step.interval, step.t))
                    }
                    _ => None,
                };
                ControlArg::Live { edge_tokens, coeffs: &self.coeffs, record }
            }
        };
        let mut args = VelocityArgs {
            layout: &self.layout,
            token_ids: &self.ids,
            mask: &self.mask,
            bias: None,
            control,
            trace: None,
            probe: None,
        };
        let v = self.model.velocity(x, step.t, &mut args)?;
        self.evals += 1;
        Ok(v)
    }
}

fn check_source(model: &Model, source: &Image) -> Result<()> {
    let mc = &model.config;
    if source.height() != mc.image_size
        || source.width() != mc.image_size
        || source.channels() != mc.channels
    {
        return Err(Error::InvalidRequest(format!(
            "source is {}x{}x{}, model expects {}x{}x{}",
            source.height(),
            source.width(),
            source.channels(),
            mc.image_size,
            mc.image_size,
            mc.channels
        )));
    }
    Ok(())
}

/// Invert a source image under its caption, recording control features.
/// Returns the noise state, the cache, and the evaluation count.
pub fn invert_with_cache(
    model: &Model,
    source: &Image,
    prompt: &str,
    config: &EditConfig,
) -> Result<(Tensor, ControlCache, usize)> {
    config.validate()?;
    check_source(model, source)?;
    let mc = &model.config;
    let tokens = PromptTokens::encode(&model.vocab, prompt, PromptRole::Global);
    let x0 = patchify(source, mc.patch)?;
    let schedule = Schedule::uniform(config.n_steps)?;
    let layout = TokenLayout::plain(mc.n_patches(), tokens.len());
    let mask = build_attention_mask(&layout, IntraImageMode::BlockDiag)?;
    let live = !matches!(config.control, ControlSource::Off);
    let record = matches!(
        config.control,
        ControlSource::CachedSelective | ControlSource::CachedEverywhere
    );
    let edges = canny_edges(source, config.edge_sigma, config.edge_low, config.edge_high)?;
    let edge_tokens = patchify_edges(&edges, mc.patch)?;
    let mut cache = ControlCache::new();
    let mut field = InvertField {
        model,
        layout,
        ids: tokens.ids.clone(),
        mask,
        edge_tokens: live.then_some(&edge_tokens),
        coeffs: CtrlCoeffs::Uniform(config.beta),
        record: record.then_some(&mut cache),
        evals: 0,
    };
    let x1 = invert(&mut field, &x0, &schedule, config.method)?;
    let evals = field.evals;
    drop(field);
    Ok((x1, cache, evals))
}

/// Mean absolute pixel difference per patch between two same-sized images.
fn patch_deviation(a: &Image, b: &Image, patch: usize) -> Vec<f64> {
    let (gh, gw) = (a.height() / patch, a.width() / patch);
    let ch = a.channels();
    let denom = (patch * patch * ch) as f64;
    let mut out = vec![0.0; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut s = 0.0;
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..ch {
                        s += (a.get(gy * patch + py, gx * patch + px, c)
                            - b.get(gy * patch + py, gx * patch + px, c))
                        .abs();
                    }
                }
            }
            out[gy * gw + gx] = s / denom;
        }
    }
    out
}

fn clamp01(mut img: Image) -> Image {
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Run one edit. See [`edit_instrumented`] for the probed variant.
pub fn edit(model: &Model, request: &EditRequest, config: &EditConfig) -> Result<(Image, EditReport)> {
    edit_instrumented(model, request, config, None)
}

/// Run one edit, optionally capturing raw activations from the conditional
/// branch of every denoising evaluation. An empty `query_rows` on the probe
/// is filled with the first local prompt span.
pub fn edit_instrumented(
    model: &Model,
    request: &EditRequest,
    config: &EditConfig,
    mut probe: Option<&mut ActProbe>,
) -> Result<(Image, EditReport)> {
    config.validate()?;
    check_source(model, &request.source)?;
    let mc = &model.config;
    let grid = mc.grid();
    let np = mc.n_patches();

    let mut regions = resolve_regions(model, request, config, grid)?;
    let source_tokens =
        PromptTokens::encode(&model.vocab, &request.source_prompt, PromptRole::Background);
    let target_tokens =
        PromptTokens::encode(&model.vocab, &request.target_prompt, PromptRole::Global);
    let negative_tokens = request
        .negative_prompt
        .as_deref()
        .map(|t| PromptTokens::encode(&model.vocab, t, PromptRole::Negative));

    // Inversion under the source caption, recording control features.
    let (x1, cache, nfe_invert) =
        invert_with_cache(model, &request.source, &request.source_prompt, config)?;
    let edges = canny_edges(
        &request.source,
        config.edge_sigma,
        config.edge_low,
        config.edge_high,
    )?;
    let edge_tokens = patchify_edges(&edges, mc.patch)?;
    let schedule = Schedule::uniform(config.n_steps)?;
    let n = schedule.n_intervals();

    let stage_control = || match config.control {
        ControlSource::Off => StageControl::Off,
        ControlSource::CurrentPass => StageControl::Live(&edge_tokens),
        _ => StageControl::Cached(&cache),
    };

    let refine = regions.iter().any(|r| r.point.is_some());
    let refine_interval =
        refine.then(|| ((config.refine_frac * n as f64).round() as usize).clamp(1, n));

    if let Some(p) = probe.as_deref_mut() {
        if p.query_rows.is_empty() {
            // Fill with the first local span of the hard-stage layout.
            let b = build_branch(
                grid,
                &regions,
                BranchText::Cond,
                &source_tokens,
                &target_tokens,
                None,
                config,
                false,
            )?;
            if let Some(range) = b.layout.span_range(SpanRole::Local(0)) {
                p.query_rows = range.collect();
            }
        }
    }

    let mut audit: Vec<CacheUse> = Vec::new();
    let mut nfe_denoise = 0usize;
    let mut nfe_probe = 0usize;
    let mut salients: Vec<Option<Vec<usize>>> = regions.iter().map(|_| None).collect();

    let x_final = if let Some(r) = refine_interval {
        let mut carry = Carry::new();
        let mut x = x1.clone();
        if r < n {
            let mut stage1 = build_guided(
                model,
                &regions,
                request.kind,
                &source_tokens,
                &target_tokens,
                negative_tokens.as_ref(),
                config,
                true,
                stage_control(),
                probe.as_deref_mut(),
            )?;
            x = denoise_segment(&mut stage1, &x, &schedule, config.method, n, r, &mut carry)?;
            nfe_denoise += stage1.evals;
            audit.append(&mut stage1.audit);
        }

        // Probe the soft field once per hinted region to pick seeds, then
        // re-estimate the masks from the preview's deviation.
        {
            let mut prober = build_guided(
                model,
                &regions,
                request.kind,
                &source_tokens,
                &target_tokens,
                negative_tokens.as_ref(),
                config,
                true,
                stage_control(),
                None,
            )?;
            prober.probing = true;
            let step = StepInfo {
                t: schedule.t(r),
                interval: r - 1,
                kind: StepKind::Endpoint,
            };
            let mut v_probe = None;
            for (k, region) in regions.iter().enumerate() {
                if region.point.is_none() {
                    continue;
                }
                let span = prober
                    .cond
                    .layout
                    .span_range(SpanRole::Local(k))
                    .ok_or_else(|| {
                        Error::InvalidRequest(format!(
                            "refinement needs a local prompt span for region {k}"
                        ))
                    })?;
                let mut trace = EvalTrace::new(span, np);
                let v = prober.eval_full(&x, &step, Some(&mut trace))?;
                salients[k] = Some(salient_points(&trace.mean()?, config.salient_k));
                v_probe = Some(v);
            }
            nfe_probe += prober.probe_evals;
            audit.append(&mut prober.audit);

            let v = v_probe.expect("refinement runs only with a hinted region");
            let preview_tokens = preview_origin(&x, &v, schedule.t(r))?;
            let preview = unpatchify(&preview_tokens, mc.patch, grid, mc.channels)?;
            let deviation = patch_deviation(&preview, &request.source, mc.patch);

            let mut taken = PatchMask::filled(grid, grid, false);
            for k in 0..regions.len() {
                if regions[k].point.is_none() {
                    taken = taken.union(&regions[k].hard);
                    continue;
                }
                let soft = regions[k].soft.as_ref().expect("hinted region keeps its soft mask");
                let fallback = soft.support(0.5);
                let bound = config.refine_bound.map(|rad| fallback.dilate(rad));
                let seeds = salients[k].as_deref().unwrap_or(&[]);
                let mut refined = refine_mask(
                    &deviation,
                    grid,
                    grid,
                    config.refine_threshold,
                    seeds,
                    bound.as_ref(),
                    &fallback,
                )?;
                refined = refined.minus(&taken);
                if !refined.any() {
                    refined = fallback.minus(&taken);
                }
                if !refined.any() {
                    refined = regions[k].hard.minus(&taken);
                }
                if !refined.any() {
                    return Err(Error::InvalidRequest(format!(
                        "refinement left region {k} without any patches"
                    )));
                }
                taken = taken.union(&refined);
                regions[k].hard = refined;
            }
        }

        let mut stage2 = build_guided(
            model,
            &regions,
            request.kind,
            &source_tokens,
            &target_tokens,
            negative_tokens.as_ref(),
            config,
            false,
            stage_control(),
            probe.as_deref_mut(),
        )?;
        let out = denoise_segment(&mut stage2, &x, &schedule, config.method, r, 0, &mut carry)?;
        nfe_denoise += stage2.evals;
        audit.append(&mut stage2.audit);
        out
    } else {
        let mut field = build_guided(
            model,
            &regions,
            request.kind,
            &source_tokens,
            &target_tokens,
            negative_tokens.as_ref(),
            config,
            false,
            stage_control(),
            probe.as_deref_mut(),
        )?;
        let mut carry = Carry::new();
        let out = denoise_segment(&mut field, &x1, &schedule, config.method, n, 0, &mut carry)?;
        nfe_denoise += field.evals;
        audit.append(&mut field.audit);
        out
    };

    let image = clamp01(unpatchify(&x_final, mc.patch, grid, mc.channels)?);

    // Proxy scores against the final masks. The background comparison is
    // absent when the dilated edit regions swallow the whole image.
    let union = union_hard(&regions, grid);
    let (background_mse, psnr) =
        match metrics::background_mse(&request.source, &image, &union, config.band_radius) {
            Ok((m, p)) => (Some(m), Some(p)),
            Err(Error::EmptyBackground) => (None, None),
            Err(e) => return Err(e),
        };
    let edge_iou = metrics::edge_iou_outside_mask(
        &request.source,
        &image,
        &union,
        config.edge_sigma,
        config.edge_low,
        config.edge_high,
    )?;
    let region_target_score = match parse_class(&regions[0].prompt.text) {
        Ok((color, shape)) => {
            Some(metrics::region_target_score(&image, &regions[0].hard, color, shape)?)
        }
        Err(_) => None,
    };
    let scores = ProxyScores {
        background_mse,
        psnr,
        edge_iou_outside_mask: edge_iou,
        region_target_score,
        mask_iou: None,
    };

    let report = EditReport {
        kind: request.kind,
        source_prompt: request.source_prompt.clone(),
        target_prompt: request.target_prompt.clone(),
        negative_prompt: request.negative_prompt.clone(),
        config: config.clone(),
        grid,
        regions: regions
            .iter()
            .zip(&salients)
            .map(|(r, s)| RegionReport {
                prompt: r.prompt.text.clone(),
                point: r.point,
                initial_patches: r.initial.indices(),
                final_patches: r.hard.indices(),
                salient: s.clone(),
            })
            .collect(),
        refine_interval,
        nfe_invert,
        nfe_denoise,
        nfe_probe,
        cache_audit: audit,
        scores,
    };
    Ok((image, report))
}

/// Round-trip fidelity of inversion followed by plain denoising.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructReport {
    pub mse: f64,
    pub psnr: f64,
    pub nfe_invert: usize,
    pub nfe_denoise: usize,
    pub cache_audit: Vec<CacheUse>,
}

/// Invert a source image and denoise it straight back under the same prompt
/// and uniform control. No regions, no guidance: a fidelity check of the
/// inversion, the integrator, and the control replay.
pub fn reconstruct(
    model: &Model,
    source: &Image,
    prompt: &str,
    config: &EditConfig,
) -> Result<(Image, ReconstructReport)> {
    let (x1, cache, nfe_invert) = invert_with_cache(model, source, prompt, config)?;
    let mc = &model.config;
    let tokens = PromptTokens::encode(&model.vocab, prompt, PromptRole::Global);
    let layout = TokenLayout::plain(mc.n_patches(), tokens.len());
    let mask = build_attention_mask(&layout, IntraImageMode::BlockDiag)?;
    let edges = canny_edges(source, config.edge_sigma, config.edge_low, config.edge_high)?;
    let edge_tokens = patchify_edges(&edges, mc.patch)?;
    let control = match config.control {
        ControlSource::Off => StageControl::Off,
        ControlSource::CurrentPass => StageControl::Live(&edge_tokens),
        _ => StageControl::Cached(&cache),
    };
    let mut field = GuidedField {
        model,
        cond: Branch { layout, ids: tokens.ids.clone(), mask, bias: None },
        second: None,
        guidance: 1.0,
        control,
        coeffs: CtrlCoeffs::Uniform(config.beta),
        n_control: mc.n_control,
        audit: Vec::new(),
        evals: 0,
        probe_evals: 0,
        probing: false,
        probe: None,
    };
    let schedule = Schedule::uniform(config.n_steps)?;
    let x0 = denoise_segment(
        &mut field,
        &x1,
        &schedule,
        config.method,
        schedule.n_intervals(),
        0,
        &mut Carry::new(),
    )?;
    let image = clamp01(unpatchify(&x0, mc.patch, mc.grid(), mc.channels)?);
    let empty = PatchMask::filled(mc.grid(), mc.grid(), false);
    let (mse, psnr) = metrics::background_mse(source, &image, &empty, 0)?;
    let report = ReconstructReport {
        mse,
        psnr,
        nfe_invert,
        nfe_denoise: field.evals,
        cache_audit: field.audit,
    };
    Ok((image, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model() -> Model {
        Model::new(
            ModelConfig {
                image_size: 8,
                channels: 3,
                patch: 2,
                d_model: 16,
                n_heads: 2,
                n_multi: 2,
                n_single: 1,
                n_control: 1,
                mlp_ratio: 2,
                freq_dim: 8,
                max_text_pos: 8,
            },
            7,
        )
        .unwrap()
    }

    fn tiny_source() -> Image {
        let mut img = Image::zeros(8, 8, 3);
        for y in 2..6 {
            for x in 2..6 {
                img.set(y, x, 0, 0.85);
                img.set(y, x, 1, 0.10);
                img.set(y, x, 2, 0.10);
            }
        }
        img
    }

    fn corner_mask() -> PatchMask {
        let mut m = PatchMask::filled(4, 4, false);
        m.set(0, 0, true);
        m
    }

    fn tiny_config() -> EditConfig {
        EditConfig { n_steps: 4, band_radius: 1, ..EditConfig::default() }
    }

    fn mask_request() -> EditRequest {
        EditRequest {
            kind: EditKind::Add,
            source: tiny_source(),
            source_prompt: "red square on dark background".into(),
            target_prompt: "green circle on dark background".into(),
            negative_prompt: None,
            regions: vec![RegionSpec::Mask { mask: corner_mask(), prompt: "green circle".into() }],
        }
    }

    #[test]
    fn removal_guidance_matches_the_documented_example() {
        let v_pos = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let v_neg = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let v = removal_guidance(&v_pos, &v_neg, 4.0).unwrap();
        assert_eq!(v.data(), &[4.0, -3.0]);
    }

    #[test]
    fn salient_points_break_ties_by_patch_index() {
        assert_eq!(salient_points(&[0.5, 0.5, 0.5, 0.5], 3), vec![0, 1, 2]);
        assert_eq!(salient_points(&[0.1, 0.9, 0.5, 0.9], 2), vec![1, 3]);
        assert_eq!(salient_points(&[0.1, 0.9], 10), vec![1, 0]);
    }

    #[test]
    fn refine_mask_keeps_only_seeded_components() {
        // Two 8-connected blobs on a 4x5 grid; the seed sits in the left one.
        #[rustfmt::skip]
        let dev = vec![
            0.0, 0.0, 0.0, 0.0, 0.0,
            0.3, 0.3, 0.0, 0.3, 0.0,
            0.3, 0.0, 0.0, 0.3, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0,
        ];
        let fallback = {
            let mut m = PatchMask::filled(4, 5, false);
            m.set(3, 4, true);
            m
        };
        let got = refine_mask(&dev, 4, 5, 0.25, &[5], None, &fallback).unwrap();
        assert_eq!(got.indices(), vec![5, 6, 10]);

        // A bound clips the component.
        let bound = {
            let mut m = PatchMask::filled(4, 5, false);
            m.set(1, 0, true);
            m
        };
        let clipped = refine_mask(&dev, 4, 5, 0.25, &[5], Some(&bound), &fallback).unwrap();
        assert_eq!(clipped.indices(), vec![5]);

        // No candidate reaches the threshold: fall back.
        let none = refine_mask(&dev, 4, 5, 0.9, &[5], None, &fallback).unwrap();
        assert_eq!(none.indices(), fallback.indices());

        // Seeds outside every candidate component also fall back.
        let stray = refine_mask(&dev, 4, 5, 0.25, &[0], None, &fallback).unwrap();
        assert_eq!(stray.indices(), fallback.indices());
    }

    #[test]
    fn mask_from_indices_round_trips_and_bounds_checks() {
        let m = mask_from_indices(2, &[0, 3]).unwrap();
        assert!(m.get(0, 0) && m.get(1, 1));
        assert!(!m.get(0, 1) && !m.get(1, 0));
        assert!(matches!(mask_from_indices(2, &[4]), Err(Error::InvalidRequest(_))));
    }

    #[test]
    fn invalid_requests_are_rejected_up_front() {
        let model = tiny_model();
        let cfg = tiny_config();

        let mut bad_guidance = cfg.clone();
        bad_guidance.guidance = 0.5;
        assert!(matches!(
            edit(&model, &mask_request(), &bad_guidance),
            Err(Error::InvalidConfig(_))
        ));

        let mut removal_by_point = mask_request();
        removal_by_point.kind = EditKind::Remove;
        removal_by_point.negative_prompt = Some("red square".into());
        removal_by_point.regions =
            vec![RegionSpec::Point { point: (0.25, 0.25), prompt: String::new() }];
        assert!(matches!(
            edit(&model, &removal_by_point, &cfg),
            Err(Error::InvalidRequest(_))
        ));

        let mut removal_without_negative = mask_request();
        removal_without_negative.kind = EditKind::Remove;
        assert!(matches!(
            edit(&model, &removal_without_negative, &cfg),
            Err(Error::InvalidRequest(_))
        ));

        let mut overlapping = mask_request();
        overlapping.regions = vec![
            RegionSpec::Mask { mask: corner_mask(), prompt: "green circle".into() },
            RegionSpec::Mask { mask: corner_mask(), prompt: "blue square".into() },
        ];
        assert!(matches!(edit(&model, &overlapping, &cfg), Err(Error::InvalidRequest(_))));
    }

    #[test]
    fn mask_edit_is_deterministic_with_a_coherent_audit() {
        let model = tiny_model();
        let cfg = tiny_config();
        let req = mask_request();
        let (img_a, report) = edit(&model, &req, &cfg).unwrap();
        let (img_b, _) = edit(&model, &req, &cfg).unwrap();
        assert!(img_a
            .data()
            .iter()
            .zip(img_b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        // Second-order: n+1 inversion evals, and one cache consumption per
        // denoise evaluation (bootstrap plus n midpoints), each doubled by
        // the guidance branch in the NFE count.
        let n = cfg.n_steps;
        assert_eq!(report.nfe_invert, n + 1);
        assert_eq!(report.nfe_denoise, 2 * (n + 1));
        assert_eq!(report.nfe_probe, 0);
        assert_eq!(report.cache_audit.len(), n + 1);
        let boots: Vec<_> = report
            .cache_audit
            .iter()
            .filter(|u| u.kind == ConsumeKind::Bootstrap)
            .collect();
        assert_eq!(boots.len(), 1);
        assert_eq!(boots[0].key, n - 1);
        for u in &report.cache_audit {
            if u.kind == ConsumeKind::Midpoint {
                assert_eq!(
                    u.eval_t.to_bits(),
                    u.recorded_t.to_bits(),
                    "midpoint replay must land on the recorded time"
                );
            }
        }
        assert_eq!(report.refine_interval, None);
        assert_eq!(report.regions[0].initial_patches, report.regions[0].final_patches);
        assert!(report.scores.background_mse.is_some_and(f64::is_finite));
    }

    #[test]
    fn zero_beta_control_matches_control_off_bitwise() {
        let model = tiny_model();
        let req = mask_request();
        let mut off = tiny_config();
        off.method = OdeMethod::Euler;
        off.n_steps = 3;
        off.control = ControlSource::Off;
        let mut zeroed = off.clone();
        zeroed.control = ControlSource::CachedSelective;
        zeroed.beta = 0.0;
        let (img_off, _) = edit(&model, &req, &off).unwrap();
        let (img_zero, _) = edit(&model, &req, &zeroed).unwrap();
        assert!(img_off
            .data()
            .iter()
            .zip(img_zero.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn guidance_of_one_skips_the_second_branch() {
        let model = tiny_model();
        let req = mask_request();
        let mut cfg = tiny_config();
        cfg.guidance = 1.0;
        let (_, report) = edit(&model, &req, &cfg).unwrap();
        assert_eq!(report.nfe_denoise, cfg.n_steps + 1);
    }

    #[test]
    fn hinted_edit_refines_and_reports_the_stage_switch() {
        let model = tiny_model();
        let cfg = tiny_config();
        let req = EditRequest {
            kind: EditKind::Add,
            source: tiny_source(),
            source_prompt: "red square on dark background".into(),
            target_prompt: "green circle on dark background".into(),
            negative_prompt: None,
            regions: vec![RegionSpec::Point {
                point: (0.25, 0.25),
                prompt: "green circle".into(),
            }],
        };
        let (img_a, report) = edit(&model, &req, &cfg).unwrap();
        let (img_b, _) = edit(&model, &req, &cfg).unwrap();
        assert!(img_a
            .data()
            .iter()
            .zip(img_b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        // round(0.3 * 4) = 1: three soft steps, the probe, one hard step.
        assert_eq!(report.refine_interval, Some(1));
        assert_eq!(report.nfe_probe, 2);
        assert_eq!(report.nfe_denoise, 2 * (cfg.n_steps + 1));
        let probes: Vec<_> = report
            .cache_audit
            .iter()
            .filter(|u| u.kind == ConsumeKind::Probe)
            .collect();
        assert_eq!(probes.len(), 1);
        assert_eq!(probes[0].key, 0);
        let region = &report.regions[0];
        assert!(region.salient.as_ref().is_some_and(|s| !s.is_empty()));
        assert!(!region.final_patches.is_empty());
        assert_eq!(region.point, Some((0.25, 0.25)));
    }

    #[test]
    fn reconstruction_reports_fidelity_and_exact_replay_times() {
        let model = tiny_model();
        let cfg = tiny_config();
        let (image, report) = reconstruct(&model, &tiny_source(), "red square", &cfg).unwrap();
        assert_eq!(image.height(), 8);
        assert!(report.mse.is_finite());
        assert_eq!(report.nfe_invert, cfg.n_steps + 1);
        assert_eq!(report.nfe_denoise, cfg.n_steps + 1);
        for u in &report.cache_audit {
            if u.kind == ConsumeKind::Midpoint {
                assert_eq!(u.eval_t.to_bits(), u.recorded_t.to_bits());
            }
        }
    }
}
