//! The joint image-text transformer and its edge-control branch.
//!
//! The network predicts a velocity field over image patch tokens. Image
//! patches and prompt tokens run through a stack of two-stream blocks
//! (separate image/text weights, one shared attention) followed by
//! single-stream blocks over the concatenated sequence. An optional control
//! branch, a duplicate of the first blocks, reads an edge map alongside the
//! noisy image and feeds its hidden states back into the main stack through
//! zero-initialized projections, scaled per patch so individual regions can
//! opt out of edge guidance.
//!
//! All forward passes go through the autodiff tape, so the same code path
//! serves training and inference.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::canny::EdgeMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::masks::{AttentionMask, PatchMask, TokenLayout};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

/// Architecture hyperparameters. The defaults describe the reference model
/// used by the CLI and the test suite; smaller configs are for tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Image channels (3 for RGB).
    pub channels: usize,
    /// Patch side in pixels.
    pub patch: usize,
    /// Hidden width.
    pub d_model: usize,
    /// Attention heads.
    pub n_heads: usize,
    /// Two-stream blocks.
    pub n_multi: usize,
    /// Single-stream blocks after the two-stream stack.
    pub n_single: usize,
    /// Control branch depth; each control block output is injected
    /// round-robin into the two-stream blocks.
    pub n_control: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub mlp_ratio: usize,
    /// Sinusoidal timestep feature width.
    pub freq_dim: usize,
    /// Learned text positions (within-span index, capped).
    pub max_text_pos: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 4,
            d_model: 64,
            n_heads: 4,
            n_multi: 4,
            n_single: 2,
            n_control: 2,
            mlp_ratio: 2,
            freq_dim: 32,
            max_text_pos: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.image_size == 0 || self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "width {} not divisible into {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.n_multi == 0 || self.n_single == 0 {
            return bad("need at least one block of each kind".into());
        }
        if self.n_control == 0 || self.n_control > self.n_multi {
            return bad(format!(
                "control depth {} must be in 1..={}",
                self.n_control, self.n_multi
            ));
        }
        if self.mlp_ratio == 0 || self.max_text_pos == 0 {
            return bad("mlp_ratio and max_text_pos must be positive".into());
        }
        if self.freq_dim < 2 || self.freq_dim % 2 != 0 {
            return bad(format!("freq_dim {} must be even and >= 2", self.freq_dim));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per image patch token.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Values per edge-map patch token.
    pub fn edge_patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Sinusoidal features of a scalar time in `[0, 1]`, scaled up so nearby
/// times stay distinguishable across the frequency bands.
pub fn sinusoidal_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (-(i as f64) / denom * 10000.0_f64.ln()).exp();
        let arg = t * 1000.0 * freq;
        data[i] = arg.sin();
        data[half + i] = arg.cos();
    }
    Tensor::new(vec![1, dim], data).expect("shape matches construction")
}

/// Flatten an image into patch tokens, mapping pixel values to `[-1, 1]`.
/// Patch order is row-major over the grid; within a patch, row-major pixels
/// with channels interleaved.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{h}x{w} image not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        data.push(2.0 * img.get(gy * patch + py, gx * patch + px, ch) - 1.0);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * c], data)
}

/// Inverse of [`patchify`]; values map back through `(v + 1) / 2` without
/// clamping (clamping happens only when saving to disk).
pub fn unpatchify(tokens: &Tensor, patch: usize, grid: usize, channels: usize) -> Result<Image> {
    let pd = patch * patch * channels;
    if tokens.shape() != [grid * grid, pd] {
        return Err(Error::ShapeMismatch(format!(
            "expected [{}, {pd}] patch tokens, got {:?}",
            grid * grid,
            tokens.shape()
        )));
    }
    let side = grid * patch;
    let mut img = Image::zeros(side, side, channels);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = tokens.row(gy * grid + gx);
            let mut i = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..channels {
                        img.set(gy * patch + py, gx * patch + px, ch, (row[i] + 1.0) / 2.0);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Flatten an edge map into patch tokens (1.0 on edges, 0.0 elsewhere).
pub fn patchify_edges(edges: &EdgeMap, patch: usize) -> Result<Tensor> {
    let (h, w) = (edges.height(), edges.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{h}x{w} edge map not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    data.push(if edges.get(gy * patch + py, gx * patch + px) {
                        1.0
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch], data)
}

/// Named parameter tensors with a stable iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "parameter {name} inserted twice"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Parameter leaves of one store bound into one graph.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unbound parameter {name}"),
        }
    }

    /// Store index and graph var pairs, in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-patch scaling of injected control features. A patch with coefficient
/// zero is copied through untouched, bit for bit.
#[derive(Debug, Clone)]
pub enum CtrlCoeffs {
    Uniform(f64),
    PerPatch(Rc<Vec<f64>>),
}

impl CtrlCoeffs {
    fn rows(&self, n_patches: usize) -> Result<Rc<Vec<f64>>> {
        match self {
            CtrlCoeffs::Uniform(v) => Ok(Rc::new(vec![*v; n_patches])),
            CtrlCoeffs::PerPatch(v) => {
                if v.len() != n_patches {
                    return Err(Error::ShapeMismatch(format!(
                        "{} control coefficients for {} patches",
                        v.len(),
                        n_patches
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

/// One recorded control-branch activation.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub tensor: Tensor,
    /// The time the entry was recorded at, for pairing audits.
    pub t: f64,
}

/// Write-once store of control-branch hidden states, keyed by control block
/// and an integer step key (the schedule interval the evaluation belongs to).
#[derive(Debug, Clone, Default)]
pub struct ControlCache {
    entries: HashMap<(usize, usize), CacheEntry>,
}

impl ControlCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, block: usize, key: usize, t: f64, tensor: Tensor) -> Result<()> {
        use std::collections::hash_map::Entry;
        match self.entries.entry((block, key)) {
            Entry::Occupied(_) => Err(Error::DuplicateCacheEntry { block, step: key }),
            Entry::Vacant(slot) => {
                slot.insert(CacheEntry { tensor, t });
                Ok(())
            }
        }
    }

    pub fn get(&self, block: usize, key: usize) -> Result<&CacheEntry> {
        self.entries
            .get(&(block, key))
            .ok_or(Error::MissingCacheEntry { block, step: key })
    }

    pub fn contains(&self, block: usize, key: usize) -> bool {
        self.entries.contains_key(&(block, key))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Step keys recorded for one control block, ascending.
    pub fn keys_for_block(&self, block: usize) -> Vec<usize> {
        let mut keys: Vec<usize> = self
            .entries
            .keys()
            .filter(|(b, _)| *b == block)
            .map(|&(_, k)| k)
            .collect();
        keys.sort_unstable();
        keys
    }
}

/// How the control branch participates in one evaluation.
pub enum ControlArg<'a> {
    /// No control branch at all.
    Off,
    /// Run the branch on this edge map; optionally record its block outputs.
    Live {
        /// Pre-patchified edge tokens from [`patchify_edges`].
        edge_tokens: &'a Tensor,
        coeffs: &'a CtrlCoeffs,
        record: Option<(&'a mut ControlCache, usize, f64)>,
    },
    /// Skip the branch and inject previously recorded block outputs.
    Cached {
        cache: &'a ControlCache,
        key: usize,
        coeffs: &'a CtrlCoeffs,
    },
}

/// Accumulates attention mass from image queries into one text span, averaged
/// over heads and blocks of the main stack.
#[derive(Debug, Clone)]
pub struct EvalTrace {
    span: std::ops::Range<usize>,
    mass: Vec<f64>,
    records: usize,
}

impl EvalTrace {
    pub fn new(span: std::ops::Range<usize>, n_patches: usize) -> Self {
        Self { span, mass: vec![0.0; n_patches], records: 0 }
    }

    fn record(&mut self, probs: &Tensor) {
        let n = probs.cols();
        for (q, m) in self.mass.iter_mut().enumerate() {
            let row = &probs.data()[q * n..(q + 1) * n];
            *m += self.span.clone().map(|k| row[k]).sum::<f64>();
        }
        self.records += 1;
    }

    /// Mean attention mass per patch; errors if nothing was recorded.
    pub fn mean(&self) -> Result<Vec<f64>> {
        if self.records == 0 {
            return Err(Error::EmptyRecord);
        }
        Ok(self.mass.iter().map(|&m| m / self.records as f64).collect())
    }
}

/// Adds β-scaled control features onto image tokens, skipping editable
/// patches. Rows where `editable` is true are copied bit for bit; the rest
/// receive `z + beta * control` elementwise. With no mask every row gets the
/// full contribution.
pub fn combine_control(
    z: &Tensor,
    control: &Tensor,
    beta: f64,
    editable: Option<&PatchMask>,
) -> Result<Tensor> {
    if z.shape() != control.shape() {
        return Err(Error::ShapeMismatch(format!(
            "tokens {:?} vs control {:?}",
            z.shape(),
            control.shape()
        )));
    }
    if let Some(e) = editable {
        if e.data().len() != z.rows() {
            return Err(Error::ShapeMismatch(format!(
                "mask over {} patches, tokens have {} rows",
                e.data().len(),
                z.rows()
            )));
        }
    }
    let cols = z.cols();
    let mut out = z.clone();
    for r in 0..z.rows() {
        if editable.is_some_and(|e| e.data()[r]) {
            continue;
        }
        let zc = &control.data()[r * cols..(r + 1) * cols];
        for (o, &c) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(zc) {
            *o += beta * c;
        }
    }
    Ok(out)
}

/// Captures raw activations during a forward pass for equality audits:
/// attention probability rows for chosen query tokens, and the image tokens
/// immediately before and after each control injection.
#[derive(Debug, Clone, Default)]
pub struct ActProbe {
    /// Sequence positions whose attention rows are captured (typically a
    /// prompt span). Leave empty to skip attention capture.
    pub query_rows: Vec<usize>,
    /// Captured probability rows, concatenated in traversal order
    /// (block-major, then head, then query row).
    pub attn_rows: Vec<f64>,
    /// Per injection site: image tokens entering and leaving the injection.
    pub injections: Vec<(Tensor, Tensor)>,
}

impl ActProbe {
    pub fn new(query_rows: Vec<usize>) -> Self {
        Self { query_rows, attn_rows: Vec::new(), injections: Vec::new() }
    }

    fn record_attn(&mut self, probs: &Tensor) {
        let n = probs.cols();
        for &q in &self.query_rows {
            self.attn_rows.extend_from_slice(&probs.data()[q * n..(q + 1) * n]);
        }
    }
}

/// Everything one velocity evaluation needs besides the state itself.
pub struct VelocityArgs<'a> {
    pub layout: &'a TokenLayout,
    /// Concatenated prompt token ids, one per text position in the layout.
    pub token_ids: &'a [usize],
    pub mask: &'a AttentionMask,
    /// Optional additive logit bias, full sequence by full sequence.
    pub bias: Option<&'a Tensor>,
    pub control: ControlArg<'a>,
    pub trace: Option<&'a mut EvalTrace>,
    pub probe: Option<&'a mut ActProbe>,
}

/// The model: config, parameters, and the vocabulary it was trained with.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: Vocabulary,
}

fn stream_param_names(prefix: &str, out: &mut Vec<(String, ParamKind)>) {
    use ParamKind::*;
    out.push((format!("{prefix}.tmod.w"), Linear));
    out.push((format!("{prefix}.tmod.b"), Bias));
    out.push((format!("{prefix}.ln1.g"), Gamma));
    out.push((format!("{prefix}.ln1.b"), Beta));
    for n in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.attn.{n}"), Linear));
    }
    for n in ["bq", "bk", "bv", "bo"] {
        out.push((format!("{prefix}.attn.{n}"), Bias));
    }
    out.push((format!("{prefix}.ln2.g"), Gamma));
    out.push((format!("{prefix}.ln2.b"), Beta));
    out.push((format!("{prefix}.mlp.w1"), Linear));
    out.push((format!("{prefix}.mlp.b1"), Bias));
    out.push((format!("{prefix}.mlp.w2"), Linear));
    out.push((format!("{prefix}.mlp.b2"), Bias));
}

enum ParamKind {
    Linear,
    Bias,
    Gamma,
    Beta,
}

impl Model {
    /// Fresh model with deterministic initialization. The control branch
    /// starts as a copy of the first two-stream blocks, and every injection
    /// projection starts at zero, so an untrained model behaves identically
    /// with and without control.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::grammar();
        let d = config.d_model;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();

        let randn = |shape: &[usize], std: f64, rng: &mut ChaCha12Rng| {
            Tensor::randn(shape, std, rng)
        };
        let linear_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        params.insert(
            "patch.w",
            randn(&[config.patch_dim(), d], linear_std(config.patch_dim()), &mut rng),
        );
        params.insert("patch.b", Tensor::zeros(&[1, d]));
        params.insert("pos.img", randn(&[config.n_patches(), d], 0.02, &mut rng));
        params.insert("text.embed", vocab.init_embedding(d, seed));
        params.insert("text.pos", randn(&[config.max_text_pos, d], 0.02, &mut rng));
        params.insert(
            "time.w1",
            randn(&[config.freq_dim, d], linear_std(config.freq_dim), &mut rng),
        );
        params.insert("time.b1", Tensor::zeros(&[1, d]));
        params.insert("time.w2", randn(&[d, d], linear_std(d), &mut rng));
        params.insert("time.b2", Tensor::zeros(&[1, d]));

        let mut block_names = Vec::new();
        for i in 0..config.n_multi {
            stream_param_names(&format!("multi{i}.img"), &mut block_names);
            stream_param_names(&format!("multi{i}.txt"), &mut block_names);
        }
        for i in 0..config.n_single {
            stream_param_names(&format!("single{i}.all"), &mut block_names);
        }
        for (name, kind) in &block_names {
            let hidden = d * config.mlp_ratio;
            let t = match kind {
                ParamKind::Gamma => Tensor::from_fn(&[1, d], |_| 1.0),
                ParamKind::Beta => Tensor::zeros(&[1, d]),
                ParamKind::Bias => {
                    let w = if name.ends_with("mlp.b1") { hidden } else { d };
                    Tensor::zeros(&[1, w])
                }
                ParamKind::Linear => {
                    if name.ends_with("mlp.w1") {
                        randn(&[d, hidden], linear_std(d), &mut rng)
                    } else if name.ends_with("mlp.w2") {
                        randn(&[hidden, d], linear_std(hidden), &mut rng)
                    } else {
                        randn(&[d, d], linear_std(d), &mut rng)
                    }
                }
            };
            params.insert(name, t);
        }

        params.insert("head.ln.g", Tensor::from_fn(&[1, d], |_| 1.0));
        params.insert("head.ln.b", Tensor::zeros(&[1, d]));
        params.insert(
            "head.w",
            randn(&[d, config.patch_dim()], linear_std(d), &mut rng),
        );
        params.insert("head.b", Tensor::zeros(&[1, config.patch_dim()]));

        // Control branch: clone the stem and the first blocks, then add the
        // edge embedding and the zero-initialized injection projections.
        let clone_of = |params: &ParamStore, name: &str| {
            params.get(name).expect("cloning an existing parameter").clone()
        };
        params.insert("ctrl.patch.w", clone_of(&params, "patch.w"));
        params.insert("ctrl.patch.b", clone_of(&params, "patch.b"));
        params.insert("ctrl.pos", clone_of(&params, "pos.img"));
        params.insert(
            "ctrl.edge.w",
            randn(&[config.edge_patch_dim(), d], linear_std(config.edge_patch_dim()), &mut rng),
        );
        params.insert("ctrl.edge.b", Tensor::zeros(&[1, d]));
        for i in 0..config.n_control {
            let mut names = Vec::new();
            stream_param_names(&format!("multi{i}.img"), &mut names);
            stream_param_names(&format!("multi{i}.txt"), &mut names);
            for (name, _) in names {
                let copy = clone_of(&params, &name);
                params.insert(&name.replacen("multi", "ctrl", 1), copy);
            }
        }
        for j in 0..config.n_multi {
            params.insert(&format!("inject{j}.w"), Tensor::zeros(&[d, d]));
        }

        Ok(Self { config, params, vocab })
    }

    /// Bind every parameter into `g` as a leaf; trainable leaves collect
    /// gradients on the backward pass.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut index = HashMap::with_capacity(self.params.len());
        for (i, (name, t)) in self.params.iter().enumerate() {
            vars.push(g.leaf(t.clone(), trainable));
            index.insert(name.to_string(), i);
        }
        Bound { vars, index }
    }

    /// Within-span positions for every text token of a layout, capped at the
    /// learned position table size.
    pub fn text_positions(&self, layout: &TokenLayout) -> Vec<usize> {
        let cap = self.config.max_text_pos - 1;
        let mut out = Vec::with_capacity(layout.n_text());
        for span in layout.prompts() {
            for j in 0..span.len {
                out.push(j.min(cap));
            }
        }
        out
    }

    /// Predict the velocity for patch tokens `x` (already a graph var) at
    /// time `t`. Returns the `[n_patches, patch_dim]` output var.
    pub fn velocity_in(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        t: f64,
        args: &mut VelocityArgs<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let np = cfg.n_patches();
        let nt = args.layout.n_text();
        let seq = args.layout.seq_len();
        if args.layout.n_patches() != np {
            return Err(Error::ShapeMismatch(format!(
                "layout has {} patches, model expects {np}",
                args.layout.n_patches()
            )));
        }
        if args.token_ids.len() != nt {
            return Err(Error::ShapeMismatch(format!(
                "{} token ids for {} text positions",
                args.token_ids.len(),
                nt
            )));
        }
        if args.mask.len() != seq {
            return Err(Error::ShapeMismatch(format!(
                "mask over {} tokens, layout has {seq}",
                args.mask.len()
            )));
        }
        if let Some(bias) = args.bias {
            if bias.shape() != [seq, seq] {
                return Err(Error::ShapeMismatch(format!(
                    "bias shape {:?}, expected [{seq}, {seq}]",
                    bias.shape()
                )));
            }
        }
        for &id in args.token_ids {
            if id >= self.vocab.len() {
                return Err(Error::ShapeMismatch(format!(
                    "token id {id} outside vocabulary of {}",
                    self.vocab.len()
                )));
            }
        }

        // Timestep conditioning, shared by every block.
        let feats = g.input(sinusoidal_features(t, cfg.freq_dim));
        let h1 = linear(g, feats, b.var("time.w1"), b.var("time.b1"), 1)?;
        let h1 = g.gelu(h1);
        let cond = linear(g, h1, b.var("time.w2"), b.var("time.b2"), 1)?;

        // Token embeddings.
        let mut img = linear(g, x, b.var("patch.w"), b.var("patch.b"), np)?;
        img = g.add(img, b.var("pos.img"))?;
        let ids = Rc::new(args.token_ids.to_vec());
        let positions = Rc::new(self.text_positions(args.layout));
        let tok = g.gather_rows(b.var("text.embed"), ids)?;
        let pos = g.gather_rows(b.var("text.pos"), positions)?;
        let mut txt = g.add(tok, pos)?;

        // Control branch: either run it live (recording if asked) or load the
        // recorded block outputs.
        let mut ctrl_feats: Vec<Var> = Vec::new();
        let mut ctrl_coeffs: Option<Rc<Vec<f64>>> = None;
        match &mut args.control {
            ControlArg::Off => {}
            ControlArg::Live { edge_tokens, coeffs, record } => {
                if edge_tokens.shape() != [np, cfg.edge_patch_dim()] {
                    return Err(Error::ShapeMismatch(format!(
                        "edge tokens {:?}, expected [{np}, {}]",
                        edge_tokens.shape(),
                        cfg.edge_patch_dim()
                    )));
                }
                ctrl_coeffs = Some(coeffs.rows(np)?);
                let ev = g.input((*edge_tokens).clone());
                let mut ci = linear(g, x, b.var("ctrl.patch.w"), b.var("ctrl.patch.b"), np)?;
                let ce = linear(g, ev, b.var("ctrl.edge.w"), b.var("ctrl.edge.b"), np)?;
                ci = g.add(ci, ce)?;
                ci = g.add(ci, b.var("ctrl.pos"))?;
                let mut ct = txt;
                for blk in 0..cfg.n_control {
                    let prefix = format!("ctrl{blk}");
                    let (ni, ntx) = self.two_stream_block(
                        g, b, &prefix, ci, ct, cond, args.mask, args.bias, None, None,
                    )?;
                    ci = ni;
                    ct = ntx;
                    ctrl_feats.push(ci);
                }
                if let Some((cache, key, rec_t)) = record {
                    for (blk, &cv) in ctrl_feats.iter().enumerate() {
                        cache.insert(blk, *key, *rec_t, g.value(cv).clone())?;
                    }
                }
            }
            ControlArg::Cached { cache, key, coeffs } => {
                ctrl_coeffs = Some(coeffs.rows(np)?);
                for blk in 0..cfg.n_control {
                    let entry = cache.get(blk, *key)?;
                    if entry.tensor.shape() != [np, cfg.d_model] {
                        return Err(Error::ShapeMismatch(format!(
                            "cached control block {blk} has shape {:?}",
                            entry.tensor.shape()
                        )));
                    }
                    ctrl_feats.push(g.input(entry.tensor.clone()));
                }
            }
        }

        // Two-stream stack with round-robin control injection.
        for blk in 0..cfg.n_multi {
            let prefix = format!("multi{blk}");
            let (ni, ntx) = self.two_stream_block(
                g,
                b,
                &prefix,
                img,
                txt,
                cond,
                args.mask,
                args.bias,
                args.trace.as_deref_mut(),
                args.probe.as_deref_mut(),
            )?;
            img = ni;
            txt = ntx;
            if let Some(coeffs) = &ctrl_coeffs {
                let feats = ctrl_feats[blk % cfg.n_control];
                let delta = g.matmul(feats, b.var(&format!("inject{blk}.w")))?;
                let before = img;
                img = g.row_scaled_residual(img, delta, coeffs.clone())?;
                if let Some(pr) = args.probe.as_deref_mut() {
                    pr.injections.push((g.value(before).clone(), g.value(img).clone()));
                }
            }
        }

        // Single-stream stack over the concatenated sequence.
        let mut h = g.concat(&[img, txt], 0)?;
        for blk in 0..cfg.n_single {
            let prefix = format!("single{blk}.all");
            h = self.single_stream_block(
                g,
                b,
                &prefix,
                h,
                cond,
                args.mask,
                args.bias,
                args.trace.as_deref_mut(),
                args.probe.as_deref_mut(),
            )?;
        }

        // Velocity head over the image positions.
        let img_out = g.slice(h, 0, 0, np)?;
        let normed = ln_affine(g, img_out, b.var("head.ln.g"), b.var("head.ln.b"), np)?;
        linear(g, normed, b.var("head.w"), b.var("head.b"), np)
    }

    /// Convenience wrapper: build a graph, run one forward pass, return the
    /// predicted velocity as a plain tensor.
    pub fn velocity(&self, x: &Tensor, t: f64, args: &mut VelocityArgs<'_>) -> Result<Tensor> {
        let pd = self.config.patch_dim();
        let np = self.config.n_patches();
        if x.shape() != [np, pd] {
            return Err(Error::ShapeMismatch(format!(
                "state shape {:?}, expected [{np}, {pd}]",
                x.shape()
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.input(x.clone());
        let out = self.velocity_in(&mut g, &b, xv, t, args)?;
        Ok(g.value(out).clone())
    }

    #[allow(clippy::too_many_arguments)]
    fn two_stream_block(
        &self,
        g: &mut Graph,
        b: &Bound,
        prefix: &str,
        img: Var,
        txt: Var,
        cond: Var,
        mask: &AttentionMask,
        bias: Option<&Tensor>,
        trace: Option<&mut EvalTrace>,
        probe: Option<&mut ActProbe>,
    ) -> Result<(Var, Var)> {
        let np = g.value(img).rows();
        let nt = g.value(txt).rows();
        let pi = format!("{prefix}.img");
        let pt = format!("{prefix}.txt");

        let tm_i = linear(g, cond, b.var(&format!("{pi}.tmod.w")), b.var(&format!("{pi}.tmod.b")), 1)?;
        let tm_i = g.broadcast_rows(tm_i, np)?;
        let img = g.add(img, tm_i)?;
        let tm_t = linear(g, cond, b.var(&format!("{pt}.tmod.w")), b.var(&format!("{pt}.tmod.b")), 1)?;
        let tm_t = g.broadcast_rows(tm_t, nt)?;
        let txt = g.add(txt, tm_t)?;

        let ai = ln_affine(g, img, b.var(&format!("{pi}.ln1.g")), b.var(&format!("{pi}.ln1.b")), np)?;
        let at = ln_affine(g, txt, b.var(&format!("{pt}.ln1.g")), b.var(&format!("{pt}.ln1.b")), nt)?;

        let qi = linear(g, ai, b.var(&format!("{pi}.attn.wq")), b.var(&format!("{pi}.attn.bq")), np)?;
        let ki = linear(g, ai, b.var(&format!("{pi}.attn.wk")), b.var(&format!("{pi}.attn.bk")), np)?;
        let vi = linear(g, ai, b.var(&format!("{pi}.attn.wv")), b.var(&format!("{pi}.attn.bv")), np)?;
        let qt = linear(g, at, b.var(&format!("{pt}.attn.wq")), b.var(&format!("{pt}.attn.bq")), nt)?;
        let kt = linear(g, at, b.var(&format!("{pt}.attn.wk")), b.var(&format!("{pt}.attn.bk")), nt)?;
        let vt = linear(g, at, b.var(&format!("{pt}.attn.wv")), b.var(&format!("{pt}.attn.bv")), nt)?;

        let q = g.concat(&[qi, qt], 0)?;
        let k = g.concat(&[ki, kt], 0)?;
        let v = g.concat(&[vi, vt], 0)?;
        let attn = self.joint_attention(g, q, k, v, mask, bias, trace, probe)?;

        let attn_i = g.slice(attn, 0, 0, np)?;
        let attn_t = g.slice(attn, 0, np, nt)?;
        let oi = linear(g, attn_i, b.var(&format!("{pi}.attn.wo")), b.var(&format!("{pi}.attn.bo")), np)?;
        let ot = linear(g, attn_t, b.var(&format!("{pt}.attn.wo")), b.var(&format!("{pt}.attn.bo")), nt)?;
        let img = g.add(img, oi)?;
        let txt = g.add(txt, ot)?;

        let mi = self.mlp(g, b, &pi, img, np)?;
        let img = g.add(img, mi)?;
        let mt = self.mlp(g, b, &pt, txt, nt)?;
        let txt = g.add(txt, mt)?;
        Ok((img, txt))
    }

    #[allow(clippy::too_many_arguments)]
    fn single_stream_block(
        &self,
        g: &mut Graph,
        b: &Bound,
        prefix: &str,
        h: Var,
        cond: Var,
        mask: &AttentionMask,
        bias: Option<&Tensor>,
        trace: Option<&mut EvalTrace>,
        probe: Option<&mut ActProbe>,
    ) -> Result<Var> {
        let n = g.value(h).rows();
        let tm = linear(g, cond, b.var(&format!("{prefix}.tmod.w")), b.var(&format!("{prefix}.tmod.b")), 1)?;
        let tm = g.broadcast_rows(tm, n)?;
        let h = g.add(h, tm)?;

        let a = ln_affine(g, h, b.var(&format!("{prefix}.ln1.g")), b.var(&format!("{prefix}.ln1.b")), n)?;
        let q = linear(g, a, b.var(&format!("{prefix}.attn.wq")), b.var(&format!("{prefix}.attn.bq")), n)?;
        let k = linear(g, a, b.var(&format!("{prefix}.attn.wk")), b.var(&format!("{prefix}.attn.bk")), n)?;
        let v = linear(g, a, b.var(&format!("{prefix}.attn.wv")), b.var(&format!("{prefix}.attn.bv")), n)?;
        let attn = self.joint_attention(g, q, k, v, mask, bias, trace, probe)?;
        let o = linear(g, attn, b.var(&format!("{prefix}.attn.wo")), b.var(&format!("{prefix}.attn.bo")), n)?;
        let h = g.add(h, o)?;

        let m = self.mlp(g, b, prefix, h, n)?;
        g.add(h, m)
    }

    fn mlp(&self, g: &mut Graph, b: &Bound, prefix: &str, x: Var, n: usize) -> Result<Var> {
        let a = ln_affine(g, x, b.var(&format!("{prefix}.ln2.g")), b.var(&format!("{prefix}.ln2.b")), n)?;
        let h = linear(g, a, b.var(&format!("{prefix}.mlp.w1")), b.var(&format!("{prefix}.mlp.b1")), n)?;
        let h = g.gelu(h);
        linear(g, h, b.var(&format!("{prefix}.mlp.w2")), b.var(&format!("{prefix}.mlp.b2")), n)
    }

    /// Multi-head scaled dot-product attention with hard masking and an
    /// optional additive logit bias shared by all heads.
    #[allow(clippy::too_many_arguments)]
    fn joint_attention(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        mask: &AttentionMask,
        bias: Option<&Tensor>,
        mut trace: Option<&mut EvalTrace>,
        mut probe: Option<&mut ActProbe>,
    ) -> Result<Var> {
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let bias_var = bias.map(|t| g.input(t.clone()));
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = g.slice(q, 1, h * hd, hd)?;
            let kh = g.slice(k, 1, h * hd, hd)?;
            let vh = g.slice(v, 1, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale);
            if let Some(bv) = bias_var {
                scores = g.add(scores, bv)?;
            }
            let probs = g.masked_softmax(scores, mask.shared())?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.record(g.value(probs));
            }
            if let Some(pr) = probe.as_deref_mut() {
                pr.record_attn(g.value(probs));
            }
            heads.push(g.matmul(probs, vh)?);
        }
        g.concat(&heads, 1)
    }
}

/// `x W + b` with the bias broadcast over `n` rows.
fn linear(g: &mut Graph, x: Var, w: Var, b: Var, n: usize) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let bb = g.broadcast_rows(b, n)?;
    g.add(xw, bb)
}

/// Layer norm followed by a learned per-feature scale and shift.
fn ln_affine(g: &mut Graph, x: Var, gamma: Var, beta: Var, n: usize) -> Result<Var> {
    let h = g.layer_norm(x)?;
    let gb = g.broadcast_rows(gamma, n)?;
    let h = g.mul(h, gb)?;
    let bb = g.broadcast_rows(beta, n)?;
    g.add(h, bb)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FLOWPTCH";
const CHECKPOINT_VERSION: u32 = 1;

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    write_u64(w, b.len() as u64)?;
    w.write_all(b)
}

fn read_bytes(r: &mut impl Read, cap: u64) -> Result<Vec<u8>> {
    let len = read_u64(r)?;
    if len > cap {
        return Err(Error::Checkpoint(format!(
            "field of {len} bytes exceeds limit {cap}"
        )));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub(crate) fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    write_u64(w, t.shape().len() as u64)?;
    for &d in t.shape() {
        write_u64(w, d as u64)?;
    }
    write_u64(w, t.len() as u64)?;
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let ndim = read_u64(r)?;
    if ndim > 8 {
        return Err(Error::Checkpoint(format!("tensor with {ndim} dimensions")));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    let mut product = 1u64;
    for _ in 0..ndim {
        let d = read_u64(r)?;
        product = product.saturating_mul(d.max(1));
        shape.push(d as usize);
    }
    let len = read_u64(r)?;
    if len != product || len > (1 << 28) {
        return Err(Error::Checkpoint(format!(
            "tensor length {len} does not fit shape {shape:?}"
        )));
    }
    let mut data = Vec::with_capacity(len as usize);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
}

impl Model {
    /// Serialize config, vocabulary, and all parameters. The format is
    /// bit-exact: loading gives back the same tensors to the last bit.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_bytes(&mut w, &cfg)?;
        let words = serde_json::to_vec(self.vocab.words())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_bytes(&mut w, &words)?;
        write_u64(&mut w, self.params.len() as u64)?;
        for (name, t) in self.params.iter() {
            write_bytes(&mut w, name.as_bytes())?;
            write_tensor(&mut w, t)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver)?;
        if u32::from_le_bytes(ver) != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                u32::from_le_bytes(ver)
            )));
        }
        let cfg_bytes = read_bytes(&mut r, 1 << 20)?;
        let config: ModelConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        config.validate()?;
        let word_bytes = read_bytes(&mut r, 1 << 20)?;
        let words: Vec<String> = serde_json::from_slice(&word_bytes)
            .map_err(|e| Error::Checkpoint(format!("vocabulary: {e}")))?;
        let vocab = Vocabulary::from_words(words);
        let count = read_u64(&mut r)?;
        if count > 100_000 {
            return Err(Error::Checkpoint(format!("{count} parameters")));
        }
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_bytes = read_bytes(&mut r, 4096)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?;
            if params.get(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            let t = read_tensor(&mut r)?;
            if !t.all_finite() {
                return Err(Error::Checkpoint(format!("{name} has non-finite values")));
            }
            params.insert(&name, t);
        }
        Ok(Self { config, params, vocab })
    }
}

/// FNV-1a hash of a file's bytes, for embedding in reports.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in &bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{h:016x}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{build_attention_mask, IntraImageMode};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            channels: 3,
            patch: 4,
            d_model: 16,
            n_heads: 2,
            n_multi: 2,
            n_single: 1,
            n_control: 1,
            mlp_ratio: 2,
            freq_dim: 8,
            max_text_pos: 8,
        }
    }

    fn plain_setup(model: &Model, prompt: &str) -> (TokenLayout, Vec<usize>, AttentionMask) {
        let ids = crate::text::PromptTokens::encode(
            &model.vocab,
            prompt,
            crate::text::PromptRole::Global,
        )
        .ids;
        let layout = TokenLayout::plain(model.config.n_patches(), ids.len());
        let mask = build_attention_mask(&layout, IntraImageMode::BlockDiag).unwrap();
        (layout, ids, mask)
    }

    #[test]
    fn velocity_has_patch_token_shape_and_is_finite() {
        let model = Model::new(tiny_config(), 7).unwrap();
        let (layout, ids, mask) = plain_setup(&model, "red circle on the left");
        let x = Tensor::zeros(&[model.config.n_patches(), model.config.patch_dim()]);
        let v = model
            .velocity(
                &x,
                0.5,
                &mut VelocityArgs {
                    layout: &layout,
                    token_ids: &ids,
                    mask: &mask,
                    bias: None,
                    control: ControlArg::Off,
                    trace: None,
                    probe: None,
                },
            )
            .unwrap();
        assert_eq!(v.shape(), [4, 48]);
        assert!(v.all_finite());
    }

    #[test]
    fn zero_initialized_control_matches_no_control_bitwise() {
        let model = Model::new(tiny_config(), 7).unwrap();
        let (layout, ids, mask) = plain_setup(&model, "a blue square");
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = Tensor::randn(&[model.config.n_patches(), model.config.patch_dim()], 1.0, &mut rng);
        let edges = EdgeMap::new(8, 8, vec![true; 64]).unwrap();
        let et = patchify_edges(&edges, 4).unwrap();
        let off = model
            .velocity(&x, 0.3, &mut VelocityArgs {
                layout: &layout,
                token_ids: &ids,
                mask: &mask,
                bias: None,
                control: ControlArg::Off,
                trace: None,
                probe: None,
            })
            .unwrap();
        let on = model
            .velocity(&x, 0.3, &mut VelocityArgs {
                layout: &layout,
                token_ids: &ids,
                mask: &mask,
                bias: None,
                control: ControlArg::Live {
                    edge_tokens: &et,
                    coeffs: &CtrlCoeffs::Uniform(1.0),
                    record: None,
                },
                trace: None,
                probe: None,
            })
            .unwrap();
        assert!(off.bitwise_eq(&on));
    }

    #[test]
    fn cached_control_replays_live_activations_bitwise() {
        let mut model = Model::new(tiny_config(), 7).unwrap();
        // Perturb the injection weights so control actually changes outputs.
        for i in 0..model.params.len() {
            if model.params.name(i).starts_with("inject") {
                let t = model.params.tensor_mut(i);
                for (j, v) in t.data_mut().iter_mut().enumerate() {
                    *v = ((j % 7) as f64 - 3.0) * 0.05;
                }
            }
        }
        let (layout, ids, mask) = plain_setup(&model, "a yellow triangle");
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = Tensor::randn(&[model.config.n_patches(), model.config.patch_dim()], 0.5, &mut rng);
        let edges = EdgeMap::new(8, 8, vec![false; 64]).unwrap();
        let et = patchify_edges(&edges, 4).unwrap();
        let coeffs = CtrlCoeffs::Uniform(0.8);
        let mut cache = ControlCache::new();
        let live = model
            .velocity(&x, 0.25, &mut VelocityArgs {
                layout: &layout,
                token_ids: &ids,
                mask: &mask,
                bias: None,
                control: ControlArg::Live {
                    edge_tokens: &et,
                    coeffs: &coeffs,
                    record: Some((&mut cache, 5, 0.25)),
                },
                trace: None,
                probe: None,
            })
            .unwrap();
        assert_eq!(cache.len(), model.config.n_control);
        let replay = model
            .velocity(&x, 0.25, &mut VelocityArgs {
                layout: &layout,
                token_ids: &ids,
                mask: &mask,
                bias: None,
                control: ControlArg::Cached { cache: &cache, key: 5, coeffs: &coeffs },
                trace: None,
                probe: None,
            })
            .unwrap();
        assert!(live.bitwise_eq(&replay));
        // Write-once: recording the same key again must fail.
        let again = model.velocity(&x, 0.25, &mut VelocityArgs {
            layout: &layout,
            token_ids: &ids,
            mask: &mask,
            bias: None,
            control: ControlArg::Live {
                edge_tokens: &et,
                coeffs: &coeffs,
                record: Some((&mut cache, 5, 0.25)),
            },
            trace: None,
            probe: None,
        });
        assert!(matches!(again, Err(Error::DuplicateCacheEntry { .. })));
    }

    #[test]
    fn patchify_and_unpatchify_are_inverse() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut img = Image::zeros(8, 8, 3);
        use rand::Rng;
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let tokens = patchify(&img, 4).unwrap();
        assert_eq!(tokens.shape(), [4, 48]);
        let back = unpatchify(&tokens, 4, 2, 3).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Model::new(tiny_config(), 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.vocab.words(), model.vocab.words());
        assert_eq!(loaded.params.len(), model.params.len());
        for ((na, ta), (nb, tb)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(na, nb);
            assert!(ta.bitwise_eq(tb), "parameter {na} changed in round trip");
        }
        // Corrupt magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, bytes).unwrap();
        assert!(matches!(Model::load(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn trace_mass_is_a_probability_fraction() {
        let model = Model::new(tiny_config(), 7).unwrap();
        let (layout, ids, mask) = plain_setup(&model, "green circle");
        let span = layout.prompt_range(0);
        let mut trace = EvalTrace::new(span, model.config.n_patches());
        let x = Tensor::zeros(&[model.config.n_patches(), model.config.patch_dim()]);
        model
            .velocity(&x, 0.9, &mut VelocityArgs {
                layout: &layout,
                token_ids: &ids,
                mask: &mask,
                bias: None,
                control: ControlArg::Off,
                trace: Some(&mut trace),
                probe: None,
            })
            .unwrap();
        let mean = trace.mean().unwrap();
        assert_eq!(mean.len(), model.config.n_patches());
        for &m in &mean {
            assert!((0.0..=1.0 + 1e-12).contains(&m));
        }
    }

    #[test]
    fn sinusoidal_features_separate_nearby_times() {
        let a = sinusoidal_features(0.50, 32);
        let b = sinusoidal_features(0.52, 32);
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 0.1, "features too close: {diff}");
    }

    #[test]
    fn combine_control_skips_editable_rows_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let z = Tensor::randn(&[16, 6], 1.0, &mut rng);
        let c = Tensor::randn(&[16, 6], 1.0, &mut rng);
        use rand::Rng;
        let edit =
            PatchMask::new(4, 4, (0..16).map(|_| rng.gen_bool(0.4)).collect::<Vec<_>>()).unwrap();
        let beta = 0.8;

        // Full-mask and zero-strength degeneracies return the input untouched.
        let all = PatchMask::filled(4, 4, true);
        assert!(combine_control(&z, &c, beta, Some(&all)).unwrap().bitwise_eq(&z));
        assert!(combine_control(&z, &c, 0.0, None).unwrap().bitwise_eq(&z));

        let out = combine_control(&z, &c, beta, Some(&edit)).unwrap();
        for r in 0..16 {
            let zr = &z.data()[r * 6..(r + 1) * 6];
            let or = &out.data()[r * 6..(r + 1) * 6];
            let cr = &c.data()[r * 6..(r + 1) * 6];
            if edit.data()[r] {
                for (a, b) in zr.iter().zip(or) {
                    assert_eq!(a.to_bits(), b.to_bits(), "editable row {r} was touched");
                }
            } else {
                for ((a, b), cc) in zr.iter().zip(or).zip(cr) {
                    assert!((b - (a + beta * cc)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn control_stem_matches_main_embedding_without_edges() {
        let mut model = Model::new(tiny_config(), 3).unwrap();
        // Silence the edge pathway entirely.
        for i in 0..model.params.len() {
            if model.params.name(i).starts_with("ctrl.edge") {
                model.params.tensor_mut(i).data_mut().fill(0.0);
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let np = model.config.n_patches();
        let x = Tensor::randn(&[np, model.config.patch_dim()], 0.5, &mut rng);
        let edges = EdgeMap::new(8, 8, vec![false; 64]).unwrap();
        let et = patchify_edges(&edges, 4).unwrap();

        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let xv = g.input(x);
        let main = linear(&mut g, xv, b.var("patch.w"), b.var("patch.b"), np).unwrap();
        let main = g.add(main, b.var("pos.img")).unwrap();
        let ev = g.input(et);
        let stem = linear(&mut g, xv, b.var("ctrl.patch.w"), b.var("ctrl.patch.b"), np).unwrap();
        let ce = linear(&mut g, ev, b.var("ctrl.edge.w"), b.var("ctrl.edge.b"), np).unwrap();
        let stem = g.add(stem, ce).unwrap();
        let stem = g.add(stem, b.var("ctrl.pos")).unwrap();
        for (a, c) in g.value(main).data().iter().zip(g.value(stem).data()) {
            assert_eq!(a, c, "control stem diverges from the main embedding");
        }
    }

    #[test]
    fn probe_shows_injection_leaves_zero_coefficient_rows_untouched() {
        let mut model = Model::new(tiny_config(), 17).unwrap();
        for i in 0..model.params.len() {
            if model.params.name(i).starts_with("inject") {
                let t = model.params.tensor_mut(i);
                for (j, v) in t.data_mut().iter_mut().enumerate() {
                    *v = ((j % 5) as f64 - 2.0) * 0.07;
                }
            }
        }
        let (layout, ids, mask) = plain_setup(&model, "red square");
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let np = model.config.n_patches();
        let x = Tensor::randn(&[np, model.config.patch_dim()], 0.5, &mut rng);
        let mut bits = vec![false; 64];
        for p in [9, 18, 27, 36] {
            bits[p] = true;
        }
        let edges = EdgeMap::new(8, 8, bits).unwrap();
        let et = patchify_edges(&edges, 4).unwrap();
        let per: Vec<f64> = (0..np).map(|p| if p % 2 == 0 { 0.0 } else { 0.8 }).collect();
        let coeffs = CtrlCoeffs::PerPatch(Rc::new(per.clone()));
        let n_text = layout.n_text();
        let mut probe = ActProbe::new((np..np + n_text).collect());
        model
            .velocity(&x, 0.4, &mut VelocityArgs {
                layout: &layout,
                token_ids: &ids,
                mask: &mask,
                bias: None,
                control: ControlArg::Live { edge_tokens: &et, coeffs: &coeffs, record: None },
                trace: None,
                probe: Some(&mut probe),
            })
            .unwrap();
        assert_eq!(probe.injections.len(), model.config.n_multi);
        let d = model.config.d_model;
        let mut touched = 0usize;
        for (before, after) in &probe.injections {
            for (p, &c) in per.iter().enumerate() {
                let br = &before.data()[p * d..(p + 1) * d];
                let ar = &after.data()[p * d..(p + 1) * d];
                if c == 0.0 {
                    for (a, b) in br.iter().zip(ar) {
                        assert_eq!(a.to_bits(), b.to_bits(), "gated patch {p} moved");
                    }
                } else if br.iter().zip(ar).any(|(a, b)| a != b) {
                    touched += 1;
                }
            }
        }
        assert!(touched > 0, "control injection never changed an open patch");
        // Attention capture: one row set per block and head over the full
        // sequence, for the main stack only.
        let seq = layout.seq_len();
        let sites = model.config.n_multi + model.config.n_single;
        assert_eq!(probe.attn_rows.len(), sites * model.config.n_heads * n_text * seq);
    }
}
