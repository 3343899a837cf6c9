//! The six subcommands. Each takes its clap argument struct, resolves paths
//! against the run configuration, and maps library errors onto exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use flowpatch::canny::canny_edges;
use flowpatch::dataset::{sample_edit_task, EditTask};
use flowpatch::edit::{edit, reconstruct, ControlSource, EditKind, EditRequest, RegionSpec};
use flowpatch::graph::primitive_checks;
use flowpatch::image::{load_png, save_png};
use flowpatch::masks::pixel_mask_to_patch_mask;
use flowpatch::model::{file_hash, Model, ModelConfig};
use flowpatch::train::{model_gradient_check, train};

use crate::runconfig::RunConfig;
use crate::Failure;

/// What kind of edit the request performs.
#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Add,
    Replace,
    Remove,
}

impl From<TaskArg> for EditKind {
    fn from(t: TaskArg) -> EditKind {
        match t {
            TaskArg::Add => EditKind::Add,
            TaskArg::Replace => EditKind::Replace,
            TaskArg::Remove => EditKind::Remove,
        }
    }
}

#[derive(Debug, Args)]
pub struct CannyArgs {
    /// Source PNG.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Where to write the edge-map PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration (edge_sigma, edge_low, edge_high).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (train_steps, batch_size, lr, clip, dataset_size).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds initialization, the scene pool, and batch noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional JSON training report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    /// Source PNG.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Caption used for inversion and replay.
    #[arg(long = "target-prompt", default_value = "")]
    pub caption: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Echoed into the report; the round trip itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the reconstructed PNG.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fidelity report path (default: <out>.report.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Source PNG.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub task: TaskArg,
    /// Pixel-mask PNG (values above 0.5 mark the editable region).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// JSON list of {subject, point} hints; an alternative to --mask.
    #[arg(long)]
    pub hints: Option<PathBuf>,
    /// Subject of the masked region, e.g. "red circle".
    #[arg(long = "local-prompt")]
    pub local_prompt: Option<String>,
    /// Caption describing the source image.
    #[arg(long = "source-prompt", default_value = "")]
    pub source_prompt: String,
    /// Caption describing the desired result.
    #[arg(long = "target-prompt", default_value = "")]
    pub target_prompt: String,
    /// What a removal should steer away from. Required for --task remove.
    #[arg(long = "negative-prompt")]
    pub negative_prompt: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Echoed into the report; the edit itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the edited PNG.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report path (default: <out>.report.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed; run k of n uses seed + k.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path for the comparison table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional JSON report of every check.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// One point hint as it appears in the hints file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HintEntry {
    subject: String,
    point: [f64; 2],
}

#[derive(Serialize)]
struct CheckpointInfo {
    path: String,
    hash: String,
}

impl CheckpointInfo {
    fn read(path: &Path) -> Result<Self, Failure> {
        Ok(Self {
            path: path.display().to_string(),
            hash: file_hash(path).map_err(Failure::from_lib)?,
        })
    }
}

fn canon(p: &Path) -> PathBuf {
    p.canonicalize().unwrap_or_else(|_| p.to_path_buf())
}

/// Refuse output paths that would overwrite any input.
fn guard_outputs(outputs: &[&Path], inputs: &[Option<&Path>]) -> Result<(), Failure> {
    for out in outputs {
        for input in inputs.iter().flatten() {
            if canon(out) == canon(input) {
                return Err(Failure::BadFlags(format!(
                    "output {} would overwrite input {}",
                    out.display(),
                    input.display()
                )));
            }
        }
    }
    Ok(())
}

fn require(flag: Option<PathBuf>, fallback: Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    flag.or(fallback)
        .ok_or_else(|| Failure::BadFlags(format!("--{name} is required (flag or config key)")))
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    Model::load(path).map_err(Failure::from_lib)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::Invalid(format!("report serialization: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

fn suffixed(out: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", out.display()))
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn canny(a: &CannyArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    guard_outputs(&[&a.out], &[Some(a.input.as_path()), a.config.as_deref()])?;
    let img = load_png(&a.input).map_err(Failure::from_lib)?;
    let edges = canny_edges(&img, cfg.edit.edge_sigma, cfg.edit.edge_low, cfg.edit.edge_high)
        .map_err(Failure::from_lib)?;
    save_png(&edges.to_image(), &a.out).map_err(Failure::from_lib)?;
    println!("{} edge pixels -> {}", edges.count(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainRunReport<'a> {
    seed: u64,
    run_config: &'a BTreeMap<String, String>,
    steps: usize,
    first_loss: f64,
    last_loss: f64,
    /// Mean loss over the final hundred steps (or all of them if fewer).
    final_running_mean: f64,
    checkpoint: CheckpointInfo,
}

pub fn train_cmd(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let out = require(a.out.clone(), cfg.out.clone(), "out")?;
    let report_path = a.report.clone().or(cfg.report.clone());
    let mut outputs: Vec<&Path> = vec![&out];
    if let Some(r) = &report_path {
        outputs.push(r);
    }
    guard_outputs(&outputs, &[a.config.as_deref()])?;

    let mut tcfg = cfg.train.clone();
    tcfg.seed = a.seed;
    let mut model = Model::new(ModelConfig::default(), a.seed).map_err(Failure::from_lib)?;
    let total = tcfg.steps;
    let report = train(&mut model, &tcfg, |step, loss| {
        if (step + 1) % 100 == 0 || step + 1 == total {
            eprintln!("step {}/{} loss {loss:.6}", step + 1, total);
        }
    })
    .map_err(Failure::from_lib)?;
    model.save(&out).map_err(Failure::from_lib)?;

    let losses = &report.losses;
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    if let Some(rp) = &report_path {
        write_json(
            rp,
            &TrainRunReport {
                seed: a.seed,
                run_config: &cfg.entries,
                steps: losses.len(),
                first_loss: losses.first().copied().unwrap_or(f64::NAN),
                last_loss: losses.last().copied().unwrap_or(f64::NAN),
                final_running_mean: final_mean,
                checkpoint: CheckpointInfo::read(&out)?,
            },
        )?;
    }
    println!(
        "trained {} steps, final mean loss {final_mean:.6}, checkpoint {}",
        losses.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct InvertRunReport<'a, R: Serialize> {
    seed: u64,
    checkpoint: CheckpointInfo,
    run_config: &'a BTreeMap<String, String>,
    caption: &'a str,
    report: R,
}

pub fn invert(a: &InvertArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let ckpt = require(a.ckpt.clone(), cfg.ckpt.clone(), "ckpt")?;
    let out = require(a.out.clone(), cfg.out.clone(), "out")?;
    let report_path = a
        .report
        .clone()
        .or(cfg.report.clone())
        .unwrap_or_else(|| suffixed(&out, ".report.json"));
    guard_outputs(
        &[&out, &report_path],
        &[Some(a.input.as_path()), a.config.as_deref(), Some(ckpt.as_path())],
    )?;

    let model = load_model(&ckpt)?;
    let source = load_png(&a.input).map_err(Failure::from_lib)?;
    let (image, rep) = reconstruct(&model, &source, &a.caption, &cfg.edit).map_err(Failure::from_lib)?;
    save_png(&image, &out).map_err(Failure::from_lib)?;
    write_json(
        &report_path,
        &InvertRunReport {
            seed: a.seed,
            checkpoint: CheckpointInfo::read(&ckpt)?,
            run_config: &cfg.entries,
            caption: &a.caption,
            report: &rep,
        },
    )?;
    println!(
        "round trip mse {:.6e} psnr {:.2} dB ({} + {} evals) -> {}",
        rep.mse,
        rep.psnr,
        rep.nfe_invert,
        rep.nfe_denoise,
        out.display()
    );
    Ok(())
}

fn parse_hints(path: &Path) -> Result<Vec<RegionSpec>, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let entries: Vec<HintEntry> = serde_json::from_str(&text)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    if entries.is_empty() {
        return Err(Failure::Invalid(format!("{}: no hints", path.display())));
    }
    entries
        .into_iter()
        .map(|h| {
            let [x, y] = h.point;
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Failure::Invalid(format!(
                    "hint point ({x}, {y}) outside the unit square"
                )));
            }
            Ok(RegionSpec::Point { point: (x, y), prompt: h.subject })
        })
        .collect()
}

#[derive(Serialize)]
struct EditRunReport<'a, R: Serialize> {
    seed: u64,
    checkpoint: CheckpointInfo,
    run_config: &'a BTreeMap<String, String>,
    report: R,
}

pub fn edit_cmd(a: &EditArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let ckpt = require(a.ckpt.clone(), cfg.ckpt.clone(), "ckpt")?;
    let out = require(a.out.clone(), cfg.out.clone(), "out")?;
    let report_path = a
        .report
        .clone()
        .or(cfg.report.clone())
        .unwrap_or_else(|| suffixed(&out, ".report.json"));
    let scores_path = suffixed(&out, ".scores.csv");

    // Flag-level checks come before any file is opened, so the exit code
    // names the actual mistake.
    enum RegionInput {
        Mask(PathBuf),
        Ready(Vec<RegionSpec>),
    }
    let region_input = match (&a.mask, &a.hints) {
        (Some(_), Some(_)) => {
            return Err(Failure::BadFlags("--mask and --hints are mutually exclusive".into()))
        }
        (None, None) => return Err(Failure::BadFlags("an edit needs --mask or --hints".into())),
        (Some(mask_path), None) => RegionInput::Mask(mask_path.clone()),
        (None, Some(hints_path)) => {
            if a.local_prompt.is_some() {
                return Err(Failure::BadFlags(
                    "--local-prompt conflicts with --hints; hint subjects name the regions".into(),
                ));
            }
            RegionInput::Ready(parse_hints(hints_path)?)
        }
    };
    guard_outputs(
        &[&out, &report_path, &scores_path],
        &[
            Some(a.input.as_path()),
            a.mask.as_deref(),
            a.hints.as_deref(),
            a.config.as_deref(),
            Some(ckpt.as_path()),
        ],
    )?;

    let model = load_model(&ckpt)?;
    let source = load_png(&a.input).map_err(Failure::from_lib)?;

    let regions = match region_input {
        RegionInput::Ready(regions) => regions,
        RegionInput::Mask(mask_path) => {
            let mask_img = load_png(&mask_path).map_err(Failure::from_lib)?;
            let mask = pixel_mask_to_patch_mask(&mask_img, model.config.patch)
                .map_err(Failure::from_lib)?;
            vec![RegionSpec::Mask { mask, prompt: a.local_prompt.clone().unwrap_or_default() }]
        }
    };

    let request = EditRequest {
        kind: a.task.into(),
        source,
        source_prompt: a.source_prompt.clone(),
        target_prompt: a.target_prompt.clone(),
        negative_prompt: a.negative_prompt.clone(),
        regions,
    };
    let (image, report) = edit(&model, &request, &cfg.edit).map_err(Failure::from_lib)?;
    save_png(&image, &out).map_err(Failure::from_lib)?;
    write_json(
        &report_path,
        &EditRunReport {
            seed: a.seed,
            checkpoint: CheckpointInfo::read(&ckpt)?,
            run_config: &cfg.entries,
            report: &report,
        },
    )?;

    let s = &report.scores;
    let mut csv = String::from("background_mse,psnr,edge_iou_outside_mask,region_target_score,mask_iou\n");
    csv.push_str(&format!(
        "{},{},{},{},{}\n",
        csv_field(s.background_mse),
        csv_field(s.psnr),
        s.edge_iou_outside_mask,
        csv_field(s.region_target_score),
        csv_field(s.mask_iou),
    ));
    write_text(&scores_path, &csv)?;

    println!(
        "{} region(s) edited, {} model evals -> {}",
        report.regions.len(),
        report.nfe_invert + report.nfe_denoise + report.nfe_probe,
        out.display()
    );
    Ok(())
}

/// The control variants the ablation table compares.
const VARIANTS: [(&str, ControlSource); 3] = [
    ("selective", ControlSource::CachedSelective),
    ("no_cc", ControlSource::Off),
    ("full_cc", ControlSource::CachedEverywhere),
];

pub fn ablate(a: &AblateArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let ckpt = require(a.ckpt.clone(), cfg.ckpt.clone(), "ckpt")?;
    let out = require(a.out.clone(), cfg.out.clone(), "out")?;
    guard_outputs(&[&out], &[a.config.as_deref(), Some(ckpt.as_path())])?;

    let model = load_model(&ckpt)?;
    let mc = &model.config;

    // Sample one task per seed so every variant edits the same image.
    let tasks: Vec<(u64, EditTask)> = (0..cfg.ablate_seeds as u64)
        .map(|k| {
            let seed = a.seed + k;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            sample_edit_task(&mut rng, mc.image_size, mc.patch)
                .map(|t| (seed, t))
                .map_err(Failure::from_lib)
        })
        .collect::<Result<_, _>>()?;

    let mut csv = String::from("variant,seed,background_mse,psnr,edge_iou_outside_mask,region_target_score\n");
    let mut sums: BTreeMap<&str, (f64, f64, f64, usize)> = BTreeMap::new();
    for (name, control) in VARIANTS {
        for (seed, task) in &tasks {
            let mut ecfg = cfg.edit.clone();
            ecfg.control = control;
            let request = EditRequest {
                kind: EditKind::Add,
                source: task.source.clone(),
                source_prompt: task.source_prompt.clone(),
                target_prompt: task.target_prompt.clone(),
                negative_prompt: None,
                regions: vec![RegionSpec::Mask {
                    mask: task.mask.clone(),
                    prompt: task.local_prompt.clone(),
                }],
            };
            let (_, report) = edit(&model, &request, &ecfg).map_err(Failure::from_lib)?;
            let s = &report.scores;
            csv.push_str(&format!(
                "{name},{seed},{},{},{},{}\n",
                csv_field(s.background_mse),
                csv_field(s.psnr),
                s.edge_iou_outside_mask,
                csv_field(s.region_target_score),
            ));
            let e = sums.entry(name).or_default();
            e.0 += s.background_mse.unwrap_or(f64::NAN);
            e.1 += s.edge_iou_outside_mask;
            e.2 += s.region_target_score.unwrap_or(f64::NAN);
            e.3 += 1;
            eprintln!("{name} seed {seed} done");
        }
    }
    write_text(&out, &csv)?;

    println!("variant      background_mse  edge_iou  target_score");
    for (name, _) in VARIANTS {
        let (mse, iou, ts, n) = sums[name];
        let n = n as f64;
        println!("{name:<12} {:<15.6} {:<9.4} {:.4}", mse / n, iou / n, ts / n);
    }
    println!("{} rows -> {}", VARIANTS.len() * tasks.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct CheckRow {
    name: String,
    rel_err: f64,
    tol: f64,
    passed: bool,
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let mut checks = primitive_checks(a.seed).map_err(Failure::from_lib)?;
    checks.push(model_gradient_check(a.seed, 2).map_err(Failure::from_lib)?);

    let mut rows = Vec::with_capacity(checks.len());
    let mut failed = 0usize;
    for c in &checks {
        let ok = c.passed();
        if !ok {
            failed += 1;
        }
        println!(
            "{:<26} rel {:>12.3e}  tol {:>8.1e}  {}",
            c.name,
            c.rel_err,
            c.tol,
            if ok { "pass" } else { "FAIL" }
        );
        rows.push(CheckRow { name: c.name.clone(), rel_err: c.rel_err, tol: c.tol, passed: ok });
    }
    if let Some(rp) = &a.report {
        write_json(rp, &rows)?;
    }
    if failed > 0 {
        return Err(Failure::Checks(format!(
            "{failed} of {} gradient checks failed",
            checks.len()
        )));
    }
    println!("all {} gradient checks passed", checks.len());
    Ok(())
}
