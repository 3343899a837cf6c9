//! End-to-end runs of the built binary: exit codes, file outputs, and
//! reproducibility, all inside temporary directories.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowpatch::dataset::sample_edit_task;
use flowpatch::image::{save_png, Image};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowpatch"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

/// The `error` field of the JSON line the binary leaves on stderr.
fn error_kind(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    let v: serde_json::Value = serde_json::from_str(line)
        .unwrap_or_else(|e| panic!("stderr not machine readable ({e}): {text}"));
    v["error"].as_str().unwrap_or_default().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn write(path: impl Into<PathBuf>, text: &str) {
    std::fs::write(path.into(), text).unwrap();
}

#[test]
fn conflicting_region_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "edit",
        "--in",
        &p(dir.path(), "a.png"),
        "--task",
        "add",
        "--mask",
        &p(dir.path(), "m.png"),
        "--hints",
        &p(dir.path(), "h.json"),
        "--ckpt",
        &p(dir.path(), "c.bin"),
        "--out",
        &p(dir.path(), "o.png"),
    ]);
    assert_eq!(code(&out), 2, "{out:?}");
    assert_eq!(error_kind(&out), "bad-flags");

    let out = run(&[
        "edit",
        "--in",
        &p(dir.path(), "a.png"),
        "--task",
        "add",
        "--ckpt",
        &p(dir.path(), "c.bin"),
        "--out",
        &p(dir.path(), "o.png"),
    ]);
    assert_eq!(code(&out), 2, "a region source is required");
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["canny", "--in", &p(dir.path(), "absent.png"), "--out", &p(dir.path(), "e.png")]);
    assert_eq!(code(&out), 3, "{out:?}");
    assert_eq!(error_kind(&out), "io-error");
}

#[test]
fn unknown_config_key_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    write(&cfg, "n_setps = 4\n");
    let mut img = Image::zeros(32, 32, 3);
    for v in img.data_mut() {
        *v = 0.5;
    }
    let src = dir.path().join("src.png");
    save_png(&img, &src).unwrap();
    let out = run(&[
        "canny",
        "--in",
        &src.display().to_string(),
        "--out",
        &p(dir.path(), "e.png"),
        "--config",
        &cfg.display().to_string(),
    ]);
    assert_eq!(code(&out), 4, "{out:?}");
    assert_eq!(error_kind(&out), "invalid-request");
}

#[test]
fn output_over_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.png");
    let mut img = Image::zeros(16, 16, 3);
    for v in img.data_mut() {
        *v = 0.2;
    }
    save_png(&img, &src).unwrap();
    let s = src.display().to_string();
    let out = run(&["canny", "--in", &s, "--out", &s]);
    assert_eq!(code(&out), 2, "{out:?}");
    assert_eq!(error_kind(&out), "bad-flags");
    // The input survives untouched.
    assert!(flowpatch::image::load_png(&src).is_ok());
}

#[test]
fn bad_hints_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.png");
    save_png(&Image::zeros(32, 32, 3), &src).unwrap();
    let hints = dir.path().join("h.json");
    write(&hints, "[]");
    let ckpt = dir.path().join("c.bin");
    write(&ckpt, "placeholder");
    let out = run(&[
        "edit",
        "--in",
        &src.display().to_string(),
        "--task",
        "add",
        "--hints",
        &hints.display().to_string(),
        "--ckpt",
        &ckpt.display().to_string(),
        "--out",
        &p(dir.path(), "o.png"),
    ]);
    assert_eq!(code(&out), 4, "{out:?}");

    write(&hints, r#"[{"subject": "red circle", "point": [1.5, 0.2]}]"#);
    let out = run(&[
        "edit",
        "--in",
        &src.display().to_string(),
        "--task",
        "add",
        "--hints",
        &hints.display().to_string(),
        "--ckpt",
        &ckpt.display().to_string(),
        "--out",
        &p(dir.path(), "o.png"),
    ]);
    assert_eq!(code(&out), 4, "{out:?}");
    assert_eq!(error_kind(&out), "invalid-request");
}

#[test]
fn gradient_audit_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("checks.json");
    let out = run(&["gradcheck", "--seed", "11", "--report", &report.display().to_string()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("full_model"), "{stdout}");
    assert!(stdout.contains("pass"), "{stdout}");
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(rows.as_array().unwrap().len() >= 20);
}

/// Train a small checkpoint, then drive every image command against it.
#[test]
fn pipeline_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let cfg = d.join("run.cfg");
    write(
        &cfg,
        "# smoke settings\n\
         train_steps = 3\n\
         batch_size = 2\n\
         dataset_size = 6\n\
         n_steps = 2\n\
         method = euler\n\
         guidance = 1.0\n\
         refine_bound = 1\n",
    );
    let cfg_s = cfg.display().to_string();

    // Train a checkpoint.
    let ckpt = p(d, "model.bin");
    let train_report = p(d, "train.json");
    let out = run(&[
        "train", "--config", &cfg_s, "--seed", "1", "--out", &ckpt, "--report", &train_report,
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let tr: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&train_report).unwrap()).unwrap();
    assert_eq!(tr["steps"], 3);
    assert_eq!(tr["run_config"]["train_steps"], "3");
    assert!(tr["checkpoint"]["hash"].as_str().unwrap().len() == 16);

    // A seeded add task provides the source image, mask, and prompts.
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let task = sample_edit_task(&mut rng, 32, 4).unwrap();
    let src = p(d, "source.png");
    save_png(&task.source, &src).unwrap();
    let mask_px = task.mask.to_pixels(4);
    let mut mask_img = Image::zeros(32, 32, 3);
    for (i, &on) in mask_px.iter().enumerate() {
        if on {
            for ch in 0..3 {
                mask_img.data_mut()[i * 3 + ch] = 1.0;
            }
        }
    }
    let mask = p(d, "mask.png");
    save_png(&mask_img, &mask).unwrap();

    // Edge detection.
    let out = run(&["canny", "--in", &src, "--out", &p(d, "edges.png")]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("edges.png").exists());

    // Masked edit, twice, to the same bytes.
    let edited = p(d, "edited.png");
    let mut edit_args: Vec<&str> = vec![
        "edit",
        "--in",
        &src,
        "--task",
        "add",
        "--mask",
        &mask,
        "--local-prompt",
        &task.local_prompt,
        "--source-prompt",
        &task.source_prompt,
        "--target-prompt",
        &task.target_prompt,
        "--config",
        &cfg_s,
        "--ckpt",
        &ckpt,
        "--out",
        &edited,
    ];
    let out = run(&edit_args);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report_path = format!("{edited}.report.json");
    let scores_path = format!("{edited}.scores.csv");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["seed"], 0);
    assert_eq!(report["report"]["regions"].as_array().unwrap().len(), 1);
    assert!(report["report"]["scores"]["edge_iou_outside_mask"].is_number());
    let scores = std::fs::read_to_string(&scores_path).unwrap();
    assert!(scores.starts_with("background_mse,psnr,edge_iou_outside_mask"));
    assert_eq!(scores.lines().count(), 2);

    let first = std::fs::read(&edited).unwrap();
    let edited2 = p(d, "edited2.png");
    edit_args[18] = &edited2;
    let out = run(&edit_args);
    assert_eq!(code(&out), 0);
    assert_eq!(first, std::fs::read(&edited2).unwrap(), "same request, same bytes");

    // Two point hints drive a two-region edit in one pass.
    let hints = p(d, "hints.json");
    write(
        &hints,
        r#"[
            {"subject": "red circle", "point": [0.25, 0.25]},
            {"subject": "blue square", "point": [0.78, 0.75]}
        ]"#,
    );
    let hinted = p(d, "hinted.png");
    let out = run(&[
        "edit",
        "--in",
        &src,
        "--task",
        "add",
        "--hints",
        &hints,
        "--source-prompt",
        &task.source_prompt,
        "--target-prompt",
        &task.target_prompt,
        "--config",
        &cfg_s,
        "--ckpt",
        &ckpt,
        "--out",
        &hinted,
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{hinted}.report.json")).unwrap())
            .unwrap();
    let regions = report["report"]["regions"].as_array().unwrap();
    assert_eq!(regions.len(), 2, "one region per hint subject");
    for r in regions {
        assert!(!r["final_patches"].as_array().unwrap().is_empty());
    }
    assert!(report["report"]["refine_interval"].is_number());

    // Round-trip fidelity.
    let recon = p(d, "recon.png");
    let out = run(&[
        "invert",
        "--in",
        &src,
        "--ckpt",
        &ckpt,
        "--target-prompt",
        &task.source_prompt,
        "--config",
        &cfg_s,
        "--out",
        &recon,
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{recon}.report.json")).unwrap())
            .unwrap();
    assert!(report["report"]["mse"].is_number());

    // Ablation table: 3 variants x 2 seeds.
    let cfg2 = d.join("ablate.cfg");
    write(
        &cfg2,
        "n_steps = 2\nmethod = euler\nguidance = 1.0\nablate_seeds = 2\n",
    );
    let table = p(d, "ablate.csv");
    let out = run(&[
        "ablate",
        "--ckpt",
        &ckpt,
        "--config",
        &cfg2.display().to_string(),
        "--seed",
        "3",
        "--out",
        &table,
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7, "header plus 3 variants x 2 seeds: {csv}");
    assert_eq!(lines[0], "variant,seed,background_mse,psnr,edge_iou_outside_mask,region_target_score");
    for name in ["selective", "no_cc", "full_cc"] {
        assert_eq!(lines.iter().filter(|l| l.starts_with(name)).count(), 2);
    }
}
