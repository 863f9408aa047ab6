use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mvlle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvlle"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_MODEL: [&str; 12] = [
    "--set",
    "model.channels=4",
    "--set",
    "model.units=2",
    "--set",
    "model.k=2",
    "--set",
    "model.radius=1",
    "--set",
    "model.se_reduction=2",
    "--set",
    "model.encoder_depth=1",
];

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_owned();

    let out = mvlle(&[
        "synth",
        "--procedural",
        "3",
        "--held-out",
        "1",
        "--out",
        &p("data"),
        "--set",
        "synth.procedural_side=32",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("data/train.jsonl").exists());
    assert!(dir.path().join("data/test.jsonl").exists());
    assert!(dir.path().join("data/resolved_config.jsonl").exists());

    let (train_manifest, test_manifest, run_dir) =
        (p("data/train.jsonl"), p("data/test.jsonl"), p("run"));
    let mut args = vec![
        "train",
        "--manifest",
        &train_manifest,
        "--held-out",
        &test_manifest,
        "--out",
        &run_dir,
    ];
    args.extend([
        "--iters",
        "2",
        "--set",
        "train.crop=24",
        "--set",
        "train.checkpoint_every=1",
    ]);
    args.extend(SMALL_MODEL);
    let out = mvlle(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert!(dir.path().join("run/checkpoint_000001.rctn").exists());
    let checkpoint = p("run/checkpoint_000002.rctn");

    // resuming extends the same log
    let out = mvlle(&[
        "train",
        "--manifest",
        &p("data/train.jsonl"),
        "--out",
        &run_dir,
        "--resume",
        &checkpoint,
        "--iters",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "{metrics}");
    assert!(metrics.lines().last().unwrap().starts_with("3,"));

    let views = [
        p("data/low/proc0000_0.png"),
        p("data/low/proc0000_1.png"),
        p("data/low/proc0000_2.png"),
    ];
    let out = mvlle(&[
        "enhance",
        "--checkpoint",
        &checkpoint,
        "--views",
        &views[0],
        &views[1],
        &views[2],
        "--out",
        &p("enhanced/out.png"),
        "--dump-stages",
        &p("stages"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let enhanced = mvlle::image_io::load_image(dir.path().join("enhanced/out.png")).unwrap();
    let input = mvlle::image_io::load_image(&views[1]).unwrap();
    assert_eq!(enhanced.dims(), input.dims());
    assert!(dir.path().join("stages/stage_1.png").exists());
    assert!(dir.path().join("stages/stage_2.png").exists());
    assert!(dir.path().join("enhanced/out.config.jsonl").exists());

    let out = mvlle(&[
        "eval",
        "--enhanced",
        &p("enhanced/out.png"),
        "--reference",
        &p("data/gt/proc0000_1.png"),
        "--out",
        &p("eval/report.json"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.path().join("eval/report.json"));
    assert!(report["psnr"].as_f64().unwrap() > 0.0);
    assert!(report["ssim"].is_number());
    assert!(report["loe"].is_number());
    assert!(report["ab"].is_null());
    assert_eq!(report["pairs"], 1);

    // sequence and identical-pair jobs from a job file
    std::fs::write(
        dir.path().join("jobs.jsonl"),
        "{\"sequence\": [\"data/low/proc0000_0.png\", \"data/low/proc0000_1.png\"]}\n\
         {\"enhanced\": \"data/gt/proc0000_1.png\", \"reference\": \"data/gt/proc0000_1.png\"}\n",
    )
    .unwrap();
    let out = mvlle(&[
        "eval",
        "--jobs",
        &p("jobs.jsonl"),
        "--metrics",
        "psnr,ab,mabd",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["psnr"], "inf");
    assert!(report["ab"].as_f64().unwrap() >= 0.0);
    assert!(report["ssim"].is_null());
    assert_eq!(report["sequences"], 1);

    for (checkpoint_args, unit) in [
        (vec![], None),
        (
            vec!["--checkpoint", checkpoint.as_str(), "--unit", "2"],
            Some(2),
        ),
    ] {
        let align_dir = p(if unit.is_some() {
            "align_net"
        } else {
            "align_rgb"
        });
        let mut args = vec![
            "align-inspect",
            "--views",
            &views[0],
            &views[1],
            &views[2],
            "--out",
            &align_dir,
        ];
        args.extend(checkpoint_args);
        let out = mvlle(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let report = read_json(&Path::new(&align_dir).join("alignment.json"));
        assert_eq!(report["views"].as_array().unwrap().len(), 3);
        assert_eq!(report["unit"], serde_json::json!(unit));
        let (rows, cols) = (
            report["rows"].as_u64().unwrap(),
            report["cols"].as_u64().unwrap(),
        );
        let first = &report["views"][0]["matches"];
        assert_eq!(first.as_array().unwrap().len() as u64, rows * cols);
        let png = mvlle::image_io::load_image(Path::new(&align_dir).join("alignment.png")).unwrap();
        assert_eq!(png.dims(), (2 * input.height(), 3 * input.width()));
    }
}

#[test]
fn gradcheck_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.json");
    let out = mvlle(&["gradcheck", "--out", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let json = read_json(&report);
    assert!(json["max_rel_error"].as_f64().unwrap() <= 1e-4);
    assert!(json["checks"].as_array().unwrap().len() > 10);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = mvlle(&["frobnicate"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvlle(&[
        "synth",
        "--procedural",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "synth.no_such_key=3",
    ]);
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("synth.no_such_key"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.png");
    let m = missing.to_str().unwrap();
    let out = mvlle(&["eval", "--enhanced", m, "--reference", m]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));
}

#[test]
fn malformed_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("train.jsonl");
    std::fs::write(&manifest, "not json\n").unwrap();
    let out = mvlle(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}
