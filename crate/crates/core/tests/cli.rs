use std::path::Path;

use clap::Parser;
use efficientface::cli::{run, Cli, Command, SETTINGS_FILE};
use efficientface::config::Settings;
use efficientface::detector::{load_checkpoint, Detector, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE};
use efficientface::eval::profile;
use efficientface::sbifpn::NeckKind;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("efficientface").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn fixture_evaluation_succeeds() {
    assert_eq!(cli(&["eval", "--fixtures"]), 0);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(cli(&["frobnicate"]), 2);
    assert_eq!(cli(&["profile", "--input", "many"]), 2);
    assert_eq!(cli(&["eval", "--fixtures", "--checkpoint", "x.ckpt"]), 2);
}

#[test]
fn run_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(
        cli(&["profile", "--preset", "tiny", "--neck", "mesh", "--input", "128"]),
        1
    );
    assert_eq!(
        cli(&["profile", "--preset", "tiny", "--attn-depth", "-1", "--input", "128"]),
        1
    );
    assert_eq!(
        cli(&["profile", "--preset", "tiny", "--attn-depth", "6", "--input", "128"]),
        1
    );
    assert_eq!(cli(&["profile", "--preset", "huge"]), 1);
    assert_eq!(
        cli(&[
            "detect",
            "--checkpoint",
            p(&dir.path().join("missing.ckpt")),
            "--dataset",
            "synth2",
            "--out",
            p(&out)
        ]),
        1
    );
    assert_eq!(cli(&["eval", "--dataset", "synth2"]), 1);
}

#[test]
fn ablation_flags_reach_the_settings() {
    let parsed = Cli::try_parse_from([
        "efficientface",
        "profile",
        "--preset",
        "tiny",
        "--neck",
        "bifpn",
        "--no-rfe",
        "--no-attn",
        "--seed",
        "4",
        "--set",
        "head.depth=2",
    ])
    .unwrap();
    let Command::Profile(a) = parsed.command else {
        panic!("wrong subcommand")
    };
    let s = a.model.settings().unwrap();
    assert_eq!(s.model.neck, NeckKind::BiFpn);
    assert!(!s.model.rfe);
    assert_eq!(s.model.attn_depth, 0);
    assert_eq!(s.seed, 4);
    assert_eq!(s.model.head_depth, 2);
}

#[test]
fn config_file_sits_between_preset_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "model.attn_depth=4\nseed=11\n").unwrap();
    let parsed = Cli::try_parse_from([
        "efficientface",
        "profile",
        "--preset",
        "tiny",
        "--config",
        p(&cfg),
        "--seed",
        "3",
    ])
    .unwrap();
    let Command::Profile(a) = parsed.command else {
        panic!("wrong subcommand")
    };
    let s = a.model.settings().unwrap();
    assert_eq!(s.model.attn_depth, 4);
    assert_eq!(s.seed, 3);
}

#[test]
fn profile_output_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("prof");
    assert_eq!(
        cli(&["profile", "--preset", "tiny", "--input", "256", "--out", p(&out)]),
        0
    );
    let settings = Settings::load(&out.join(SETTINGS_FILE)).unwrap();
    assert_eq!(settings, Settings::preset("tiny").unwrap());
    let report = profile(&Detector::build(&settings.model, 0).unwrap(), 256, 256).unwrap();
    assert_eq!(
        std::fs::read_to_string(out.join("profile.csv")).unwrap(),
        report.to_csv().unwrap()
    );
    assert_eq!(
        std::fs::read_to_string(out.join("profile.txt")).unwrap(),
        report.table()
    );
}

#[test]
fn stats_writes_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("stats");
    assert_eq!(
        cli(&["stats", "--dataset", "synth5", "--size", "128", "--out", p(&out)]),
        0
    );
    let csv = std::fs::read_to_string(out.join("aspect_ratios.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
    assert!(std::fs::read_to_string(out.join("aspect_ratios.svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn train_detect_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    let code = cli(&[
        "train",
        "--preset",
        "tiny",
        "--dataset",
        "synth4",
        "--epochs",
        "1",
        "--max-steps",
        "1",
        "--out",
        p(&train),
    ]);
    assert_eq!(code, 0);
    for f in [SETTINGS_FILE, METRICS_FILE, LAST_CHECKPOINT, BEST_CHECKPOINT] {
        assert!(train.join(f).exists(), "{f}");
    }
    let (settings, _, progress) = load_checkpoint(&train.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(settings, Settings::load(&train.join(SETTINGS_FILE)).unwrap());
    assert_eq!(progress.step, 1);

    let det = dir.path().join("det");
    let ckpt = train.join(LAST_CHECKPOINT);
    let code = cli(&[
        "detect",
        "--checkpoint",
        p(&ckpt),
        "--dataset",
        "synth4",
        "--out",
        p(&det),
        "--draw",
        "--score-thr",
        "0.3",
    ]);
    assert_eq!(code, 0);
    let txt = std::fs::read_dir(&det)
        .unwrap()
        .filter(|e| {
            let path = e.as_ref().unwrap().path();
            path.extension().is_some_and(|x| x == "txt") && path.file_name().unwrap() != SETTINGS_FILE
        })
        .count();
    assert_eq!(txt, 4);
    assert_eq!(std::fs::read_dir(det.join("annotated")).unwrap().count(), 4);

    let ev = dir.path().join("eval");
    assert_eq!(
        cli(&["eval", "--detections", p(&det), "--dataset", "synth4", "--out", p(&ev)]),
        0
    );
    assert!(ev.join("pr_all.csv").exists() && ev.join("pr.svg").exists());
    assert_eq!(cli(&["eval", "--checkpoint", p(&ckpt), "--dataset", "synth4"]), 0);
}
