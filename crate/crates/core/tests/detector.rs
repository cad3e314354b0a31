mod common;

use common::scenarios::{overfit_run, overfit_settings};
use ef_tensor::{init, Tensor};
use efficientface::anchors::generate_anchors;
use efficientface::boxes::BBox;
use efficientface::config::{DetectorConfig, Settings};
use efficientface::data::{Dataset, SynthSpec};
use efficientface::detector::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, optimizer_for, save_checkpoint, train_step, Detector,
    PlateauSchedule, Progress, Trainer, LAST_CHECKPOINT, METRICS_FILE,
};
use efficientface::eval::profile;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> DetectorConfig {
    DetectorConfig::tiny()
}

fn image(n: usize, size: usize, seed: u64) -> Tensor {
    init::uniform([n, 3, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn tiny_build_matches_profiler_count() {
    let d = Detector::build(&tiny(), 0).unwrap();
    let report = profile(&d, 128, 128).unwrap();
    assert_eq!(report.total_params, d.num_params() as u64);
    assert!(report.uncounted.is_empty(), "{:?}", report.uncounted);
}

#[test]
fn plain_neck_configuration_has_no_enhancement() {
    let cfg = DetectorConfig {
        rfe: false,
        attn_depth: 0,
        ..tiny()
    };
    let d = Detector::build(&cfg, 0).unwrap();
    assert!(d.params.iter().all(|(_, name, _)| !name.starts_with("enhance.")));
    let full = Detector::build(&tiny(), 0).unwrap();
    assert!(full.num_params() > d.num_params());
}

#[test]
fn same_seed_same_parameters() {
    let a = Detector::build(&tiny(), 42).unwrap();
    let b = Detector::build(&tiny(), 42).unwrap();
    let c = Detector::build(&tiny(), 43).unwrap();
    let flat = |d: &Detector| {
        d.params
            .iter()
            .flat_map(|(_, _, t)| t.data().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn head_is_shared_across_levels() {
    let d = Detector::build(&tiny(), 0).unwrap();
    let head: Vec<&str> = d
        .params
        .iter()
        .map(|(_, n, _)| n)
        .filter(|n| n.starts_with("head."))
        .collect();
    assert!(head.iter().all(|n| !n.contains(".p")), "{head:?}");
    let head_scalars: usize = d
        .params
        .iter()
        .filter(|(_, n, _)| n.starts_with("head."))
        .map(|(_, _, t)| t.numel())
        .sum();
    let report = profile(&d, 256, 256).unwrap();
    assert_eq!(report.section("head").unwrap().params, head_scalars as u64);
    let head_convs = report
        .layers
        .iter()
        .filter(|l| l.scope.starts_with("head.") && l.kind == "conv")
        .count();
    assert_eq!(head_convs, 6 * 2 * (tiny().head_depth + 1));
}

#[test]
fn output_cells_follow_the_anchor_grid() {
    let d = Detector::build(&tiny(), 0).unwrap();
    let out = d.predict(&image(1, 256, 1)).unwrap();
    let cells: Vec<usize> = out.iter().map(|o| o.cls.h() * o.cls.w()).collect();
    assert_eq!(cells, vec![4096, 1024, 256, 64, 16, 4]);
    let anchors = generate_anchors(256, 256, &tiny().anchors).unwrap();
    for o in &out {
        assert_eq!(o.cls.h() * o.cls.w(), anchors.level(o.level).unwrap().len());
        assert_eq!(o.reg.c(), 4);
        assert!(o.cls.all_finite() && o.reg.all_finite());
    }
    let big = d.predict(&image(1, 512, 2)).unwrap();
    for (a, b) in out.iter().zip(&big) {
        assert_eq!(b.cls.h() * b.cls.w(), 4 * a.cls.h() * a.cls.w());
    }
}

#[test]
fn detection_is_capped_and_repeatable() {
    let mut cfg = tiny();
    cfg.infer.score_thr = 0.0;
    cfg.infer.max_det = 37;
    let d = Detector::build(&cfg, 0).unwrap();
    let x = image(2, 128, 3);
    let a = d.detect(&x).unwrap();
    let b = d.detect(&x).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|det| det.len() <= 37));
    assert_eq!(a[0].len(), 37);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut d = Detector::build(&tiny(), 0).unwrap();
    let before = d.params.clone();
    let mut opt = optimizer_for(&d, &Settings::preset("tiny").unwrap().train);
    let gt = vec![vec![BBox::new(30.0, 30.0, 70.0, 80.0).unwrap()]];
    train_step(&mut d, &mut opt, &image(1, 128, 4), &gt, 0.0).unwrap();
    for ((_, _, a), (_, _, b)) in before.iter().zip(d.params.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn constant_loss_drops_lr_once_per_patience_window() {
    let mut s = PlateauSchedule::new(1e-4, 3, 0.1, 1e-8, 1e-3);
    let lrs: Vec<f64> = (0..4).map(|_| s.step(2.5)).collect();
    assert_eq!(lrs, vec![1e-4, 1e-4, 1e-4, 1e-4 * 0.1]);
    let lrs: Vec<f64> = (0..3).map(|_| s.step(2.5)).collect();
    assert_eq!(lrs[..2], [1e-5, 1e-5]);
    assert!((lrs[2] - 1e-6).abs() < 1e-20);
}

#[test]
fn lr_floor_is_sticky() {
    let mut s = PlateauSchedule::new(1e-4, 3, 0.1, 1e-8, 1e-3);
    let mut last = s.lr();
    for _ in 0..100 {
        last = s.step(1.0);
    }
    assert_eq!(last, 1e-8);
    assert_eq!(s.step(1.0), 1e-8);
}

proptest! {
    #[test]
    fn lr_is_non_increasing_and_bounded(losses in prop::collection::vec(0.0..10.0f64, 1..80)) {
        let mut s = PlateauSchedule::new(1e-4, 3, 0.1, 1e-8, 1e-3);
        let mut prev = s.lr();
        for l in losses {
            let lr = s.step(l);
            prop_assert!(lr <= prev);
            prop_assert!((1e-8..=1e-4).contains(&lr));
            prev = lr;
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let settings = Settings::preset("tiny").unwrap();
    let mut d = Detector::build(&settings.model, 5).unwrap();
    let mut opt = optimizer_for(&d, &settings.train);
    let gt = vec![vec![BBox::new(10.0, 12.0, 50.0, 60.0).unwrap()]];
    train_step(&mut d, &mut opt, &image(1, 128, 6), &gt, 1e-3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let progress = Progress {
        epoch: 3,
        step: 17,
        lr: 1e-5,
    };
    save_checkpoint(&path, &settings, &d, progress).unwrap();
    let (s2, d2, p2) = load_checkpoint(&path).unwrap();
    assert_eq!(s2, settings);
    assert_eq!(p2, progress);
    for ((_, na, a), (_, nb, b)) in d.params.iter().zip(d2.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.data(), b.data());
    }
    let x = image(1, 128, 7);
    assert_eq!(d.predict(&x).unwrap(), d2.predict(&x).unwrap());

    let mut bytes = encode_checkpoint(&settings, &d, progress);
    bytes[0] ^= 1;
    assert!(decode_checkpoint(&bytes).is_err());
    let bytes = encode_checkpoint(&settings, &d, progress);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}

fn run_fit(dir: &std::path::Path) -> Vec<u8> {
    let mut settings = Settings::preset("tiny").unwrap();
    settings.seed = 9;
    settings.train.epochs = 2;
    settings.train.max_steps = Some(6);
    let data = Dataset::synthetic(8, 128, settings.seed).unwrap();
    let mut d = Detector::build(&settings.model, settings.seed).unwrap();
    let mut t = Trainer::new(&d, &settings).unwrap();
    t.fit(&mut d, &data, Some(dir)).unwrap();
    std::fs::read(dir.join(METRICS_FILE)).unwrap()
}

#[test]
fn fixed_seed_reproduces_metrics_log() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let la = run_fit(a.path());
    let lb = run_fit(b.path());
    assert_eq!(la, lb);
    let text = String::from_utf8(la).unwrap();
    assert!(text.starts_with("epoch,cls_loss,reg_loss,total,lr\n"));
    assert_eq!(text.lines().count(), 3);
    let (_, resumed, p) = load_checkpoint(&a.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(p.step, 4);
    let (_, other, _) = load_checkpoint(&b.path().join(LAST_CHECKPOINT)).unwrap();
    let x = image(1, 128, 8);
    assert_eq!(resumed.predict(&x).unwrap(), other.predict(&x).unwrap());
}

#[test]
fn overfit_single_image_recovers_its_faces() {
    let spec = SynthSpec {
        faces: (2, 2),
        scale: (24.0, 40.0),
        seed: 21,
        ..SynthSpec::default()
    };
    let data = Dataset::synthetic_with(1, &spec, 21).unwrap();
    let gt = data.samples[0].gt.clone();
    assert_eq!(gt.len(), 2);
    let mut settings = overfit_settings();
    settings.train.batch_size = 1;
    let mut d = Detector::build(&settings.model, settings.seed).unwrap();
    let mut t = Trainer::new(&d, &settings).unwrap();
    let recovered = |d: &Detector| {
        let det = d.detect(&data.samples[0].image).unwrap().remove(0);
        gt.iter()
            .all(|g| det.boxes.iter().take(gt.len()).any(|b| b.iou(g) >= 0.75))
    };
    let mut ok = false;
    while t.steps() < 400 && !ok {
        for _ in 0..20 {
            t.fit(&mut d, &data, None).unwrap();
        }
        ok = recovered(&d);
    }
    assert!(ok, "faces not recovered after {} steps", t.steps());
}

#[test]
fn five_hundred_steps_lower_the_loss() {
    let data = Dataset::synthetic(20, 128, 1).unwrap();
    let run = overfit_run(&data, 500, 500, None);
    assert_eq!(run.steps, 500);
    let first = run.step_losses[0];
    let last = *run.step_losses.last().unwrap();
    assert!(last < first, "loss {first} -> {last}");
}
