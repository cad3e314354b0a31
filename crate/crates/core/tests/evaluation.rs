mod common;

use common::{oracle_ap, random_ibox};
use ef_tensor::nn::{Conv2d, Conv2dSpec};
use ef_tensor::{ParamStore, Tape};
use efficientface::backbone::{BackboneConfig, BACKBONE_TAGS};
use efficientface::boxes::{BBox, BoxList};
use efficientface::config::DetectorConfig;
use efficientface::detector::Detector;
use efficientface::eval::fixtures::ap_fixtures;
use efficientface::eval::{aspect_ratio_histogram, average_precision, default_ratio_edges, filter_subset, profile};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(seed: u64, images: usize, max_gt: usize, max_det: usize) -> (Vec<BoxList>, Vec<Vec<BBox>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for _ in 0..images {
        let g: Vec<BBox> = (0..rng.random_range(0..=max_gt))
            .map(|_| random_ibox(&mut rng, 64, 4, 24).to_bbox())
            .collect();
        let mut boxes = Vec::new();
        for _ in 0..rng.random_range(0..=max_det) {
            // half the detections are jittered copies of a face
            if !g.is_empty() && rng.random_bool(0.5) {
                let t = g[rng.random_range(0..g.len())];
                let dx = rng.random_range(-4i64..=4) as f64;
                let dy = rng.random_range(-4i64..=4) as f64;
                boxes.push(BBox::new(t.x1 + dx, t.y1 + dy, t.x2 + dx, t.y2 + dy).unwrap());
            } else {
                boxes.push(random_ibox(&mut rng, 64, 4, 24).to_bbox());
            }
        }
        let scores = boxes.iter().map(|_| rng.random_range(0..20) as f64 / 20.0).collect();
        dets.push(BoxList::with_scores(boxes, scores).unwrap());
        gts.push(g);
    }
    (dets, gts)
}

#[test]
fn ap_agrees_with_prefix_rematching_oracle() {
    for seed in 0..50 {
        let (dets, gts) = random_instance(seed, 3, 4, 8);
        let got = average_precision(&dets, &gts, 0.5).unwrap().ap;
        let want = oracle_ap(&dets, &gts, 0.5);
        assert!((got - want).abs() <= 1e-9, "seed {seed}: {got} vs {want}");
    }
    let (dets, gts) = random_instance(99, 20, 6, 10);
    assert!(dets.iter().map(BoxList::len).sum::<usize>() >= 60);
    for thr in [0.3, 0.5, 0.7] {
        let got = average_precision(&dets, &gts, thr).unwrap().ap;
        assert!((got - oracle_ap(&dets, &gts, thr)).abs() <= 1e-9);
    }
}

#[test]
fn ap_fixture_values() {
    let fx = ap_fixtures();
    let ap = |i: usize| average_precision(&fx[i].dets, &fx[i].gts, 0.5).unwrap().ap;
    assert_eq!(ap(0), 1.0);
    assert_eq!(ap(1), 0.5);
    let mixed = oracle_ap(&fx[2].dets, &fx[2].gts, 0.5);
    assert!((ap(2) - mixed).abs() <= 1e-12, "{} vs {mixed}", ap(2));
}

#[test]
fn pr_curve_is_monotone_in_recall() {
    let (dets, gts) = random_instance(5, 10, 5, 10);
    let r = average_precision(&dets, &gts, 0.5).unwrap();
    assert_eq!(r.curve.points.len(), r.num_det);
    assert!(r.curve.points.windows(2).all(|w| w[0].0 <= w[1].0));
    let env = r.curve.envelope();
    assert!(env.windows(2).all(|w| w[0].1 >= w[1].1));
    assert!(r.curve.to_csv().unwrap().lines().count() == r.num_det + 1);
}

#[test]
fn subset_filter_keeps_named_images() {
    let names = ["a", "b", "c"];
    assert_eq!(filter_subset(&names, &[1, 2, 3], &["c", "a"]), vec![1, 3]);
    assert!(filter_subset(&names, &[1, 2, 3], &["z"]).is_empty());
}

#[test]
fn aspect_histogram_bins() {
    let squares: Vec<BBox> = (1..=20)
        .map(|s| BBox::from_xywh(0.0, 0.0, s as f64, s as f64).unwrap())
        .collect();
    let h = aspect_ratio_histogram(&squares, &default_ratio_edges()).unwrap();
    assert_eq!(h.counts[4], 20);
    assert_eq!(h.total(), 20);
    let pair = [
        BBox::from_xywh(0.0, 0.0, 30.0, 10.0).unwrap(),
        BBox::from_xywh(0.0, 0.0, 10.0, 30.0).unwrap(),
    ];
    let h = aspect_ratio_histogram(&pair, &default_ratio_edges()).unwrap();
    assert_eq!(h.counts[12], 1);
    assert_eq!(h.counts[1], 1);
    let wide = [BBox::from_xywh(0.0, 0.0, 50.0, 10.0).unwrap()];
    assert_eq!(aspect_ratio_histogram(&wide, &default_ratio_edges()).unwrap().above, 1);
    assert!(aspect_ratio_histogram(&wide, &[1.0, 1.0]).is_err());
}

fn single_conv_report(cin: usize, cout: usize, k: usize, size: usize) -> (u64, u64) {
    let mut store = ParamStore::new();
    let conv = Conv2d::build(
        &mut store,
        "c",
        Conv2dSpec::new(cin, cout, k),
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    let mut tape = Tape::dry(&store);
    let x = tape.input_shape([1, cin, size, size]);
    tape.scoped("layer", |t| conv.forward(t, x));
    let recs = tape.records();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].scope, "layer");
    (recs[0].macs, recs[0].params)
}

#[test]
fn conv_cost_by_hand() {
    // 3*3*2*4 weights + 4 biases; each of the 8*8*4 outputs takes 18 MACs
    assert_eq!(single_conv_report(2, 4, 3, 8), (4608, 76));
    // 1*1*8*8 per pixel over 4*4 pixels
    assert_eq!(single_conv_report(8, 8, 1, 4), (1024, 72));
}

#[test]
fn profile_is_a_pure_function_of_shape() {
    let d = Detector::build(&DetectorConfig::tiny(), 0).unwrap();
    let a = profile(&d, 256, 256).unwrap();
    let b = profile(&Detector::build(&DetectorConfig::tiny(), 1).unwrap(), 256, 256).unwrap();
    assert_eq!(a, b);
    let big = profile(&d, 512, 512).unwrap();
    assert_eq!(big.total_params, a.total_params);
    assert_eq!(big.layers.len(), a.layers.len());
    for (x, y) in a.layers.iter().zip(&big.layers) {
        let area = |s: [usize; 4]| s[2] * s[3];
        if area(y.out_shape) == area(x.out_shape) {
            // squeeze-excite convs act on pooled 1x1 maps
            assert_eq!(y.macs, x.macs, "{}", x.scope);
        } else {
            assert_eq!(area(y.out_shape), 4 * area(x.out_shape));
            assert_eq!(y.macs, 4 * x.macs, "{}", x.scope);
        }
    }
    let sum: u64 = a.sections.iter().map(|s| s.macs).sum();
    assert_eq!(sum, a.total_macs);
}

#[test]
fn complexity_grows_with_backbone_tag() {
    let mut last = (0u64, 0u64);
    for tag in BACKBONE_TAGS {
        let cfg = DetectorConfig {
            backbone: BackboneConfig::from_tag(tag).unwrap(),
            ..DetectorConfig::tiny()
        };
        let r = profile(&Detector::build(&cfg, 0).unwrap(), 128, 128).unwrap();
        let bb = r.section("backbone").unwrap();
        assert!(bb.params > last.0 && bb.macs > last.1, "{tag}: {bb:?}");
        last = (bb.params, bb.macs);
    }
}

proptest! {
    #[test]
    fn ap_is_a_probability(seed in 0u64..5000) {
        let (dets, gts) = random_instance(seed, 4, 3, 6);
        let r = average_precision(&dets, &gts, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.ap));
        prop_assert!(r.true_positives <= r.num_gt.min(r.num_det));
    }

    #[test]
    fn perfect_detections_score_one(seed in 0u64..5000) {
        let (_, gts) = random_instance(seed, 3, 4, 0);
        prop_assume!(gts.iter().any(|g| !g.is_empty()));
        let dets: Vec<BoxList> = gts
            .iter()
            .map(|g| BoxList::with_scores(g.clone(), vec![0.9; g.len()]).unwrap())
            .collect();
        prop_assert_eq!(average_precision(&dets, &gts, 0.5).unwrap().ap, 1.0);
    }
}
