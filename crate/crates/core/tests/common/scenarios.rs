//! Scenario builders shared by the component tests and the acceptance
//! suite.

use std::collections::BTreeMap;

use ef_tensor::gradcheck::{check, GradCheckReport};
use ef_tensor::{init, ParamStore, Tape, Tensor};
use efficientface::enhance::{ChannelAttention, RfeBlock, SpatialAttention};
use efficientface::pyramid::{Pyramid, PyramidInputs};
use efficientface::sbifpn::{FusionNode, NodeStyle, SBiFpn, FUSION_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{scripted_neck, Map, NeckWeights};

pub const FD_STEP: f64 = 1e-5;

pub fn random_map<R: Rng>(rng: &mut R, c: usize, h: usize) -> Map {
    Map {
        c,
        h,
        w: h,
        v: (0..c * h * h).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

pub fn map_tensor(m: &Map) -> Tensor {
    Tensor::from_vec([1, m.c, m.h, m.w], m.v.clone())
}

/// A symmetric neck over `lo..=lo+n-1` with identity nodes and random raw
/// weights (some negative), plus the same weights keyed for the oracle.
pub fn random_neck(lo: usize, n: usize, seed: u64) -> (ParamStore, SBiFpn, NeckWeights) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let hi = lo + n - 1;
    let neck = SBiFpn::build(&mut store, lo, hi, 1, NodeStyle::Identity, &mut rng).unwrap();
    let mut w = NeckWeights {
        up: BTreeMap::new(),
        down: BTreeMap::new(),
        out: BTreeMap::new(),
    };
    let mut draw = |store: &mut ParamStore, node: &FusionNode, dst: &mut BTreeMap<usize, Vec<f64>>, l: usize| {
        let raw: Vec<f64> = (0..node.arity).map(|_| rng.random_range(-0.5..2.0)).collect();
        store.set(node.weights, Tensor::from_vec([node.arity, 1, 1, 1], raw.clone()));
        dst.insert(l, raw);
    };
    for l in lo..hi {
        draw(&mut store, neck.up_node(l), &mut w.up, l);
    }
    for l in lo + 1..=hi {
        draw(&mut store, neck.down_node(l), &mut w.down, l);
    }
    for l in lo..=hi {
        draw(&mut store, neck.out_node(l), &mut w.out, l);
    }
    (store, neck, w)
}

fn max_diff(got: &Tensor, want: &Map) -> f64 {
    assert_eq!(got.shape(), [1, want.c, want.h, want.w]);
    got.data()
        .iter()
        .zip(&want.v)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Largest absolute difference between the library neck and the scripted
/// evaluation over every intermediate and output map of a random 4-level
/// pyramid.
pub fn neck_oracle_error(seed: u64) -> f64 {
    let (store, neck, w) = random_neck(2, 4, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let maps: Vec<Map> = [16, 8, 4, 2].iter().map(|&h| random_map(&mut rng, 3, h)).collect();
    let want = scripted_neck(&maps, 2, &w, FUSION_EPS);
    let mut tape = Tape::new(&store);
    let p = Pyramid::from_levels(2, maps.iter().map(|m| tape.input(map_tensor(m))).collect::<Vec<_>>());
    let got = neck.forward_detailed(&mut tape, &p).unwrap();
    let mut err: f64 = 0.0;
    for (l, m) in &want.up {
        err = err.max(max_diff(tape.value(got.up.get(*l).unwrap()), m));
    }
    for (l, m) in &want.down {
        err = err.max(max_diff(tape.value(got.down.get(*l).unwrap()), m));
    }
    for (l, m) in &want.out {
        err = err.max(max_diff(tape.value(got.out.get(*l).unwrap()), m));
    }
    err
}

/// Replaces every parameter with `N(0, std)` draws so that no gradient is
/// trivially zero.
pub fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape();
        store.set(id, init::normal(shape, std, &mut rng));
    }
}

fn random_input(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init::uniform(shape, -1.0, 1.0, &mut rng)
}

pub fn fusion_weight_check() -> GradCheckReport {
    let mut store = ParamStore::new();
    let node = FusionNode::identity(&mut store, "n", 3);
    store.set(node.weights, Tensor::from_vec([3, 1, 1, 1], vec![0.7, 1.9, 0.4]));
    let inputs: Vec<Tensor> = (0..3).map(|k| random_input([1, 2, 4, 4], k)).collect();
    check(&store, &inputs, FD_STEP, |t, v| node.blend(t, v).unwrap())
}

/// End-to-end symmetric neck on a 4-level pyramid (8x8 down to 1x1), with
/// 3x3 conv nodes.
pub fn neck_check() -> GradCheckReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let neck = SBiFpn::build(&mut store, 2, 5, 4, NodeStyle::Conv, &mut rng).unwrap();
    let inputs: Vec<Tensor> = [8, 4, 2, 1]
        .iter()
        .enumerate()
        .map(|(k, &h)| random_input([1, 4, h, h], 10 + k as u64))
        .collect();
    check(&store, &inputs, FD_STEP, |t, v| {
        let p = Pyramid::from_levels(2, v.to_vec());
        let out = neck.forward_detailed(t, &p).unwrap().out;
        // per-level spatial means, concatenated into one output
        let parts: Vec<_> = out.iter().map(|(_, v)| t.spatial_mean(v)).collect();
        t.concat(&parts)
    })
}

pub fn rfe_check() -> GradCheckReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let block = RfeBlock::build(&mut store, "rfe", 16, &mut rng).unwrap();
    randomize(&mut store, 0.3, 6);
    let x = random_input([1, 16, 6, 6], 7);
    check(&store, &[x], FD_STEP, |t, v| block.forward(t, v[0]))
}

pub fn spatial_attention_check() -> GradCheckReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let att = SpatialAttention::build(&mut store, "sa", &mut rng);
    randomize(&mut store, 0.3, 9);
    let x = random_input([1, 4, 8, 8], 10);
    check(&store, &[x], FD_STEP, |t, v| att.forward(t, v[0]))
}

pub fn channel_attention_check() -> GradCheckReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let att = ChannelAttention::build(&mut store, "ca", 8, &mut rng);
    randomize(&mut store, 0.5, 12);
    let x = random_input([1, 8, 5, 5], 13);
    check(&store, &[x], FD_STEP, |t, v| att.forward(t, v[0]))
}

/// Level extension and width normalization from a single 4x4 backbone
/// level up to a 1x1 top level.
pub fn pyramid_inputs_check() -> GradCheckReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = PyramidInputs::build(&mut store, 5, &[3], 2, 8, &mut rng);
    randomize(&mut store, 0.4, 15);
    let x = random_input([1, 3, 4, 4], 16);
    check(&store, &[x], FD_STEP, |t, v| {
        let p = inputs.forward(t, &Pyramid::from_levels(5, vec![v[0]])).unwrap();
        let parts: Vec<_> = p.iter().map(|(_, v)| t.spatial_mean(v)).collect();
        t.concat(&parts)
    })
}

/// Settings of the overfit runs: tiny preset, no augmentation, one epoch
/// per `fit` call so progress can be checked between epochs.
pub fn overfit_settings() -> efficientface::config::Settings {
    let mut s = efficientface::config::Settings::preset("tiny").unwrap();
    s.train.crop = false;
    s.train.flip = false;
    s.train.epochs = 1;
    s.train.batch_size = 4;
    s
}

pub struct OverfitOutcome {
    pub steps: usize,
    /// `(step, AP@0.5)` at every evaluation, starting with step 0.
    pub ap_history: Vec<(usize, f64)>,
    pub step_losses: Vec<f64>,
}

impl OverfitOutcome {
    pub fn final_ap(&self) -> f64 {
        self.ap_history.last().map_or(0.0, |p| p.1)
    }
}

/// Trains the tiny detector on `data` for up to `max_steps` steps,
/// evaluating AP@0.5 on the same images every `eval_every` steps and
/// stopping early once it reaches `stop_at`.
pub fn overfit_run(
    data: &efficientface::data::Dataset,
    max_steps: usize,
    eval_every: usize,
    stop_at: Option<f64>,
) -> OverfitOutcome {
    use efficientface::detector::{Detector, Trainer};
    use efficientface::eval::average_precision;

    let settings = overfit_settings();
    let mut detector = Detector::build(&settings.model, settings.seed).unwrap();
    let mut trainer = Trainer::new(&detector, &settings).unwrap();
    let images = Tensor::stack(&data.samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
    let gts: Vec<_> = data.samples.iter().map(|s| s.gt.clone()).collect();
    let evaluate = |d: &Detector| average_precision(&d.detect(&images).unwrap(), &gts, 0.5).unwrap().ap;
    let mut out = OverfitOutcome {
        steps: 0,
        ap_history: vec![(0, evaluate(&detector))],
        step_losses: Vec::new(),
    };
    let mut next_eval = eval_every;
    while trainer.steps() < max_steps {
        let report = trainer.fit(&mut detector, data, None).unwrap();
        out.step_losses.extend(report.step_losses);
        if trainer.steps() >= next_eval || trainer.steps() >= max_steps {
            next_eval += eval_every;
            let ap = evaluate(&detector);
            out.ap_history.push((trainer.steps(), ap));
            if stop_at.is_some_and(|t| ap >= t) {
                break;
            }
        }
    }
    out.steps = trainer.steps();
    out
}
