use ef_tensor::{ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::head::Head;
use crate::anchors::{check_image_size, generate_anchors, AnchorSet, MAX_LEVEL, MIN_LEVEL};
use crate::backbone::{Backbone, StageBackbone};
use crate::boxes::{decode_clipped, nms_indices, BBox, BoxList, Detections};
use crate::config::{DetectorConfig, InferConfig};
use crate::enhance::Enhancer;
use crate::error::{Error, Result};
use crate::losses::sigmoid;
use crate::pyramid::{extract_levels, PyramidInputs};
use crate::sbifpn::{build_neck, Neck, NodeStyle};

/// Head outputs of one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub level: usize,
    pub cls: Var,
    pub reg: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    pub level: usize,
    /// `[n,1,h,w]` logits.
    pub cls: Tensor,
    /// `[n,4,h,w]` box deltas.
    pub reg: Tensor,
}

/// Backbone, pyramid inputs, neck, per-level enhancement and the shared
/// head, together with their parameters.
pub struct Detector {
    config: DetectorConfig,
    pub params: ParamStore,
    backbone: Box<dyn Backbone>,
    inputs: PyramidInputs,
    neck: Neck,
    enhance: Enhancer,
    head: Head,
}

impl std::fmt::Debug for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Detector")
            .field("config", &self.config)
            .field("params", &self.params.num_scalars())
            .finish()
    }
}

impl Detector {
    /// Builds the stage backbone from `config.backbone`; parameters are a
    /// pure function of `seed`.
    pub fn build(config: &DetectorConfig, seed: u64) -> Result<Self> {
        Self::build_with(config, seed, |store, rng| {
            Ok(Box::new(StageBackbone::build(store, &config.backbone, rng)?))
        })
    }

    /// Builds around a backbone supplied by `make_backbone`, which must
    /// register its parameters in the given store.
    pub fn build_with(
        config: &DetectorConfig,
        seed: u64,
        make_backbone: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<Box<dyn Backbone>>,
    ) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = make_backbone(&mut params, &mut rng)?;
        let width = config.pyramid_width;
        let inputs = PyramidInputs::build(
            &mut params,
            MIN_LEVEL,
            &backbone.widths(),
            MAX_LEVEL - MIN_LEVEL - 3,
            width,
            &mut rng,
        );
        let neck = build_neck(
            &mut params,
            config.neck,
            MIN_LEVEL,
            MAX_LEVEL,
            width,
            config.neck_depth,
            NodeStyle::Conv,
            &mut rng,
        )?;
        let enhance = Enhancer::build(
            &mut params,
            MIN_LEVEL,
            MAX_LEVEL,
            width,
            config.rfe,
            config.attn_depth,
            &mut rng,
        )?;
        let head = Head::build(&mut params, width, config.head_width, config.head_depth, &mut rng);
        Ok(Self {
            config: config.clone(),
            params,
            backbone,
            inputs,
            neck,
            enhance,
            head,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn neck(&self) -> &Neck {
        &self.neck
    }

    pub fn enhancer(&self) -> &Enhancer {
        &self.enhance
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records the full forward pass of `images` (`[n,3,h,w]`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<Vec<LevelVars>> {
        let [_, _, h, w] = tape.shape(images);
        check_image_size(h, w)?;
        let c = extract_levels(tape, self.backbone.as_ref(), images)?;
        let p = self.inputs.forward(tape, &c)?;
        let o = self.neck.forward(tape, &p)?;
        let e = self.enhance.forward(tape, &o)?;
        tape.push_scope("head");
        let mut out = Vec::new();
        for level in MIN_LEVEL..=MAX_LEVEL {
            let x = e.get(level)?;
            let (cls, reg) = tape.scoped(format!("p{level}"), |t| self.head.forward(t, x));
            let stride = crate::anchors::level_stride(level);
            let [_, cc, ch, cw] = tape.shape(cls);
            let [_, rc, _, _] = tape.shape(reg);
            if cc != 1 || rc != 4 || ch != h / stride || cw != w / stride {
                tape.pop_scope();
                return Err(Error::Structure(format!(
                    "head output at level {level} has shape {:?}/{:?}",
                    tape.shape(cls),
                    tape.shape(reg)
                )));
            }
            out.push(LevelVars { level, cls, reg });
        }
        tape.pop_scope();
        Ok(out)
    }

    /// Forward pass without gradient bookkeeping beyond the tape itself.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<LevelOutput>> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(images.clone());
        let vars = self.forward(&mut tape, x)?;
        Ok(vars
            .iter()
            .map(|v| LevelOutput {
                level: v.level,
                cls: tape.value(v.cls).clone(),
                reg: tape.value(v.reg).clone(),
            })
            .collect())
    }

    pub fn anchors(&self, height: usize, width: usize) -> Result<AnchorSet> {
        generate_anchors(height, width, &self.config.anchors)
    }

    /// Detections for every image of an `[n,3,h,w]` batch, using the
    /// configured inference thresholds.
    pub fn detect(&self, images: &Tensor) -> Result<Vec<Detections>> {
        self.detect_with(images, &self.config.infer)
    }

    pub fn detect_with(&self, images: &Tensor, infer: &InferConfig) -> Result<Vec<Detections>> {
        let [n, _, h, w] = images.shape();
        let outputs = self.predict(images)?;
        let anchors = self.anchors(h, w)?;
        (0..n).map(|i| postprocess(&outputs, &anchors, i, infer)).collect()
    }
}

/// Thresholds sigmoid scores, keeps the top `topk_per_level` per level,
/// decodes and clips boxes, then runs NMS across levels.
pub fn postprocess(
    outputs: &[LevelOutput],
    anchors: &AnchorSet,
    sample: usize,
    infer: &InferConfig,
) -> Result<Detections> {
    let (iw, ih) = (anchors.width as f64, anchors.height as f64);
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for out in outputs {
        let grid = anchors
            .level(out.level)
            .ok_or_else(|| Error::Structure(format!("no anchors at level {}", out.level)))?;
        let cells = grid.len();
        let logits = out.cls.sample(sample);
        let deltas = out.reg.sample(sample);
        let mut cand: Vec<(f64, usize)> = logits
            .iter()
            .enumerate()
            .map(|(j, &z)| (sigmoid(z), j))
            .filter(|(s, _)| *s > infer.score_thr)
            .collect();
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cand.truncate(infer.topk_per_level);
        for (s, j) in cand {
            let d = [
                deltas[j],
                deltas[cells + j],
                deltas[2 * cells + j],
                deltas[3 * cells + j],
            ];
            let b = decode_clipped(&anchors.boxes[grid.offset + j], &d, iw, ih);
            if b.is_valid() {
                boxes.push(b);
                scores.push(s);
            }
        }
    }
    let keep = nms_indices(&boxes, &scores, infer.nms_iou, infer.max_det);
    let kept: Vec<BBox> = keep.iter().map(|&i| boxes[i]).collect();
    let ks: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
    BoxList::with_scores(kept, ks)
}
