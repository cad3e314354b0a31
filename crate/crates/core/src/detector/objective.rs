//! Batch loss over head outputs and its gradient with respect to them.

use ef_tensor::Tensor;

use super::model::LevelOutput;
use crate::anchors::{match_anchors, AnchorConfig, AnchorLabel, AnchorSet, MatchResult};
use crate::boxes::BBox;
use crate::error::Result;
use crate::losses::{focal_logit, smooth_l1_grad, smooth_l1_scalar, total_loss, LossConfig, LossReport};

/// Loss value plus `d total / d output` for every level's cls and reg maps.
#[derive(Clone, Debug)]
pub struct Objective {
    pub report: LossReport,
    pub cls_grads: Vec<Tensor>,
    pub reg_grads: Vec<Tensor>,
}

pub fn match_batch(anchors: &AnchorSet, gts: &[Vec<BBox>], cfg: &AnchorConfig) -> Result<Vec<MatchResult>> {
    gts.iter()
        .map(|gt| match_anchors(anchors, gt, cfg.t_pos, cfg.t_neg))
        .collect()
}

/// Focal loss over non-ignored anchors and smooth-L1 over positives, both
/// summed over the batch and divided by `max(total positives, 1)`.
pub fn detection_objective(
    outputs: &[LevelOutput],
    anchors: &AnchorSet,
    matches: &[MatchResult],
    cfg: &LossConfig,
) -> Result<Objective> {
    let num_pos: usize = matches.iter().map(MatchResult::num_positive).sum();
    let norm = num_pos.max(1) as f64;
    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut cls_grads = Vec::with_capacity(outputs.len());
    let mut reg_grads = Vec::with_capacity(outputs.len());
    for out in outputs {
        let grid = anchors
            .level(out.level)
            .ok_or_else(|| crate::Error::Structure(format!("no anchors at level {}", out.level)))?;
        let cells = grid.len();
        let mut gc = Tensor::zeros(out.cls.shape());
        let mut gr = Tensor::zeros(out.reg.shape());
        for (s, m) in matches.iter().enumerate() {
            let logits = out.cls.sample(s);
            let deltas = out.reg.sample(s);
            let gcs = gc.sample_mut(s);
            for j in 0..cells {
                let a = grid.offset + j;
                let y = match m.labels[a] {
                    AnchorLabel::Positive => 1,
                    AnchorLabel::Negative => 0,
                    AnchorLabel::Ignore => continue,
                };
                let (l, g) = focal_logit(logits[j], y, cfg)?;
                cls_sum += l;
                gcs[j] = g / norm;
            }
            let grs = gr.sample_mut(s);
            for j in 0..cells {
                let a = grid.offset + j;
                if m.labels[a] != AnchorLabel::Positive {
                    continue;
                }
                for k in 0..4 {
                    let x = deltas[k * cells + j] - m.deltas[a][k];
                    reg_sum += smooth_l1_scalar(x);
                    grs[k * cells + j] = cfg.lambda * smooth_l1_grad(x) / norm;
                }
            }
        }
        cls_grads.push(gc);
        reg_grads.push(gr);
    }
    let report = total_loss(cls_sum / norm, reg_sum / norm, num_pos, cfg)?;
    Ok(Objective {
        report,
        cls_grads,
        reg_grads,
    })
}
