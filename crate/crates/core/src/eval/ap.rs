//! Average precision with all-points interpolation.

use crate::boxes::{BBox, Detections};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each detection, in score order.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

impl PrCurve {
    /// Running maximum of precision from the right, paired with recall.
    pub fn envelope(&self) -> Vec<(f64, f64)> {
        let mut out = self.points.clone();
        for i in (0..out.len().saturating_sub(1)).rev() {
            out[i].1 = out[i].1.max(out[i + 1].1);
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["recall", "precision"])?;
        for (r, p) in &self.points {
            w.write_record([format!("{r:?}"), format!("{p:?}")])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub curve: PrCurve,
    pub num_gt: usize,
    pub true_positives: usize,
    pub num_det: usize,
}

/// Pools detections over all images, walks them in descending score order
/// (ties: image index, then detection index) and marks each a true positive
/// when its highest-IoU ground truth in the same image reaches `iou_thr` and
/// has not been claimed yet. AP is the area under the precision envelope.
///
/// With no ground truth at all, AP is 1 when there are also no detections
/// and 0 otherwise.
pub fn average_precision(dets: &[Detections], gts: &[Vec<BBox>], iou_thr: f64) -> Result<ApResult> {
    if dets.len() != gts.len() {
        return Err(Error::Structure(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let mut pooled: Vec<(f64, usize, usize)> = Vec::new();
    for (img, d) in dets.iter().enumerate() {
        if d.is_empty() {
            continue;
        }
        let scores = d
            .scores
            .as_ref()
            .ok_or_else(|| Error::Structure(format!("detections for image {img} have no scores")))?;
        pooled.extend(scores.iter().enumerate().map(|(j, &s)| (s, img, j)));
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        let ap = if pooled.is_empty() { 1.0 } else { 0.0 };
        log::info!("no ground truth; AP defined as {ap}");
        return Ok(ApResult {
            ap,
            curve: PrCurve { points: vec![], ap },
            num_gt,
            true_positives: 0,
            num_det: pooled.len(),
        });
    }
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(pooled.len());
    for &(_, img, j) in &pooled {
        let det = &dets[img].boxes[j];
        let mut best = (-1.0, None);
        for (g, gt) in gts[img].iter().enumerate() {
            let iou = det.iou(gt);
            if iou > best.0 {
                best = (iou, Some(g));
            }
        }
        match best {
            (iou, Some(g)) if iou >= iou_thr && !claimed[img][g] => {
                claimed[img][g] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut curve = PrCurve { points, ap: 0.0 };
    let env = curve.envelope();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (r, p) in env {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    curve.ap = ap;
    Ok(ApResult {
        ap,
        curve,
        num_gt,
        true_positives: tp,
        num_det: pooled.len(),
    })
}

/// Keeps only the images whose names appear in `subset`.
pub fn filter_subset<T: Clone>(names: &[&str], items: &[T], subset: &[&str]) -> Vec<T> {
    names
        .iter()
        .zip(items)
        .filter(|(n, _)| subset.contains(n))
        .map(|(_, t)| t.clone())
        .collect()
}
