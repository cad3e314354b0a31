//! Corner-form boxes, IoU, delta coding and greedy suppression.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Largest log-scale delta accepted by [`decode`]; keeps `exp` finite.
pub const MAX_LOG_SCALE: f64 = 6.907_755_278_982_137; // ln(1000)

/// Axis-aligned box in pixel coordinates, `x2 > x1` and `y2 > y1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Clamps to `[0, width] x [0, height]`. The result may be degenerate.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn hflip(&self, image_width: f64) -> BBox {
        BBox {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }
}

/// Boxes with optional per-box scores and labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoxList {
    pub boxes: Vec<BBox>,
    pub scores: Option<Vec<f64>>,
    pub labels: Option<Vec<u32>>,
}

/// Scored boxes produced by inference.
pub type Detections = BoxList;

impl BoxList {
    pub fn new(boxes: Vec<BBox>) -> Result<Self> {
        for b in &boxes {
            b.validate()?;
        }
        Ok(Self {
            boxes,
            scores: None,
            labels: None,
        })
    }

    pub fn with_scores(boxes: Vec<BBox>, scores: Vec<f64>) -> Result<Self> {
        if boxes.len() != scores.len() {
            return Err(Error::Structure(format!(
                "{} boxes but {} scores",
                boxes.len(),
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("box score {s}")));
        }
        let mut list = Self::new(boxes)?;
        list.scores = Some(scores);
        Ok(list)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn score(&self, i: usize) -> Option<f64> {
        self.scores.as_ref().map(|s| s[i])
    }
}

/// Pairwise IoU, `out[i][j] = iou(a[i], b[j])`.
pub fn iou_matrix(a: &[BBox], b: &[BBox]) -> Vec<Vec<f64>> {
    a.iter().map(|x| b.iter().map(|y| x.iou(y)).collect()).collect()
}

/// Regression target of `gt` relative to `anchor`: centre offsets in units
/// of anchor size and log size ratios.
pub fn encode(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    if gt.width() <= 0.0 || gt.height() <= 0.0 {
        return Err(Error::InvalidBox(format!("non-positive target size {gt:?}")));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok([
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ])
}

/// Exact inverse of [`encode`] (log scales are capped at [`MAX_LOG_SCALE`]).
pub fn decode(anchor: &BBox, deltas: &[f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + deltas[0] * aw;
    let cy = acy + deltas[1] * ah;
    let w = aw * deltas[2].min(MAX_LOG_SCALE).exp();
    let h = ah * deltas[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

/// [`decode`] followed by clipping to the image.
pub fn decode_clipped(anchor: &BBox, deltas: &[f64; 4], width: f64, height: f64) -> BBox {
    decode(anchor, deltas).clip(width, height)
}

/// Greedy suppression: visit boxes by descending score (ties by lower
/// index), drop any box whose IoU with a kept box exceeds `iou_thr`.
/// Returns indices into `boxes` in keep order.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_thr: f64, max_out: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= max_out {
            break;
        }
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_thr) {
            keep.push(i);
        }
    }
    keep
}

/// Suppressed copy of a scored list, sorted by score.
pub fn nms(dets: &BoxList, iou_thr: f64, max_out: usize) -> Result<BoxList> {
    let scores = dets
        .scores
        .as_ref()
        .ok_or_else(|| Error::Structure("nms requires scores".into()))?;
    let keep = nms_indices(&dets.boxes, scores, iou_thr, max_out);
    Ok(BoxList {
        boxes: keep.iter().map(|&i| dets.boxes[i]).collect(),
        scores: Some(keep.iter().map(|&i| scores[i]).collect()),
        labels: dets.labels.as_ref().map(|l| keep.iter().map(|&i| l[i]).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_hand_cases() {
        assert_eq!(b(0., 0., 10., 10.).iou(&b(0., 0., 10., 10.)), 1.0);
        let v = b(0., 0., 10., 10.).iou(&b(5., 5., 15., 15.));
        assert!((v - 25.0 / 175.0).abs() < 1e-15);
        assert_eq!(b(0., 0., 1., 1.).iou(&b(2., 2., 3., 3.)), 0.0);
        // touching edges do not overlap
        assert_eq!(b(0., 0., 1., 1.).iou(&b(1., 0., 2., 1.)), 0.0);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BBox::new(1., 1., 1., 2.).is_err());
        assert!(BBox::new(0., 3., 1., 2.).is_err());
        assert!(BBox::new(0., 0., f64::NAN, 2.).is_err());
        assert!(BoxList::new(vec![BBox {
            x1: 0.,
            y1: 0.,
            x2: -1.,
            y2: 1.
        }])
        .is_err());
    }

    #[test]
    fn encode_hand_case() {
        let d = encode(&b(0., 0., 16., 16.), &b(0., 0., 32., 32.)).unwrap();
        let ln2 = 2f64.ln();
        for (got, want) in d.iter().zip([0.5, 0.5, ln2, ln2]) {
            assert!((got - want).abs() < 1e-15);
        }
        let a = b(3., 4., 19., 20.);
        assert_eq!(encode(&a, &a).unwrap(), [0.0; 4]);
    }

    #[test]
    fn decode_clips_to_image() {
        let a = b(0., 0., 16., 16.);
        let out = decode_clipped(&a, &[-1.0, 0.0, 0.0, 0.0], 64.0, 64.0);
        assert_eq!(out.x1, 0.0);
        assert_eq!(out.x2, 0.0);
        assert!(!out.is_valid());
    }

    #[test]
    fn nms_hand_cases() {
        let same = BoxList::with_scores(vec![b(0., 0., 10., 10.); 2], vec![0.9, 0.8]).unwrap();
        let kept = nms(&same, 0.5, 10).unwrap();
        assert_eq!(kept.scores.unwrap(), vec![0.9]);

        let disjoint = BoxList::with_scores(
            vec![b(0., 0., 1., 1.), b(5., 5., 6., 6.), b(9., 9., 10., 10.)],
            vec![0.2, 0.7, 0.5],
        )
        .unwrap();
        let kept = nms(&disjoint, 0.5, 10).unwrap();
        assert_eq!(kept.scores.unwrap(), vec![0.7, 0.5, 0.2]);
        assert_eq!(nms(&disjoint, 0.5, 2).unwrap().len(), 2);
    }

    #[test]
    fn nms_breaks_ties_by_index() {
        let boxes = vec![b(0., 0., 10., 10.), b(1., 1., 10., 10.)];
        assert_eq!(nms_indices(&boxes, &[0.5, 0.5], 0.3, 10), vec![0]);
    }

    #[test]
    fn nms_requires_scores() {
        let l = BoxList::new(vec![b(0., 0., 1., 1.)]).unwrap();
        assert!(nms(&l, 0.5, 1).is_err());
    }
}
