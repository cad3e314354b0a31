//! Square anchors over pyramid levels 2..=7 and anchor/face assignment.

use std::ops::Range;

use crate::boxes::{encode, BBox};
use crate::error::{Error, Result};

pub const MIN_LEVEL: usize = 2;
pub const MAX_LEVEL: usize = 7;

/// Pixel stride of a pyramid level.
pub fn level_stride(level: usize) -> usize {
    1 << level
}

/// Input sides must be multiples of the coarsest stride.
pub const SIZE_MULTIPLE: usize = 1 << MAX_LEVEL;

pub fn check_image_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(SIZE_MULTIPLE) || !width.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::Sizing {
            height,
            width,
            multiple: SIZE_MULTIPLE,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    /// Anchor side per level, finest first.
    pub sizes: Vec<f64>,
    pub t_pos: f64,
    pub t_neg: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            sizes: vec![16.0, 32.0, 64.0, 128.0, 256.0, 512.0],
            t_pos: 0.5,
            t_neg: 0.4,
        }
    }
}

impl AnchorConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let levels = MAX_LEVEL - MIN_LEVEL + 1;
        if self.sizes.len() != levels {
            out.push(format!(
                "anchors.sizes has {} entries, expected {levels}",
                self.sizes.len()
            ));
        }
        if self.sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            out.push("anchors.sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.t_pos) || !(0.0..=1.0).contains(&self.t_neg) {
            out.push("anchor thresholds must lie in [0, 1]".into());
        }
        if self.t_neg > self.t_pos {
            out.push(format!(
                "anchors.t_neg ({}) exceeds anchors.t_pos ({})",
                self.t_neg, self.t_pos
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelGrid {
    pub level: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub size: f64,
    /// Index of this level's first anchor in [`AnchorSet::boxes`].
    pub offset: usize,
}

impl LevelGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All anchors of one image size, level-major then row-major, matching the
/// flattening order of the head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub height: usize,
    pub width: usize,
    pub levels: Vec<LevelGrid>,
    pub boxes: Vec<BBox>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn level(&self, level: usize) -> Option<&LevelGrid> {
        self.levels.iter().find(|g| g.level == level)
    }
}

/// One square anchor per cell at every level, centred on the cell centre.
pub fn generate_anchors(height: usize, width: usize, cfg: &AnchorConfig) -> Result<AnchorSet> {
    check_image_size(height, width)?;
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut levels = Vec::new();
    let mut boxes = Vec::new();
    for (i, level) in (MIN_LEVEL..=MAX_LEVEL).enumerate() {
        let stride = level_stride(level);
        let (rows, cols) = (height / stride, width / stride);
        let size = cfg.sizes[i];
        levels.push(LevelGrid {
            level,
            stride,
            rows,
            cols,
            size,
            offset: boxes.len(),
        });
        let s = stride as f64;
        for r in 0..rows {
            for c in 0..cols {
                boxes.push(BBox::from_center(
                    (c as f64 + 0.5) * s,
                    (r as f64 + 0.5) * s,
                    size,
                    size,
                ));
            }
        }
    }
    Ok(AnchorSet {
        height,
        width,
        levels,
        boxes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    /// Assigned face for each positive anchor.
    pub target: Vec<Option<usize>>,
    /// Encoded regression target for positives, zero elsewhere.
    pub deltas: Vec<[f64; 4]>,
    /// Positives created by the compensation step (IoU may be below
    /// `t_pos`).
    pub forced: Vec<bool>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l == AnchorLabel::Positive).count()
    }

    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// Threshold assignment with per-face compensation.
///
/// Each anchor takes its highest-IoU face (lowest face index on ties):
/// positive at IoU >= `t_pos`, negative below `t_neg`, ignored in between.
/// Afterwards every face without a positive anchor, in index order, claims
/// its highest-IoU anchor among those not already positive (lowest anchor
/// index on ties).
pub fn match_anchors(anchors: &AnchorSet, gt: &[BBox], t_pos: f64, t_neg: f64) -> Result<MatchResult> {
    if t_neg > t_pos {
        return Err(Error::Config(vec![format!("t_neg ({t_neg}) exceeds t_pos ({t_pos})")]));
    }
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut target = vec![None; n];
    let mut forced = vec![false; n];
    if gt.is_empty() {
        return Ok(MatchResult {
            labels,
            target,
            deltas: vec![[0.0; 4]; n],
            forced,
        });
    }
    for g in gt {
        g.validate()?;
    }

    // per-face best anchor is tracked alongside the per-anchor pass
    let mut has_pos = vec![false; gt.len()];
    for (a, anchor) in anchors.boxes.iter().enumerate() {
        let mut best = 0.0;
        let mut best_j = 0;
        for (j, g) in gt.iter().enumerate() {
            let v = anchor.iou(g);
            if v > best {
                best = v;
                best_j = j;
            }
        }
        if best >= t_pos && best > 0.0 {
            labels[a] = AnchorLabel::Positive;
            target[a] = Some(best_j);
            has_pos[best_j] = true;
        } else if best >= t_neg {
            labels[a] = AnchorLabel::Ignore;
        }
    }

    for (j, g) in gt.iter().enumerate() {
        if has_pos[j] {
            continue;
        }
        let mut best = -1.0;
        let mut best_a = None;
        for (a, anchor) in anchors.boxes.iter().enumerate() {
            if labels[a] == AnchorLabel::Positive {
                continue;
            }
            let v = anchor.iou(g);
            if v > best {
                best = v;
                best_a = Some(a);
            }
        }
        if let Some(a) = best_a {
            labels[a] = AnchorLabel::Positive;
            target[a] = Some(j);
            forced[a] = true;
            has_pos[j] = true;
        }
    }

    let mut deltas = vec![[0.0; 4]; n];
    for a in 0..n {
        if let Some(j) = target[a] {
            deltas[a] = encode(&anchors.boxes[a], &gt[j])?;
        }
    }
    Ok(MatchResult {
        labels,
        target,
        deltas,
        forced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic_at_256() {
        let set = generate_anchors(256, 256, &AnchorConfig::default()).unwrap();
        let counts: Vec<usize> = set.levels.iter().map(LevelGrid::len).collect();
        assert_eq!(counts, vec![4096, 1024, 256, 64, 16, 4]);
        assert_eq!(set.len(), 5460);
        let first = set.boxes[0];
        assert_eq!(first.center(), (2.0, 2.0));
        assert_eq!(first.width(), 16.0);
        let top = set.level(7).unwrap();
        assert_eq!(top.len(), 4);
        for b in &set.boxes[top.range()] {
            assert_eq!((b.width(), b.height()), (512.0, 512.0));
        }
    }

    #[test]
    fn size_must_divide_by_128() {
        assert!(matches!(
            generate_anchors(200, 256, &AnchorConfig::default()),
            Err(Error::Sizing { multiple: 128, .. })
        ));
    }

    #[test]
    fn anchor_identical_to_face_is_positive() {
        let set = generate_anchors(128, 128, &AnchorConfig::default()).unwrap();
        let gt = set.boxes[37];
        let m = match_anchors(&set, &[gt], 0.5, 0.4).unwrap();
        assert_eq!(m.labels[37], AnchorLabel::Positive);
        assert_eq!(m.target[37], Some(0));
        assert!(!m.forced[37]);
        assert_eq!(m.deltas[37], [0.0; 4]);
    }

    #[test]
    fn weak_face_gets_exactly_one_forced_anchor() {
        let set = generate_anchors(128, 128, &AnchorConfig::default()).unwrap();
        // 8x8 face: best IoU against the 16px anchors is 64/256 = 0.25
        let gt = BBox::new(4.0, 4.0, 12.0, 12.0).unwrap();
        let m = match_anchors(&set, &[gt], 0.5, 0.4).unwrap();
        assert_eq!(m.num_positive(), 1);
        let a = m.labels.iter().position(|l| *l == AnchorLabel::Positive).unwrap();
        assert!(m.forced[a]);
        let best = set.boxes.iter().map(|b| b.iou(&gt)).fold(0.0, f64::max);
        assert!((set.boxes[a].iou(&gt) - best).abs() < 1e-15);
        assert!(best < 0.5);
    }

    #[test]
    fn no_faces_means_all_negative() {
        let set = generate_anchors(128, 128, &AnchorConfig::default()).unwrap();
        let m = match_anchors(&set, &[], 0.5, 0.4).unwrap();
        assert_eq!(m.count(AnchorLabel::Negative), set.len());
    }

    #[test]
    fn inverted_thresholds_are_rejected() {
        let set = generate_anchors(128, 128, &AnchorConfig::default()).unwrap();
        assert!(match_anchors(&set, &[], 0.3, 0.4).is_err());
    }
}
