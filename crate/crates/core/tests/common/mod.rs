//! Reference implementations used as test oracles. They favour the most
//! literal formulation over speed and share no code with the library.

#![allow(dead_code)]

use efficientface::boxes::{BBox, BoxList};
use rand::Rng;

/// Integer-cornered box for lattice-counting oracles.
#[derive(Clone, Copy, Debug)]
pub struct IBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl IBox {
    pub fn to_bbox(self) -> BBox {
        BBox::new(self.x1 as f64, self.y1 as f64, self.x2 as f64, self.y2 as f64).unwrap()
    }

    pub fn from_bbox(b: &BBox) -> Self {
        let r = |v: f64| {
            assert_eq!(v.fract(), 0.0, "lattice oracle needs integer corners");
            v as i64
        };
        Self {
            x1: r(b.x1),
            y1: r(b.y1),
            x2: r(b.x2),
            y2: r(b.y2),
        }
    }
}

/// Counts unit lattice cells `[k, k+1)` covered by both intervals.
fn shared_cells(a1: i64, a2: i64, b1: i64, b2: i64) -> i64 {
    (a1..a2).filter(|&k| k >= b1 && k < b2).count() as i64
}

/// IoU by counting unit cells along each axis.
pub fn lattice_iou(a: IBox, b: IBox) -> f64 {
    let inter = shared_cells(a.x1, a.x2, b.x1, b.x2) * shared_cells(a.y1, a.y2, b.y1, b.y2);
    let area = |q: IBox| shared_cells(q.x1, q.x2, q.x1, q.x2) * shared_cells(q.y1, q.y2, q.y1, q.y2);
    let union = area(a) + area(b) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    lattice_iou(IBox::from_bbox(a), IBox::from_bbox(b))
}

pub fn random_ibox<R: Rng>(rng: &mut R, extent: i64, min_side: i64, max_side: i64) -> IBox {
    let w = rng.random_range(min_side..=max_side);
    let h = rng.random_range(min_side..=max_side);
    let x1 = rng.random_range(0..=(extent - w).max(0));
    let y1 = rng.random_range(0..=(extent - h).max(0));
    IBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

/// Label per anchor: 1 positive, 0 negative, -1 ignored.
pub struct OracleMatch {
    pub labels: Vec<i8>,
    pub target: Vec<Option<usize>>,
}

/// Per-anchor argmax assignment with thresholds, then each unmatched face
/// in turn takes its best anchor among the non-positive ones.
pub fn oracle_match(anchors: &[BBox], gt: &[BBox], t_pos: f64, t_neg: f64) -> OracleMatch {
    let n = anchors.len();
    let mut labels = vec![0i8; n];
    let mut target = vec![None; n];
    if gt.is_empty() {
        return OracleMatch { labels, target };
    }
    let iou: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gt.iter().map(|g| bbox_iou(a, g)).collect())
        .collect();
    for a in 0..n {
        let row = &iou[a];
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let j = row.iter().position(|&v| v == max).unwrap();
        if max > 0.0 && max >= t_pos {
            labels[a] = 1;
            target[a] = Some(j);
        } else if max >= t_neg {
            labels[a] = -1;
        }
    }
    #[allow(clippy::needless_range_loop)]
    for j in 0..gt.len() {
        if target.contains(&Some(j)) {
            continue;
        }
        let candidates: Vec<usize> = (0..n).filter(|&a| labels[a] != 1).collect();
        if candidates.is_empty() {
            continue;
        }
        let max = candidates.iter().map(|&a| iou[a][j]).fold(f64::MIN, f64::max);
        let a = *candidates.iter().find(|&&a| iou[a][j] == max).unwrap();
        labels[a] = 1;
        target[a] = Some(j);
    }
    OracleMatch { labels, target }
}

/// Suppression by removal: repeatedly take the best remaining box (lowest
/// index on score ties) and delete everything overlapping it by more than
/// `thr`.
pub fn oracle_nms(boxes: &[BBox], scores: &[f64], thr: f64, max_out: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() && keep.len() < max_out {
        let mut best = remaining[0];
        for &i in &remaining {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        keep.push(best);
        remaining.retain(|&i| i != best && bbox_iou(&boxes[i], &boxes[best]) <= thr);
    }
    keep
}

/// Precision and recall after each prefix of the ranked detections, with
/// each prefix matched from scratch; AP integrates the interpolated
/// precision over every recall level reached.
pub fn oracle_ap(dets: &[BoxList], gts: &[Vec<BBox>], thr: f64) -> f64 {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (img, d) in dets.iter().enumerate() {
        for j in 0..d.len() {
            ranked.push((d.scores.as_ref().unwrap()[j], img, j));
        }
    }
    if num_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    for k in 1..=ranked.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for &(_, img, j) in &ranked[..k] {
            let d = &dets[img].boxes[j];
            let ious: Vec<f64> = gts[img].iter().map(|g| bbox_iou(d, g)).collect();
            if ious.is_empty() {
                continue;
            }
            let max = ious.iter().cloned().fold(f64::MIN, f64::max);
            let g = ious.iter().position(|&v| v == max).unwrap();
            if max >= thr && !used[img][g] {
                used[img][g] = true;
                tp += 1;
            }
        }
        prec.push(tp as f64 / k as f64);
        rec.push(tp as f64 / num_gt as f64);
    }
    let mut levels: Vec<f64> = rec.clone();
    levels.dedup();
    let mut ap = 0.0;
    let mut last = 0.0;
    for r in levels {
        if r <= last {
            continue;
        }
        let p = (0..rec.len())
            .filter(|&k| rec[k] >= r)
            .map(|k| prec[k])
            .fold(0.0, f64::max);
        ap += (r - last) * p;
        last = r;
    }
    ap
}

/// Plain channel-major map used by the scripted neck evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    pub fn up(&self) -> Map {
        let (h, w) = (self.h * 2, self.w * 2);
        let mut v = Vec::with_capacity(self.c * h * w);
        for c in 0..self.c {
            for y in 0..h {
                for x in 0..w {
                    v.push(self.at(c, y / 2, x / 2));
                }
            }
        }
        Map { c: self.c, h, w, v }
    }

    pub fn pool(&self) -> Map {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(self.c * h * w);
        for c in 0..self.c {
            for y in 0..h {
                for x in 0..w {
                    let q = [
                        self.at(c, 2 * y, 2 * x),
                        self.at(c, 2 * y, 2 * x + 1),
                        self.at(c, 2 * y + 1, 2 * x),
                        self.at(c, 2 * y + 1, 2 * x + 1),
                    ];
                    v.push(q.iter().cloned().fold(f64::MIN, f64::max));
                }
            }
        }
        Map { c: self.c, h, w, v }
    }
}

/// `sum_k max(w_k,0) x_k / (eps + sum_j max(w_j,0))`.
pub fn fuse(raw: &[f64], maps: &[&Map], eps: f64) -> Map {
    let pos: Vec<f64> = raw.iter().map(|w| if *w > 0.0 { *w } else { 0.0 }).collect();
    let denom = eps + pos.iter().sum::<f64>();
    let n = maps[0].v.len();
    let v = (0..n)
        .map(|i| maps.iter().zip(&pos).map(|(m, w)| w * m.v[i]).sum::<f64>() / denom)
        .collect();
    Map { v, ..maps[0].clone() }
}

/// Raw node weights of a symmetric neck over `lo..=hi`, keyed like the
/// library's parameters.
pub struct NeckWeights {
    pub up: std::collections::BTreeMap<usize, Vec<f64>>,
    pub down: std::collections::BTreeMap<usize, Vec<f64>>,
    pub out: std::collections::BTreeMap<usize, Vec<f64>>,
}

pub struct ScriptedNeck {
    pub up: std::collections::BTreeMap<usize, Map>,
    pub down: std::collections::BTreeMap<usize, Map>,
    pub out: std::collections::BTreeMap<usize, Map>,
}

/// Straight-line evaluation of the symmetric neck with identity node
/// transforms. `p[k]` is level `lo + k`.
pub fn scripted_neck(p: &[Map], lo: usize, w: &NeckWeights, eps: f64) -> ScriptedNeck {
    let hi = lo + p.len() - 1;
    let pl = |l: usize| &p[l - lo];
    let mut up = std::collections::BTreeMap::new();
    let top = fuse(&w.up[&(hi - 1)], &[pl(hi - 1), &pl(hi).up()], eps);
    up.insert(hi - 1, top);
    let mut l = hi - 1;
    while l > lo {
        l -= 1;
        let prev: &Map = &up[&(l + 1)];
        let m = fuse(&w.up[&l], &[pl(l), &pl(l + 1).up(), &prev.up()], eps);
        up.insert(l, m);
    }
    let mut down = std::collections::BTreeMap::new();
    down.insert(lo + 1, fuse(&w.down[&(lo + 1)], &[pl(lo + 1), &pl(lo).pool()], eps));
    for l in lo + 2..=hi {
        let prev: &Map = &down[&(l - 1)];
        let m = fuse(&w.down[&l], &[pl(l), &pl(l - 1).pool(), &prev.pool()], eps);
        down.insert(l, m);
    }
    let mut out = std::collections::BTreeMap::new();
    for l in lo..=hi {
        let m = if l == lo {
            fuse(&w.out[&l], &[pl(l), &up[&l]], eps)
        } else if l == hi {
            fuse(&w.out[&l], &[pl(l), &down[&l]], eps)
        } else {
            fuse(&w.out[&l], &[&up[&l], &down[&l]], eps)
        };
        out.insert(l, m);
    }
    ScriptedNeck { up, down, out }
}

pub mod scenarios;
