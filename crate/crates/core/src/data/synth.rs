//! Deterministic synthetic scenes: textured elliptical "faces" on a noisy
//! background, with tight ground-truth boxes.

use ef_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of requested faces.
    pub faces: (usize, usize),
    /// Range of `sqrt(w * h)` in pixels.
    pub scale: (f64, f64),
    /// Range of `w / h`.
    pub aspect: (f64, f64),
    /// Fraction of placed faces that get an occluding patch.
    pub occlusion: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            faces: (1, 4),
            scale: (12.0, 48.0),
            aspect: (1.0 / 3.0, 3.0),
            occlusion: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.height < 8 || self.width < 8 {
            out.push("synthetic images must be at least 8x8".into());
        }
        if self.faces.0 > self.faces.1 {
            out.push("face count range is inverted".into());
        }
        if !(self.scale.0 >= 2.0 && self.scale.0 <= self.scale.1) {
            out.push("scale range must satisfy 2 <= min <= max".into());
        }
        if !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1) {
            out.push("aspect range must satisfy 0 < min <= max".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            out.push("occlusion fraction must lie in [0, 1]".into());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    /// `[1,3,h,w]`, values in `[0,1]`.
    pub image: Tensor,
    pub gt: Vec<BBox>,
    /// Whether each face carries an occluder.
    pub occluded: Vec<bool>,
    pub requested: usize,
}

impl SynthScene {
    /// Faces that could not be placed without overlap.
    pub fn missing(&self) -> usize {
        self.requested - self.gt.len()
    }
}

const PLACEMENT_TRIES: usize = 64;

pub fn synth_scene(spec: &SynthSpec) -> Result<SynthScene> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let mut image = Tensor::zeros([1, 3, h, w]);

    // background: smooth colour ramp plus pixel noise
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.45));
    let ramp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
    for y in 0..h {
        for x in 0..w {
            let t = (x + y) as f64 / (h + w) as f64;
            for c in 0..3 {
                let v = base[c] + ramp[c] * t + rng.random_range(-0.08..0.08);
                image.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }

    let requested = rng.random_range(spec.faces.0..=spec.faces.1);
    let mut gt: Vec<BBox> = Vec::new();
    for _ in 0..requested {
        for _ in 0..PLACEMENT_TRIES {
            let s = rng.random_range(spec.scale.0..=spec.scale.1);
            let a = spec.aspect.0 * (spec.aspect.1 / spec.aspect.0).powf(rng.random::<f64>());
            let (fw, fh) = (s * a.sqrt(), s / a.sqrt());
            if fw + 2.0 > w as f64 || fh + 2.0 > h as f64 {
                continue;
            }
            let cx = rng.random_range(fw / 2.0 + 1.0..=w as f64 - fw / 2.0 - 1.0);
            let cy = rng.random_range(fh / 2.0 + 1.0..=h as f64 - fh / 2.0 - 1.0);
            let cand = BBox::from_center(cx, cy, fw, fh);
            if gt.iter().any(|g| g.intersection(&cand) > 0.0) {
                continue;
            }
            let Some(tight) = ellipse_extent(cx, cy, fw / 2.0, fh / 2.0, h, w) else {
                continue;
            };
            let ratio = tight.width() / tight.height();
            if ratio < spec.aspect.0 - 1e-12 || ratio > spec.aspect.1 + 1e-12 {
                continue;
            }
            render_face(&mut image, cx, cy, fw / 2.0, fh / 2.0, &mut rng);
            gt.push(tight);
            break;
        }
    }
    if gt.len() < requested {
        log::debug!("placed {} of {requested} faces (seed {})", gt.len(), spec.seed);
    }

    // occluders: cover one side of the chosen faces
    let n_occ = (spec.occlusion * gt.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..gt.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut occluded = vec![false; gt.len()];
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    for &i in order.iter().take(n_occ) {
        occluded[i] = true;
        let b = gt[i];
        let frac = rng.random_range(0.3..0.5);
        let (x0, x1) = if rng.random::<bool>() {
            (b.x1, b.x1 + frac * b.width())
        } else {
            (b.x2 - frac * b.width(), b.x2)
        };
        for y in b.y1 as usize..(b.y2.ceil() as usize).min(h) {
            for x in x0.floor() as usize..(x1.ceil() as usize).min(w) {
                for (c, v) in color.iter().enumerate() {
                    image.set(0, c, y, x, *v);
                }
            }
        }
    }
    Ok(SynthScene {
        image,
        gt,
        occluded,
        requested,
    })
}

fn inside(x: usize, y: usize, cx: f64, cy: f64, rx: f64, ry: f64) -> Option<(f64, f64)> {
    let dx = (x as f64 + 0.5 - cx) / rx;
    let dy = (y as f64 + 0.5 - cy) / ry;
    (dx * dx + dy * dy <= 1.0).then_some((dx, dy))
}

fn pixel_range(c: f64, r: f64, n: usize) -> std::ops::Range<usize> {
    (c - r).floor().max(0.0) as usize..((c + r).ceil() as usize).min(n)
}

/// Tight box of the pixels whose centres fall inside the ellipse.
fn ellipse_extent(cx: f64, cy: f64, rx: f64, ry: f64, h: usize, w: usize) -> Option<BBox> {
    let (mut x_lo, mut y_lo, mut x_hi, mut y_hi) = (usize::MAX, usize::MAX, 0, 0);
    for y in pixel_range(cy, ry, h) {
        for x in pixel_range(cx, rx, w) {
            if inside(x, y, cx, cy, rx, ry).is_some() {
                x_lo = x_lo.min(x);
                y_lo = y_lo.min(y);
                x_hi = x_hi.max(x);
                y_hi = y_hi.max(y);
            }
        }
    }
    if x_lo > x_hi || y_lo > y_hi {
        return None;
    }
    BBox::new(x_lo as f64, y_lo as f64, (x_hi + 1) as f64, (y_hi + 1) as f64).ok()
}

/// Paints a filled, shaded ellipse with two dark "eyes" and a "mouth".
fn render_face(image: &mut Tensor, cx: f64, cy: f64, rx: f64, ry: f64, rng: &mut ChaCha8Rng) {
    let [_, _, h, w] = image.shape();
    let skin = [
        rng.random_range(0.65..0.95),
        rng.random_range(0.45..0.7),
        rng.random_range(0.3..0.55),
    ];
    for y in pixel_range(cy, ry, h) {
        for x in pixel_range(cx, rx, w) {
            let Some((dx, dy)) = inside(x, y, cx, cy, rx, ry) else {
                continue;
            };
            let shade = 1.0 - 0.25 * (dx * dx + dy * dy);
            let eye = ((dx.abs() - 0.38).powi(2) + (dy + 0.25).powi(2)) < 0.03;
            let mouth = dy > 0.35 && dy < 0.5 && dx.abs() < 0.35;
            for (c, s) in skin.iter().enumerate() {
                let v = if eye || mouth {
                    0.1
                } else {
                    s * shade + rng.random_range(-0.03..0.03)
                };
                image.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
}
