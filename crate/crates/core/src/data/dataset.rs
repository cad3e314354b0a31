//! In-memory image sets: synthetic sets and image directories with a
//! `bbx_gt`-format annotation file.

use std::path::{Path, PathBuf};

use ef_tensor::Tensor;
use rand::Rng;

use super::synth::{synth_scene, SynthSpec};
use super::wider::{format_wider_annotations, parse_wider_annotations, ImageRecord};
use crate::anchors::SIZE_MULTIPLE;
use crate::boxes::{BBox, BoxList};
use crate::error::{Error, Result};

/// Annotation file name inside a dataset directory.
pub const ANNOTATIONS: &str = "annotations.txt";

/// One image with its training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `[1,3,h,w]`, values in `[0,1]`.
    pub image: Tensor,
    /// Non-invalid faces.
    pub gt: Vec<BBox>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.h()
    }

    pub fn width(&self) -> usize {
        self.image.w()
    }

    /// Zero-pads on the right and bottom up to a multiple of the anchor
    /// grid; boxes are unaffected.
    pub fn padded(&self) -> Sample {
        let [_, c, h, w] = self.image.shape();
        let ph = h.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        let pw = w.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        if (ph, pw) == (h, w) {
            return self.clone();
        }
        let mut image = Tensor::zeros([1, c, ph, pw]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    image.set(0, ch, y, x, self.image.at(0, ch, y, x));
                }
            }
        }
        Sample { image, ..self.clone() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `count` synthetic `size`x`size` scenes; scene `i` uses seed
    /// `seed * 1_000_003 + i`.
    pub fn synthetic(count: usize, size: usize, seed: u64) -> Result<Self> {
        let base = SynthSpec {
            height: size,
            width: size,
            ..SynthSpec::default()
        };
        Self::synthetic_with(count, &base, seed)
    }

    pub fn synthetic_with(count: usize, base: &SynthSpec, seed: u64) -> Result<Self> {
        let mut out = Self::default();
        for i in 0..count {
            let spec = SynthSpec {
                seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                ..base.clone()
            };
            let scene = synth_scene(&spec)?;
            let name = format!("synth_{i:04}.png");
            let mut record = ImageRecord::new(name.clone(), scene.gt.clone())?;
            for (a, occ) in record.attrs.iter_mut().zip(&scene.occluded) {
                a.occlusion = u8::from(*occ);
            }
            out.records.push(record);
            out.samples.push(Sample {
                name,
                image: scene.image,
                gt: scene.gt,
            });
        }
        Ok(out)
    }

    /// `synthN` builds N synthetic images; anything else is a directory
    /// holding images and an `annotations.txt`.
    pub fn open(spec: &str, size: usize, seed: u64) -> Result<Self> {
        if let Some(n) = spec.strip_prefix("synth") {
            if let Ok(n) = n.parse::<usize>() {
                return Self::synthetic(n, size, seed);
            }
        }
        Self::load_dir(Path::new(spec))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(ANNOTATIONS)).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", dir.join(ANNOTATIONS).display()),
            ))
        })?;
        let records = parse_wider_annotations(&text)?;
        let mut samples = Vec::with_capacity(records.len());
        for r in &records {
            samples.push(Sample {
                name: r.name().to_string(),
                image: load_image(&dir.join(&r.path))?,
                gt: r.valid_boxes(),
            });
        }
        Ok(Self { samples, records })
    }

    /// Writes PNGs and the annotation file; the inverse of
    /// [`Dataset::load_dir`] up to 8-bit quantization.
    pub fn save_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (s, r) in self.samples.iter().zip(&self.records) {
            let p = dir.join(&r.path);
            save_image(&s.image, &p)?;
            paths.push(p);
        }
        std::fs::write(dir.join(ANNOTATIONS), format_wider_annotations(&self.records))?;
        Ok(paths)
    }
}

/// RGB image file as a `[1,3,h,w]` tensor in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, p[c] as f64 / 255.0);
        }
    }
    Ok(t)
}

pub fn to_rgb8(image: &Tensor) -> image::RgbImage {
    let [_, _, h, w] = image.shape();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            (image.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    to_rgb8(image).save(path)?;
    Ok(())
}

/// Draws box outlines (2 px, red) onto a copy of `image`.
pub fn draw_boxes(image: &Tensor, boxes: &BoxList) -> Tensor {
    let mut out = image.clone();
    let [_, _, h, w] = image.shape();
    let color = [1.0, 0.1, 0.1];
    for b in &boxes.boxes {
        let x1 = (b.x1.floor().max(0.0) as usize).min(w - 1);
        let y1 = (b.y1.floor().max(0.0) as usize).min(h - 1);
        let x2 = (b.x2.ceil() as usize).clamp(1, w) - 1;
        let y2 = (b.y2.ceil() as usize).clamp(1, h) - 1;
        for t in 0..2 {
            for x in x1..=x2 {
                for y in [y1 + t, y2.saturating_sub(t)] {
                    for (c, v) in color.iter().enumerate() {
                        out.set(0, c, y.min(h - 1), x, *v);
                    }
                }
            }
            for y in y1..=y2 {
                for x in [x1 + t, x2.saturating_sub(t)] {
                    for (c, v) in color.iter().enumerate() {
                        out.set(0, c, y, x.min(w - 1), *v);
                    }
                }
            }
        }
    }
    out
}

/// Mirror image and boxes left to right.
pub fn hflip(sample: &Sample) -> Sample {
    let [_, c, h, w] = sample.image.shape();
    let mut image = Tensor::zeros([1, c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                image.set(0, ch, y, x, sample.image.at(0, ch, y, w - 1 - x));
            }
        }
    }
    Sample {
        name: sample.name.clone(),
        image,
        gt: sample.gt.iter().map(|b| b.hflip(w as f64)).collect(),
    }
}

/// Random square crop (60-100% of the short side) resized to
/// `size`x`size` by bilinear sampling. Faces whose centre leaves the crop
/// are dropped; the rest are clipped.
pub fn crop_resize<R: Rng + ?Sized>(sample: &Sample, size: usize, rng: &mut R) -> Sample {
    let [_, _, h, w] = sample.image.shape();
    let short = h.min(w) as f64;
    let side = (short * rng.random_range(0.6..=1.0)).max(1.0);
    let x0 = rng.random_range(0.0..=(w as f64 - side).max(0.0));
    let y0 = rng.random_range(0.0..=(h as f64 - side).max(0.0));
    resample(sample, x0, y0, side, size)
}

/// Resizes the whole (square-cropped from the top-left) image to `size`.
pub fn resize(sample: &Sample, size: usize) -> Sample {
    let [_, _, h, w] = sample.image.shape();
    if h == size && w == size {
        return sample.clone();
    }
    resample(sample, 0.0, 0.0, h.min(w) as f64, size)
}

fn resample(sample: &Sample, x0: f64, y0: f64, side: f64, size: usize) -> Sample {
    let [_, c, h, w] = sample.image.shape();
    let scale = side / size as f64;
    let mut image = Tensor::zeros([1, c, size, size]);
    for y in 0..size {
        let sy = (y0 + (y as f64 + 0.5) * scale - 0.5).clamp(0.0, (h - 1) as f64);
        let (ya, fy) = (sy.floor() as usize, sy.fract());
        let yb = (ya + 1).min(h - 1);
        for x in 0..size {
            let sx = (x0 + (x as f64 + 0.5) * scale - 0.5).clamp(0.0, (w - 1) as f64);
            let (xa, fx) = (sx.floor() as usize, sx.fract());
            let xb = (xa + 1).min(w - 1);
            for ch in 0..c {
                let v = sample.image.at(0, ch, ya, xa) * (1.0 - fx) * (1.0 - fy)
                    + sample.image.at(0, ch, ya, xb) * fx * (1.0 - fy)
                    + sample.image.at(0, ch, yb, xa) * (1.0 - fx) * fy
                    + sample.image.at(0, ch, yb, xb) * fx * fy;
                image.set(0, ch, y, x, v);
            }
        }
    }
    let gt = sample
        .gt
        .iter()
        .filter(|b| {
            let (cx, cy) = b.center();
            cx >= x0 && cx < x0 + side && cy >= y0 && cy < y0 + side
        })
        .map(|b| {
            BBox {
                x1: (b.x1 - x0) / scale,
                y1: (b.y1 - y0) / scale,
                x2: (b.x2 - x0) / scale,
                y2: (b.y2 - y0) / scale,
            }
            .clip(size as f64, size as f64)
        })
        .filter(|b| b.is_valid())
        .collect();
    Sample {
        name: sample.name.clone(),
        image,
        gt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synth_name_parsing() {
        let d = Dataset::open("synth3", 128, 1).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d, Dataset::synthetic(3, 128, 1).unwrap());
    }

    #[test]
    fn flip_twice_is_identity() {
        let d = Dataset::synthetic(2, 128, 5).unwrap();
        for s in &d.samples {
            let back = hflip(&hflip(s));
            assert_eq!(back.image, s.image);
            for (a, b) in back.gt.iter().zip(&s.gt) {
                assert!((a.x1 - b.x1).abs() < 1e-12 && (a.x2 - b.x2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_crop_keeps_boxes() {
        let d = Dataset::synthetic(1, 128, 2).unwrap();
        let s = &d.samples[0];
        let r = resample(s, 0.0, 0.0, 128.0, 128.0 as usize);
        assert_eq!(r.gt, s.gt);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let c = crop_resize(s, 128, &mut rng);
            assert_eq!(c.image.shape(), [1, 3, 128, 128]);
            assert!(c.gt.iter().all(|b| b.is_valid() && b.x2 <= 128.0 && b.y2 <= 128.0));
        }
    }

    #[test]
    fn padding_rounds_up() {
        let s = Sample {
            name: "x".into(),
            image: Tensor::full([1, 3, 100, 130], 0.5),
            gt: vec![],
        };
        let p = s.padded();
        assert_eq!(p.image.shape(), [1, 3, 128, 256]);
        assert_eq!(p.image.at(0, 0, 99, 129), 0.5);
        assert_eq!(p.image.at(0, 0, 100, 129), 0.0);
    }
}
