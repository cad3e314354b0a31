//! Backbone levels, their extension to coarser levels and the per-level
//! channel projection that produces the neck inputs.

use std::collections::BTreeMap;

use ef_tensor::nn::{Conv2dSpec, ConvNormAct};
use ef_tensor::{ParamStore, Shape, Tape, Tensor, Var};
use rand::Rng;

use crate::anchors::{check_image_size, level_stride};
use crate::backbone::Backbone;
use crate::error::{Error, Result};

/// Tape handles keyed by pyramid level.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pyramid {
    maps: BTreeMap<usize, Var>,
}

impl Pyramid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_levels(first: usize, vars: impl IntoIterator<Item = Var>) -> Self {
        Self {
            maps: vars.into_iter().enumerate().map(|(i, v)| (first + i, v)).collect(),
        }
    }

    pub fn insert(&mut self, level: usize, v: Var) {
        self.maps.insert(level, v);
    }

    pub fn get(&self, level: usize) -> Result<Var> {
        self.maps
            .get(&level)
            .copied()
            .ok_or_else(|| Error::Structure(format!("pyramid level {level} is missing")))
    }

    pub fn levels(&self) -> impl Iterator<Item = usize> + '_ {
        self.maps.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.maps.iter().map(|(l, v)| (*l, *v))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn min_level(&self) -> Option<usize> {
        self.maps.keys().next().copied()
    }

    pub fn max_level(&self) -> Option<usize> {
        self.maps.keys().next_back().copied()
    }

    /// Requires exactly the contiguous levels `lo..=hi`.
    pub fn expect_levels(&self, lo: usize, hi: usize) -> Result<()> {
        let want: Vec<usize> = (lo..=hi).collect();
        let have: Vec<usize> = self.levels().collect();
        if want != have {
            return Err(Error::Structure(format!(
                "expected pyramid levels {lo}..={hi}, found {have:?}"
            )));
        }
        Ok(())
    }
}

/// Materialized single-level activation with its placement in the pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub level: usize,
    pub stride: usize,
    pub data: Tensor,
}

impl FeatureMap {
    /// Validates level, spatial size against the image and finiteness.
    pub fn new(level: usize, data: Tensor, image_hw: (usize, usize)) -> Result<Self> {
        let stride = level_stride(level);
        let [_, c, h, w] = data.shape();
        if c == 0 {
            return Err(Error::Structure(format!("level {level} has no channels")));
        }
        if (h, w) != (image_hw.0 / stride, image_hw.1 / stride) {
            return Err(Error::Structure(format!(
                "level {level} is {h}x{w}, expected {}x{}",
                image_hw.0 / stride,
                image_hw.1 / stride
            )));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite(format!("feature map at level {level}")));
        }
        Ok(Self { level, stride, data })
    }

    pub fn height(&self) -> usize {
        self.data.h()
    }

    pub fn width(&self) -> usize {
        self.data.w()
    }

    pub fn channels(&self) -> usize {
        self.data.c()
    }
}

/// Copies every level of a pyramid off the tape.
pub fn snapshot(tape: &Tape, p: &Pyramid, image_hw: (usize, usize)) -> Result<Vec<FeatureMap>> {
    p.iter()
        .map(|(l, v)| FeatureMap::new(l, tape.value(v).clone(), image_hw))
        .collect()
}

/// Runs the backbone and checks the C2..C5 contract.
pub fn extract_levels(tape: &mut Tape, backbone: &dyn Backbone, image: Var) -> Result<Pyramid> {
    let [_, c, h, w] = tape.shape(image);
    if c != 3 {
        return Err(Error::Structure(format!("expected a 3-channel image, got {c}")));
    }
    check_image_size(h, w)?;
    let maps = tape.scoped("backbone", |t| backbone.forward(t, image));
    if maps.len() != 4 {
        return Err(Error::Structure(format!(
            "backbone returned {} levels, expected 4",
            maps.len()
        )));
    }
    let widths = backbone.widths();
    for (i, v) in maps.iter().enumerate() {
        let level = i + 2;
        let s = level_stride(level);
        let want: Shape = [tape.shape(image)[0], widths[i], h / s, w / s];
        if tape.shape(*v) != want {
            return Err(Error::Structure(format!(
                "backbone level {level} has shape {:?}, expected {want:?}",
                tape.shape(*v)
            )));
        }
    }
    Ok(Pyramid::from_levels(2, maps))
}

/// Learnable pieces that turn backbone levels into neck inputs: strided
/// reductions that create the coarser levels directly at pyramid width,
/// and 1x1 projections (with normalization) for the backbone levels.
#[derive(Clone, Debug)]
pub struct PyramidInputs {
    first_level: usize,
    width: usize,
    laterals: Vec<ConvNormAct>,
    extensions: Vec<ConvNormAct>,
}

impl PyramidInputs {
    /// `backbone_widths[i]` is the channel count at level `first_level + i`;
    /// `extra_levels` coarser levels are appended above the backbone.
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        first_level: usize,
        backbone_widths: &[usize],
        extra_levels: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let laterals = backbone_widths
            .iter()
            .enumerate()
            .map(|(i, &cin)| {
                ConvNormAct::build(
                    store,
                    &format!("inputs.lateral{}", first_level + i),
                    Conv2dSpec::new(cin, width, 1),
                    false,
                    rng,
                )
            })
            .collect();
        let top = *backbone_widths.last().expect("at least one backbone level");
        let mut extensions = Vec::with_capacity(extra_levels);
        let mut cin = top;
        for k in 0..extra_levels {
            let level = first_level + backbone_widths.len() + k;
            extensions.push(ConvNormAct::build(
                store,
                &format!("inputs.extend{level}"),
                Conv2dSpec::new(cin, width, 3).stride(2),
                false,
                rng,
            ));
            cin = width;
        }
        Self {
            first_level,
            width,
            laterals,
            extensions,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn backbone_top(&self) -> usize {
        self.first_level + self.laterals.len() - 1
    }

    pub fn top_level(&self) -> usize {
        self.backbone_top() + self.extensions.len()
    }

    /// Appends the extension levels, each a stride-2 reduction of the level
    /// below it. Backbone levels pass through untouched.
    pub fn extend_levels(&self, tape: &mut Tape, levels: &Pyramid) -> Result<Pyramid> {
        levels.expect_levels(self.first_level, self.backbone_top())?;
        if !tape.is_dry() {
            for (l, v) in levels.iter() {
                if !tape.value(v).all_finite() {
                    return Err(Error::NonFinite(format!("backbone level {l}")));
                }
            }
        }
        let mut out = levels.clone();
        let mut prev = levels.get(self.backbone_top())?;
        for (k, ext) in self.extensions.iter().enumerate() {
            let level = self.backbone_top() + 1 + k;
            let [_, _, h, w] = tape.shape(prev);
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Structure(format!(
                    "level {} is {h}x{w}; cannot halve to level {level}",
                    level - 1
                )));
            }
            prev = tape.scoped(format!("extend{level}"), |t| ext.forward(t, prev));
            out.insert(level, prev);
        }
        Ok(out)
    }

    /// Projects backbone levels to pyramid width; extension levels are
    /// already at width and are taken as they are.
    pub fn normalize_inputs(&self, tape: &mut Tape, levels: &Pyramid) -> Result<Pyramid> {
        levels.expect_levels(self.first_level, self.top_level())?;
        let mut out = Pyramid::new();
        for (i, lat) in self.laterals.iter().enumerate() {
            let level = self.first_level + i;
            let v = levels.get(level)?;
            let p = tape.scoped(format!("lateral{level}"), |t| lat.forward(t, v));
            out.insert(level, p);
        }
        for level in self.backbone_top() + 1..=self.top_level() {
            out.insert(level, levels.get(level)?);
        }
        Ok(out)
    }

    pub fn forward(&self, tape: &mut Tape, levels: &Pyramid) -> Result<Pyramid> {
        tape.push_scope("inputs");
        let res = self
            .extend_levels(tape, levels)
            .and_then(|ext| self.normalize_inputs(tape, &ext));
        tape.pop_scope();
        res
    }

    pub fn laterals(&self) -> &[ConvNormAct] {
        &self.laterals
    }

    pub fn extensions(&self) -> &[ConvNormAct] {
        &self.extensions
    }
}
