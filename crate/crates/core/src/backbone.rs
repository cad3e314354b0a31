//! Stage-based convolutional backbone producing C2..C5.

use ef_tensor::nn::{Conv2dSpec, ConvNormAct};
use ef_tensor::{ParamStore, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Widths and depths of the four strided stages (strides 4, 8, 16, 32).
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_widths: [usize; 4],
    pub stage_depths: [usize; 4],
    pub scaling_tag: String,
}

const BASE_WIDTHS: [usize; 4] = [24, 40, 112, 320];
const BASE_DEPTHS: [usize; 4] = [1, 2, 3, 4];

/// `(width multiplier, depth multiplier)` of the compound-scaled family.
const SCALING: [(&str, f64, f64); 6] = [
    ("b0", 1.0, 1.0),
    ("b1", 1.0, 1.1),
    ("b2", 1.1, 1.2),
    ("b3", 1.2, 1.4),
    ("b4", 1.4, 1.8),
    ("b5", 1.6, 2.2),
];

pub const BACKBONE_TAGS: [&str; 7] = ["tiny", "b0", "b1", "b2", "b3", "b4", "b5"];

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            stage_widths: [16, 24, 40, 64],
            stage_depths: [1, 1, 1, 1],
            scaling_tag: "tiny".into(),
        }
    }

    /// Looks up a named preset (`tiny`, `b0`..`b5`).
    pub fn from_tag(tag: &str) -> Result<Self> {
        if tag == "tiny" {
            return Ok(Self::tiny());
        }
        let (_, wm, dm) = SCALING.iter().find(|(t, _, _)| *t == tag).ok_or_else(|| {
            Error::Config(vec![format!(
                "unknown backbone tag `{tag}` (expected one of {})",
                BACKBONE_TAGS.join(", ")
            )])
        })?;
        Ok(Self {
            stage_widths: BASE_WIDTHS.map(|w| round_width(w, *wm)),
            stage_depths: BASE_DEPTHS.map(|d| (d as f64 * dm).ceil() as usize),
            scaling_tag: tag.into(),
        })
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.stage_widths.contains(&0) {
            out.push("backbone stage widths must be positive".into());
        }
        if self.stage_depths.contains(&0) {
            out.push("backbone stage depths must be positive".into());
        }
        out
    }

    fn stem_width(&self) -> usize {
        (self.stage_widths[0] / 2).max(8)
    }
}

/// Rounds a scaled channel count to a multiple of 8, never dropping more
/// than 10% below the exact value.
fn round_width(base: usize, mult: f64) -> usize {
    let exact = base as f64 * mult;
    let mut w = ((exact + 4.0) as usize / 8 * 8).max(8);
    if (w as f64) < 0.9 * exact {
        w += 8;
    }
    w
}

/// Source of the four backbone levels C2..C5.
///
/// Implementations register their parameters in the detector's
/// [`ParamStore`] at build time. Returned maps must have strides 4, 8, 16
/// and 32 and the channel counts reported by [`Backbone::widths`].
pub trait Backbone: Send + Sync {
    fn widths(&self) -> [usize; 4];

    fn forward(&self, tape: &mut Tape, image: Var) -> Vec<Var>;

    /// Whether every operation runs on the tape and is therefore visible to
    /// the profiler.
    fn is_profiled(&self) -> bool {
        true
    }
}

/// Stem at stride 2, then four stages that each halve the resolution with
/// a strided 3x3 convolution followed by `depth - 1` residual 3x3 layers.
#[derive(Clone, Debug)]
pub struct StageBackbone {
    config: BackboneConfig,
    stem: ConvNormAct,
    stages: Vec<Vec<ConvNormAct>>,
}

impl StageBackbone {
    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let stem_w = config.stem_width();
        let stem = ConvNormAct::build(
            store,
            "backbone.stem",
            Conv2dSpec::new(3, stem_w, 3).stride(2),
            true,
            rng,
        );
        let mut cin = stem_w;
        let mut stages = Vec::new();
        for (s, (&w, &d)) in config.stage_widths.iter().zip(&config.stage_depths).enumerate() {
            let mut layers = vec![ConvNormAct::build(
                store,
                &format!("backbone.stage{}.0", s + 2),
                Conv2dSpec::new(cin, w, 3).stride(2),
                true,
                rng,
            )];
            for i in 1..d {
                layers.push(ConvNormAct::build(
                    store,
                    &format!("backbone.stage{}.{i}", s + 2),
                    Conv2dSpec::new(w, w, 3),
                    true,
                    rng,
                ));
            }
            stages.push(layers);
            cin = w;
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }
}

impl Backbone for StageBackbone {
    fn widths(&self) -> [usize; 4] {
        self.config.stage_widths
    }

    fn forward(&self, tape: &mut Tape, image: Var) -> Vec<Var> {
        let mut x = tape.scoped("stem", |t| self.stem.forward(t, image));
        let mut out = Vec::with_capacity(4);
        for (s, layers) in self.stages.iter().enumerate() {
            tape.push_scope(format!("stage{}", s + 2));
            x = layers[0].forward(tape, x);
            for layer in &layers[1..] {
                let y = layer.forward(tape, x);
                x = tape.add(x, y);
            }
            tape.pop_scope();
            out.push(x);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_scale_monotonically() {
        let mut prev: Option<BackboneConfig> = None;
        for tag in &BACKBONE_TAGS[1..] {
            let c = BackboneConfig::from_tag(tag).unwrap();
            if let Some(p) = prev {
                assert!(c.stage_widths.iter().zip(&p.stage_widths).all(|(a, b)| a >= b));
                assert!(c.stage_depths.iter().zip(&p.stage_depths).all(|(a, b)| a >= b));
                assert_ne!(c, p);
            }
            prev = Some(c);
        }
        assert_eq!(BackboneConfig::from_tag("b0").unwrap().stage_widths, [24, 40, 112, 320]);
    }

    #[test]
    fn unknown_tag() {
        assert!(BackboneConfig::from_tag("b9").is_err());
    }

    #[test]
    fn zero_width_rejected() {
        let mut c = BackboneConfig::tiny();
        c.stage_widths[2] = 0;
        let mut store = ParamStore::new();
        let mut rng = rand::rng();
        assert!(StageBackbone::build(&mut store, &c, &mut rng).is_err());
    }
}
