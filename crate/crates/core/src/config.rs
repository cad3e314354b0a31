//! Model, inference and training settings, and the flat `key=value` text
//! form they are read from and written to.
//!
//! ```text
//! # comments start with '#'
//! backbone=tiny
//! model.width=32
//! loss.gamma=2.0
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::anchors::AnchorConfig;
use crate::backbone::BackboneConfig;
use crate::enhance::MAX_ATTN_DEPTH;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::sbifpn::NeckKind;

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub score_thr: f64,
    pub nms_iou: f64,
    pub topk_per_level: usize,
    pub max_det: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_thr: 0.02,
            nms_iou: 0.5,
            topk_per_level: 1000,
            max_det: 750,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub pyramid_width: usize,
    pub neck: NeckKind,
    pub neck_depth: usize,
    pub rfe: bool,
    pub attn_depth: usize,
    pub head_depth: usize,
    pub head_width: usize,
    pub anchors: AnchorConfig,
    pub loss: LossConfig,
    pub infer: InferConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::from_tag("b5").expect("built-in tag"),
            pyramid_width: 288,
            neck: NeckKind::SBiFpn,
            neck_depth: 1,
            rfe: true,
            attn_depth: 2,
            head_depth: 4,
            head_width: 288,
            anchors: AnchorConfig::default(),
            loss: LossConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

impl DetectorConfig {
    /// Small enough to train on a laptop core in minutes.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            pyramid_width: 32,
            head_depth: 2,
            head_width: 32,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.backbone.problems();
        if self.pyramid_width == 0 {
            out.push("model.width must be positive".into());
        }
        if self.head_width == 0 {
            out.push("head.width must be positive".into());
        }
        if self.neck_depth == 0 {
            out.push("model.neck_depth must be at least 1".into());
        }
        if self.neck == NeckKind::SBiFpn && self.neck_depth != 1 {
            out.push(format!(
                "model.neck_depth must be 1 for sbifpn, got {}",
                self.neck_depth
            ));
        }
        if self.rfe && !self.pyramid_width.is_multiple_of(16) {
            out.push(format!(
                "model.width must be a multiple of 16 when the receptive-field block is on, got {}",
                self.pyramid_width
            ));
        }
        if self.attn_depth > MAX_ATTN_DEPTH {
            out.push(format!(
                "model.attn_depth must be at most {MAX_ATTN_DEPTH}, got {}",
                self.attn_depth
            ));
        }
        out.extend(self.anchors.problems());
        out.extend(self.loss.problems());
        let i = &self.infer;
        if !(0.0..=1.0).contains(&i.score_thr) {
            out.push("infer.score_thr must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&i.nms_iou) {
            out.push("infer.nms_iou must lie in [0, 1]".into());
        }
        if i.topk_per_level == 0 || i.max_det == 0 {
            out.push("infer.topk and infer.max_det must be positive".into());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub image_size: usize,
    pub flip: bool,
    pub crop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            min_lr: 1e-8,
            patience: 3,
            factor: 0.1,
            threshold: 1e-3,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 10,
            max_steps: None,
            image_size: 640,
            flip: true,
            crop: true,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push("train.lr must be positive".into());
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr) {
            out.push("train.min_lr must lie in (0, train.lr]".into());
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            out.push("train.factor must lie in (0, 1)".into());
        }
        if self.batch_size == 0 {
            out.push("train.batch_size must be positive".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(crate::anchors::SIZE_MULTIPLE) {
            out.push(format!(
                "train.image_size must be a positive multiple of {}",
                crate::anchors::SIZE_MULTIPLE
            ));
        }
        out
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Settings {
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

/// Named starting points; `full` is the full-size model.
pub const PRESETS: [&str; 2] = ["full", "tiny"];

impl Settings {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "tiny" => Ok(Self {
                model: DetectorConfig::tiny(),
                train: TrainConfig {
                    lr: 1e-3,
                    image_size: 128,
                    ..TrainConfig::default()
                },
                seed: 0,
            }),
            _ => Err(Error::Config(vec![format!(
                "unknown preset `{name}` (expected full or tiny)"
            )])),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.model.problems();
        out.extend(self.train.problems());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(key, value)?,
            "backbone" => m.backbone = BackboneConfig::from_tag(value)?,
            "backbone.widths" => m.backbone.stage_widths = four(key, value)?,
            "backbone.depths" => m.backbone.stage_depths = four(key, value)?,
            "backbone.tag" => m.backbone.scaling_tag = value.to_string(),
            "model.width" => m.pyramid_width = num(key, value)?,
            "model.neck" => m.neck = value.parse()?,
            "model.neck_depth" => m.neck_depth = num(key, value)?,
            "model.rfe" => m.rfe = flag(key, value)?,
            "model.attn_depth" => {
                let d: i64 = num(key, value)?;
                if d < 0 {
                    return Err(Error::Config(vec![format!("model.attn_depth must be >= 0, got {d}")]));
                }
                m.attn_depth = d as usize;
            }
            "head.depth" => m.head_depth = num(key, value)?,
            "head.width" => m.head_width = num(key, value)?,
            "anchors.sizes" => m.anchors.sizes = list(key, value)?,
            "anchors.t_pos" => m.anchors.t_pos = num(key, value)?,
            "anchors.t_neg" => m.anchors.t_neg = num(key, value)?,
            "loss.lambda" => m.loss.lambda = num(key, value)?,
            "loss.alpha_t" => m.loss.alpha_t = num(key, value)?,
            "loss.gamma" => m.loss.gamma = num(key, value)?,
            "infer.score_thr" => m.infer.score_thr = num(key, value)?,
            "infer.nms_iou" => m.infer.nms_iou = num(key, value)?,
            "infer.topk" => m.infer.topk_per_level = num(key, value)?,
            "infer.max_det" => m.infer.max_det = num(key, value)?,
            "train.lr" => t.lr = num(key, value)?,
            "train.min_lr" => t.min_lr = num(key, value)?,
            "train.patience" => t.patience = num(key, value)?,
            "train.factor" => t.factor = num(key, value)?,
            "train.threshold" => t.threshold = num(key, value)?,
            "train.weight_decay" => t.weight_decay = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.max_steps" => {
                t.max_steps = match value {
                    "none" | "" => None,
                    v => Some(num(key, v)?),
                }
            }
            "train.image_size" => t.image_size = num(key, value)?,
            "train.flip" => t.flip = flag(key, value)?,
            "train.crop" => t.crop = flag(key, value)?,
            _ => return Err(Error::Config(vec![format!("unknown setting `{key}`")])),
        }
        Ok(())
    }

    /// Applies every line of a `key=value` document.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        s.apply_text(text)?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Every setting, one per line, in a form [`Settings::from_text`] reads
    /// back to an equal value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("backbone.widths", join(&m.backbone.stage_widths));
        kv("backbone.depths", join(&m.backbone.stage_depths));
        kv("backbone.tag", m.backbone.scaling_tag.clone());
        kv("model.width", m.pyramid_width.to_string());
        kv("model.neck", m.neck.to_string());
        kv("model.neck_depth", m.neck_depth.to_string());
        kv("model.rfe", m.rfe.to_string());
        kv("model.attn_depth", m.attn_depth.to_string());
        kv("head.depth", m.head_depth.to_string());
        kv("head.width", m.head_width.to_string());
        kv(
            "anchors.sizes",
            m.anchors
                .sizes
                .iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("anchors.t_pos", format!("{:?}", m.anchors.t_pos));
        kv("anchors.t_neg", format!("{:?}", m.anchors.t_neg));
        kv("loss.lambda", format!("{:?}", m.loss.lambda));
        kv("loss.alpha_t", format!("{:?}", m.loss.alpha_t));
        kv("loss.gamma", format!("{:?}", m.loss.gamma));
        kv("infer.score_thr", format!("{:?}", m.infer.score_thr));
        kv("infer.nms_iou", format!("{:?}", m.infer.nms_iou));
        kv("infer.topk", m.infer.topk_per_level.to_string());
        kv("infer.max_det", m.infer.max_det.to_string());
        kv("train.lr", format!("{:?}", t.lr));
        kv("train.min_lr", format!("{:?}", t.min_lr));
        kv("train.patience", t.patience.to_string());
        kv("train.factor", format!("{:?}", t.factor));
        kv("train.threshold", format!("{:?}", t.threshold));
        kv("train.weight_decay", format!("{:?}", t.weight_decay));
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.max_steps", t.max_steps.map_or("none".into(), |v| v.to_string()));
        kv("train.image_size", t.image_size.to_string());
        kv("train.flip", t.flip.to_string());
        kv("train.crop", t.crop.to_string());
        s
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(vec![format!("{key}: cannot parse `{value}`")]))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(vec![format!(
            "{key}: expected true or false, got `{value}`"
        )])),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn four(key: &str, value: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = list(key, value)?;
    v.try_into()
        .map_err(|_| Error::Config(vec![format!("{key}: expected four comma-separated values")]))
}
