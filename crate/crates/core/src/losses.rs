//! Detection loss: focal classification plus smooth-L1 box regression,
//! both normalized by the number of positive anchors (floored at one).

use crate::error::{Error, Result};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before taking logs.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha_t: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha_t: 0.25,
            gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            out.push(format!("loss.lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.alpha_t > 0.0 && self.alpha_t < 1.0) {
            out.push(format!("loss.alpha_t must lie in (0, 1), got {}", self.alpha_t));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            out.push(format!("loss.gamma must be >= 0, got {}", self.gamma));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub num_pos: usize,
}

/// Unreduced focal term for one anchor.
pub fn focal_term(p: f64, y: u8, cfg: &LossConfig) -> Result<f64> {
    let (pt, alpha) = pt_alpha(p, y, cfg)?;
    Ok(-alpha * (1.0 - pt).powf(cfg.gamma) * pt.ln())
}

/// Derivative of [`focal_term`] with respect to `p` (zero where the clamp
/// is active).
pub fn focal_term_grad(p: f64, y: u8, cfg: &LossConfig) -> Result<f64> {
    let (pt, alpha) = pt_alpha(p, y, cfg)?;
    if p <= P_CLAMP || p >= 1.0 - P_CLAMP {
        return Ok(0.0);
    }
    let q = 1.0 - pt;
    let mut d_pt = -alpha * q.powf(cfg.gamma) / pt;
    if cfg.gamma != 0.0 {
        d_pt += alpha * cfg.gamma * q.powf(cfg.gamma - 1.0) * pt.ln();
    }
    Ok(if y == 1 { d_pt } else { -d_pt })
}

fn pt_alpha(p: f64, y: u8, cfg: &LossConfig) -> Result<(f64, f64)> {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    match y {
        1 => Ok((p, cfg.alpha_t)),
        0 => Ok((1.0 - p, 1.0 - cfg.alpha_t)),
        other => Err(Error::InvalidLabel(other)),
    }
}

/// Summed focal loss divided by `max(#positives, 1)`. Ignored anchors must
/// be removed by the caller.
pub fn focal_loss(p: &[f64], y: &[u8], cfg: &LossConfig) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Structure(format!(
            "{} probabilities for {} labels",
            p.len(),
            y.len()
        )));
    }
    let mut sum = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        sum += focal_term(pi, yi, cfg)?;
    }
    let num_pos = y.iter().filter(|&&v| v == 1).count();
    Ok(sum / num_pos.max(1) as f64)
}

/// Focal term and its derivative with respect to the logit `z`, where
/// `p = sigmoid(z)`.
pub fn focal_logit(z: f64, y: u8, cfg: &LossConfig) -> Result<(f64, f64)> {
    let p = sigmoid(z);
    let loss = focal_term(p, y, cfg)?;
    let dp = focal_term_grad(p, y, cfg)?;
    Ok((loss, dp * p * (1.0 - p)))
}

pub fn smooth_l1_scalar(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Smooth-L1 over the four delta components of every positive anchor,
/// divided by `max(#positives, 1)`.
pub fn smooth_l1(pred: &[[f64; 4]], target: &[[f64; 4]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Structure(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| smooth_l1_scalar(a - b)))
        .sum();
    Ok(sum / pred.len().max(1) as f64)
}

/// Combines already-normalized components.
pub fn total_loss(cls: f64, reg: f64, num_pos: usize, cfg: &LossConfig) -> Result<LossReport> {
    if !cls.is_finite() {
        return Err(Error::NonFinite(format!("classification head loss ({cls})")));
    }
    if !reg.is_finite() {
        return Err(Error::NonFinite(format!("regression head loss ({reg})")));
    }
    Ok(LossReport {
        cls_loss: cls,
        reg_loss: reg,
        total: cls + cfg.lambda * reg,
        num_pos,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
