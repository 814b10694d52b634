//! Smooth-L1 box regression and focal classification losses with analytic
//! gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Box7, Point3};
use crate::targets::{encode, Assignment, Label, RegressionTarget};

fn default_sigma() -> f64 {
    3.0
}

fn default_alpha() -> f64 {
    0.25
}

fn default_gamma() -> f64 {
    2.0
}

fn default_wrap() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Wrap the heading residual into (−π, π] before the smooth-L1 term.
    #[serde(default = "default_wrap")]
    pub wrap_heading: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sigma: default_sigma(),
            alpha: default_alpha(),
            gamma: default_gamma(),
            wrap_heading: default_wrap(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// A loss value with its gradient with respect to the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Quadratic below `1/σ²`, linear above; returns `(value, d value / d d)`.
fn smooth_l1_parts(d: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    if d.abs() < 1.0 / s2 {
        (0.5 * d * d * s2, d * s2)
    } else {
        (d.abs() - 0.5 / s2, d.signum())
    }
}

pub fn smooth_l1(d: f64, sigma: f64) -> LossValue {
    let (value, g) = smooth_l1_parts(d, sigma);
    LossValue {
        value,
        gradient: vec![g],
    }
}

/// Sum of seven smooth-L1 terms comparing `pred` at reference `r` with `gt`.
///
/// The gradient is ordered like [`RegressionTarget::to_array`].
pub fn regression_loss(
    pred: &RegressionTarget,
    r: &Point3,
    gt: &Box7,
    cfg: &LossConfig,
) -> LossValue {
    let mut heading = pred.theta_p - gt.heading;
    if cfg.wrap_heading {
        heading = wrap_angle(heading);
    }
    // residuals of the form (something − Δ): d/dΔ = −1
    let residuals = [
        r.x - gt.cx - pred.dx,
        r.y - gt.cy - pred.dy,
        r.z - gt.cz - pred.dz,
        gt.l.ln() - pred.dl,
        gt.w.ln() - pred.dw,
        gt.h.ln() - pred.dh,
    ];
    let mut value = 0.0;
    let mut gradient = vec![0.0; 7];
    for (g, d) in gradient.iter_mut().zip(residuals) {
        let (v, dv) = smooth_l1_parts(d, cfg.sigma);
        value += v;
        *g = -dv;
    }
    let (v, dv) = smooth_l1_parts(heading, cfg.sigma);
    value += v;
    gradient[6] = dv;
    LossValue { value, gradient }
}

// γ·x^(γ−1), with the γ = 0 case pinned to 0 rather than 0·∞.
fn dpow(x: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        0.0
    } else {
        gamma * x.powf(gamma - 1.0)
    }
}

/// Focal loss on a probability `p` of the unit being positive.
///
/// Positives: `−α(1−p)^γ log p`. Negatives: `−(1−α) p^γ log(1−p)`.
/// The gradient is `[d loss / d p]`.
pub fn focal_loss(p: f64, is_positive: bool, cfg: &LossConfig) -> Result<LossValue> {
    let (alpha, gamma) = (cfg.alpha, cfg.gamma);
    if is_positive {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Domain {
                value: p,
                reason: "positive units need 0 < p <= 1",
            });
        }
        let q = 1.0 - p;
        let log_p = p.ln();
        let value = -alpha * q.powf(gamma) * log_p;
        let grad = alpha * dpow(q, gamma) * log_p - alpha * q.powf(gamma) / p;
        Ok(LossValue {
            value,
            gradient: vec![grad],
        })
    } else {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain {
                value: p,
                reason: "negative units need 0 <= p < 1",
            });
        }
        let q = 1.0 - p;
        let log_q = q.ln();
        let value = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let grad = -(1.0 - alpha) * (dpow(p, gamma) * log_q - p.powf(gamma) / q);
        Ok(LossValue {
            value,
            gradient: vec![grad],
        })
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// [`focal_loss`] evaluated on a logit `z` with `p = σ(z)`, stable for
/// saturated logits. The gradient is `[d loss / d z]`.
pub fn focal_loss_logit(z: f64, is_positive: bool, cfg: &LossConfig) -> LossValue {
    let (alpha, gamma) = (cfg.alpha, cfg.gamma);
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if is_positive {
        // log p = −softplus(−z), dp/dz = p·q
        let log_p = -softplus(-z);
        let value = alpha * q.powf(gamma) * softplus(-z);
        // d/dz [−α q^γ log p] = α γ q^(γ−1) (p q) log p − α q^γ q
        let grad = alpha * dpow(q, gamma) * p * q * log_p - alpha * q.powf(gamma) * q;
        LossValue {
            value,
            gradient: vec![grad],
        }
    } else {
        let log_q = -softplus(z);
        let value = (1.0 - alpha) * p.powf(gamma) * softplus(z);
        let grad = -(1.0 - alpha) * (dpow(p, gamma) * p * q * log_q - p.powf(gamma) * p);
        LossValue {
            value,
            gradient: vec![grad],
        }
    }
}

/// Per-unit network output: positive-class probability and box regression.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UnitPrediction {
    pub score: f64,
    pub target: RegressionTarget,
}

/// Classification loss averaged over non-ignored units plus regression loss
/// averaged over positive units.
///
/// The gradient has 8 entries per unit: `d/d score` followed by the seven
/// regression components. Ignored units get zeros.
pub fn batch_loss(
    assignment: &Assignment,
    preds: &[UnitPrediction],
    gt: &[Box7],
    cfg: &LossConfig,
) -> Result<LossValue> {
    if preds.len() != assignment.len() {
        return Err(Error::mismatch(
            format!("{} predictions", assignment.len()),
            preds.len(),
        ));
    }
    let n_cls = assignment
        .labels
        .iter()
        .filter(|l| !matches!(l, Label::Ignore))
        .count();
    let n_pos = assignment.positives().count();

    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut gradient = vec![0.0; 8 * preds.len()];
    // index-ascending accumulation keeps the sums bit-deterministic
    for (i, (label, pred)) in assignment.labels.iter().zip(preds).enumerate() {
        let g = &mut gradient[8 * i..8 * i + 8];
        match *label {
            Label::Ignore => {}
            Label::Negative => {
                let c = focal_loss(pred.score, false, cfg)?;
                cls_sum += c.value;
                g[0] = c.gradient[0] / n_cls as f64;
            }
            Label::Positive(gi) => {
                let b = gt.get(gi).ok_or_else(|| {
                    Error::mismatch(format!("ground-truth index < {}", gt.len()), gi)
                })?;
                let c = focal_loss(pred.score, true, cfg)?;
                cls_sum += c.value;
                g[0] = c.gradient[0] / n_cls as f64;
                let r = regression_loss(&pred.target, &assignment.refs[i], b, cfg);
                reg_sum += r.value;
                for (dst, src) in g[1..].iter_mut().zip(&r.gradient) {
                    *dst = src / n_pos as f64;
                }
            }
        }
    }
    let cls = if n_cls > 0 {
        cls_sum / n_cls as f64
    } else {
        0.0
    };
    let reg = if n_pos > 0 {
        reg_sum / n_pos as f64
    } else {
        0.0
    };
    Ok(LossValue {
        value: cls + reg,
        gradient,
    })
}

/// Predictions that make every loss term vanish: probability 1 with the exact
/// encoding on positives, probability 0 elsewhere.
pub fn perfect_predictions(assignment: &Assignment, gt: &[Box7]) -> Vec<UnitPrediction> {
    assignment
        .labels
        .iter()
        .zip(&assignment.refs)
        .map(|(l, r)| match l {
            Label::Positive(g) => UnitPrediction {
                score: 1.0,
                target: encode(&gt[*g], r),
            },
            _ => UnitPrediction::default(),
        })
        .collect()
}
