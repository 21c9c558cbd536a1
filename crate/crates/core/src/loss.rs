//! Cross-entropy and uncertainty-weighted losses over label fields.
//!
//! All logarithms are natural, so losses are in nats. Losses are sums over
//! pixels unless `normalize` is set.

use crate::error::{Error, Result};
use crate::lattice::{check_simplex, LabelField};

/// Predicted probabilities are clamped to at least this inside logarithms.
pub const Q_FLOOR: f64 = 1e-12;
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Floor for `ln p` in entropy derivatives, where `p` may underflow to zero.
const P_LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_pixel: Vec<f64>,
    pub weights: Vec<f64>,
    pub dl_dp: Vec<f64>,
    pub dl_dq: Vec<f64>,
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_simplex(0, p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// `sum_x H(P(x), Q(x))`.
pub fn cross_entropy_loss(p: &LabelField, q: &LabelField) -> Result<LossReport> {
    check_shapes(p, q)?;
    let k = p.num_classes();
    let n = p.num_pixels();
    let mut report = LossReport {
        total: 0.0,
        per_pixel: Vec::with_capacity(n),
        weights: vec![1.0; n],
        dl_dp: Vec::with_capacity(n * k),
        dl_dq: Vec::with_capacity(n * k),
    };
    for (pr, qr) in p.rows().zip(q.rows()) {
        let mut ce = 0.0;
        for (&pl, &ql) in pr.iter().zip(qr) {
            let lq = ql.max(Q_FLOOR).ln();
            ce -= pl * lq;
            report.dl_dp.push(-lq);
            report.dl_dq.push(if ql >= Q_FLOOR { -pl / ql } else { 0.0 });
        }
        report.per_pixel.push(ce);
    }
    report.total = report.per_pixel.iter().sum();
    Ok(report)
}

/// Dense cross-entropy against a hard labeling, `sum_x -ln Q(x, y(x))`.
pub fn dense_cross_entropy(labels: &[usize], q: &LabelField) -> Result<f64> {
    if labels.len() != q.num_pixels() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} pixels",
            labels.len(),
            q.num_pixels()
        )));
    }
    labels
        .iter()
        .zip(q.rows())
        .map(|(&y, row)| {
            row.get(y)
                .map(|v| -v.max(Q_FLOOR).ln())
                .ok_or_else(|| Error::InvalidParameter(format!("class {y} out of range")))
        })
        .sum()
}

/// `w(x) = exp(-alpha H(P(x)))`, zero at `unreached` pixels.
pub fn uncertainty_weights(p: &LabelField, alpha: f64, unreached: &[usize]) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let mut w: Vec<f64> = p
        .rows()
        .map(|row| (-alpha * entropy_unchecked(row)).exp())
        .collect();
    for &i in unreached {
        if let Some(v) = w.get_mut(i) {
            *v = 0.0;
        }
    }
    Ok(w)
}

/// The uncertainty-weighted loss `sum_x w(x) KL(P(x) || Q(x)) + H(P(x))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedLoss {
    pub alpha: f64,
    /// Differentiate through `w` as well; otherwise `w` is held constant.
    pub flow_through: bool,
    /// Divide by the pixel count.
    pub normalize: bool,
}

impl Default for WeightedLoss {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            flow_through: false,
            normalize: false,
        }
    }
}

impl WeightedLoss {
    pub fn new(alpha: f64, flow_through: bool) -> Self {
        Self {
            alpha,
            flow_through,
            normalize: false,
        }
    }

    pub fn evaluate(&self, p: &LabelField, q: &LabelField, unreached: &[usize]) -> Result<LossReport> {
        check_alpha(self.alpha)?;
        check_shapes(p, q)?;
        let k = p.num_classes();
        let n = p.num_pixels();
        let mut zero_weight = vec![false; n];
        for &i in unreached {
            if i >= n {
                return Err(Error::ShapeMismatch(format!("unreached pixel {i} out of range")));
            }
            zero_weight[i] = true;
        }
        let scale = if self.normalize { 1.0 / n as f64 } else { 1.0 };
        let mut report = LossReport {
            total: 0.0,
            per_pixel: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
            dl_dp: Vec::with_capacity(n * k),
            dl_dq: Vec::with_capacity(n * k),
        };
        for (i, (pr, qr)) in p.rows().zip(q.rows()).enumerate() {
            let terms = weighted_pixel(
                pr,
                qr,
                self.alpha,
                self.flow_through,
                zero_weight[i].then_some(0.0),
            );
            report.per_pixel.push(scale * terms.loss);
            report.weights.push(terms.weight);
            report.dl_dp.extend(terms.dl_dp.iter().map(|g| scale * g));
            report.dl_dq.extend(terms.dl_dq.iter().map(|g| scale * g));
        }
        report.total = report.per_pixel.iter().sum();
        Ok(report)
    }
}

/// Convenience wrapper with no unreached pixels and no normalization.
pub fn weighted_loss(p: &LabelField, q: &LabelField, alpha: f64, flow_through: bool) -> Result<LossReport> {
    WeightedLoss::new(alpha, flow_through).evaluate(p, q, &[])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelTerms {
    pub loss: f64,
    pub weight: f64,
    pub dl_dp: Vec<f64>,
    pub dl_dq: Vec<f64>,
}

/// Loss and partials at one pixel. `p` is treated as unconstrained so the
/// partials can be checked coordinate by coordinate; `weight` overrides the
/// entropy weight (and removes it from the gradient).
pub fn weighted_pixel(
    p: &[f64],
    q: &[f64],
    alpha: f64,
    flow_through: bool,
    weight: Option<f64>,
) -> PixelTerms {
    let h = entropy_unchecked(p);
    let log_q: Vec<f64> = q.iter().map(|v| v.max(Q_FLOOR).ln()).collect();
    let ce: f64 = -p.iter().zip(&log_q).map(|(a, b)| a * b).sum::<f64>();
    let kl = ce - h;
    let w = weight.unwrap_or_else(|| (-alpha * h).exp());
    let through_weight = flow_through && weight.is_none();

    let mut dl_dp = Vec::with_capacity(p.len());
    let mut dl_dq = Vec::with_capacity(p.len());
    for ((&pl, &ql), &lq) in p.iter().zip(q).zip(&log_q) {
        let dh = -(pl.max(P_LOG_FLOOR).ln() + 1.0);
        let dkl = -lq - dh;
        let mut g = w * dkl + dh;
        if through_weight {
            g += kl * (-alpha * w * dh);
        }
        dl_dp.push(g);
        dl_dq.push(if ql >= Q_FLOOR { -w * pl / ql } else { 0.0 });
    }
    PixelTerms {
        loss: w * kl + h,
        weight: w,
        dl_dp,
        dl_dq,
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(())
}

fn check_shapes(p: &LabelField, q: &LabelField) -> Result<()> {
    if p.num_classes() != q.num_classes() || p.num_pixels() != q.num_pixels() {
        return Err(Error::ShapeMismatch(format!(
            "P is {}x{}, Q is {}x{}",
            p.num_pixels(),
            p.num_classes(),
            q.num_pixels(),
            q.num_classes()
        )));
    }
    Ok(())
}
