//! Class-weighted focal loss on a label-smoothed target.
//!
//! ```text
//! t_c  = (1 - eps) [c = y] + eps / 4
//! loss = sum_c w_c t_c (1 - p_c)^gamma (-log p_c),   p = softmax(logits)
//! ```

use serde::{Deserialize, Serialize};

use crate::dataio::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::{log_softmax_in_place, Graph, NodeId, Segments, Tensor};

pub const MIN_CLASS_WEIGHT: f64 = 0.1;
pub const MAX_CLASS_WEIGHT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Focusing exponent.
    pub gamma: f64,
    pub smoothing: f64,
    pub class_weights: [f64; NUM_CLASSES],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            smoothing: 0.05,
            class_weights: [1.0; NUM_CLASSES],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!(
                "smoothing must lie in [0, 1), got {}",
                self.smoothing
            )));
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config(format!(
                "class weights must be positive, got {:?}",
                self.class_weights
            )));
        }
        Ok(())
    }

    /// Smoothed target distribution for `label`.
    pub fn target(&self, label: usize) -> Result<[f64; NUM_CLASSES]> {
        if label >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange(label, NUM_CLASSES));
        }
        let mut t = [self.smoothing / NUM_CLASSES as f64; NUM_CLASSES];
        t[label] += 1.0 - self.smoothing;
        Ok(t)
    }

    /// Per-class coefficients `w_c t_c`.
    fn coefficients(&self, label: usize) -> Result<[f64; NUM_CLASSES]> {
        let mut t = self.target(label)?;
        t.iter_mut().zip(&self.class_weights).for_each(|(t, w)| *t *= w);
        Ok(t)
    }
}

pub fn focal_loss(logits: &[f64; NUM_CLASSES], label: usize, cfg: &LossConfig) -> Result<f64> {
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("logit {i} is {}", logits[i])));
    }
    let coef = cfg.coefficients(label)?;
    let mut logp = *logits;
    log_softmax_in_place(&mut logp);
    Ok(logp
        .iter()
        .zip(coef)
        .map(|(&lp, k)| k * (1.0 - lp.exp()).powf(cfg.gamma) * -lp)
        .sum())
}

/// Append the loss for a `[1, 4]` logits node to `g`.
pub fn focal_loss_graph(g: &mut Graph, logits: NodeId, label: usize, cfg: &LossConfig) -> Result<NodeId> {
    let coef = cfg.coefficients(label)?;
    let neg_coef = g.constant(Tensor::row(&coef.map(|k| -k)));
    let logp = g.log_softmax(logits, Segments::single(NUM_CLASSES));
    let mut terms = g.mul(logp, neg_coef);
    if cfg.gamma != 0.0 {
        let p = g.exp(logp);
        let q = g.affine(p, -1.0, 1.0);
        let focus = g.pow(q, cfg.gamma);
        terms = g.mul(terms, focus);
    }
    Ok(g.sum(terms))
}

/// Inverse-frequency weights `total / (4 count_c)`, clipped to
/// `[MIN_CLASS_WEIGHT, MAX_CLASS_WEIGHT]`; absent classes get 1.
pub fn class_weights_from_counts(counts: &[usize; NUM_CLASSES]) -> Result<[f64; NUM_CLASSES]> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("class weights need at least one labelled bag".into()));
    }
    Ok(counts.map(|n| {
        if n == 0 {
            1.0
        } else {
            (total as f64 / (NUM_CLASSES * n) as f64).clamp(MIN_CLASS_WEIGHT, MAX_CLASS_WEIGHT)
        }
    }))
}
