//! AdamW, reduce-on-plateau and early stopping.
//!
//! Both schedulers maximize their metric. An epoch counts as an improvement
//! only when `metric > best + threshold`; ties at the boundary do not count.
//! The patience counter fires when it *reaches* `patience`, so a flat metric
//! first triggers at epoch `patience + 1`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid AdamW settings {self:?}")));
        }
        Ok(())
    }
}

/// Moments are created lazily, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    /// One update at learning rate `lr`. Every gradient is checked before any
    /// parameter is touched, so a rejected step leaves the state unchanged.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            let g = grads
                .get(*name)
                .ok_or_else(|| Error::Invalid(format!("no gradient for parameter `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::Invalid(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(index) = g.first_non_finite() {
                return Err(Error::NonFiniteGradient {
                    name: name.to_string(),
                    index,
                });
            }
        }

        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        let decay = 1.0 - lr * c.weight_decay;
        for (name, p) in params {
            let g = &grads[name];
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((theta, &g), (m, v)) in it {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta *= decay;
                *theta -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Rescale gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 5,
            threshold: 1e-4,
            min_lr: 1e-6,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) || self.patience == 0 || self.threshold < 0.0 || self.min_lr < 0.0
        {
            return Err(Error::Config(format!("invalid plateau settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PlateauState {
    pub config: PlateauConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub since_improvement: usize,
}

impl PlateauState {
    pub fn new(config: PlateauConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            best: None,
            since_improvement: 0,
        }
    }

    /// Record an epoch's metric and return the learning rate to use next.
    pub fn update(&mut self, metric: f64) -> f64 {
        if improves(self.best, metric, self.config.threshold) {
            self.best = Some(metric);
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
            if self.since_improvement >= self.config.patience {
                let reduced = (self.lr * self.config.factor).max(self.config.min_lr);
                if reduced < self.lr {
                    log::info!("plateau: lr {} -> {}", self.lr, reduced);
                }
                self.lr = reduced.min(self.lr);
                self.since_improvement = 0;
            }
        }
        self.lr
    }
}

fn improves(best: Option<f64>, metric: f64, threshold: f64) -> bool {
    match best {
        None => metric.is_finite(),
        Some(b) => metric > b + threshold,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// Keep training; `improved` marks a new best epoch.
    Continue {
        improved: bool,
    },
    Stop,
}

#[derive(Clone, Debug)]
pub struct EarlyStopState {
    pub patience: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    /// 1-based epoch holding the best metric.
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize, threshold: f64) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("early-stop patience must be >= 1".into()));
        }
        Ok(Self {
            patience,
            threshold,
            best: None,
            best_epoch: None,
            since_improvement: 0,
        })
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if improves(self.best, metric, self.threshold) {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
            return StopDecision::Continue { improved: true };
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue { improved: false }
        }
    }
}
