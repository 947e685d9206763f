use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::mil::{MilConfig, ModelSpec};
use crate::objective::LossConfig;
use crate::optim::{AdamWConfig, PlateauConfig};
use crate::raa::RaaConfig;

/// Every training knob in one flat record. This is the JSON schema of the
/// `train` config file and of `config.json` in each run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub folds: usize,
    pub seed: u64,
    pub max_epochs: usize,
    /// Patients excluded from every fold.
    pub test_ids: Vec<String>,
    /// Run folds on the rayon pool.
    pub parallel_folds: bool,

    /// `false` trains the vanilla baseline.
    pub raa: bool,
    pub raa_window: usize,
    pub raa_hidden: usize,
    pub raa_include_self: bool,
    pub raa_ln_affine: bool,

    pub attention_hidden: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,

    pub focal_gamma: f64,
    pub label_smoothing: f64,
    /// Inverse-frequency class weights from each fold's training partition;
    /// unit weights when off.
    pub class_weighting: bool,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Joint gradient-norm cap; `null` disables clipping.
    pub grad_clip: Option<f64>,

    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub min_lr: f64,
    pub early_stop_patience: usize,
}

/// Apply `key=value` overrides to any flat serde record. Values are parsed
/// as JSON, falling back to a plain string; unknown keys are rejected.
pub fn apply_overrides<T, S>(base: &T, overrides: &[S]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    S: AsRef<str>,
{
    let mut value = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config("overrides need a record type".into()))?;
    for o in overrides {
        let o = o.as_ref();
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        let key = key.trim();
        if !obj.contains_key(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        obj.insert(key.to_string(), v);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

impl Default for TrainConfig {
    fn default() -> Self {
        let raa = RaaConfig::default();
        let mil = MilConfig::default();
        let loss = LossConfig::default();
        let adam = AdamWConfig::default();
        let plateau = PlateauConfig::default();
        Self {
            folds: 5,
            seed: 0,
            max_epochs: 100,
            test_ids: Vec::new(),
            parallel_folds: false,
            raa: true,
            raa_window: raa.window,
            raa_hidden: raa.hidden,
            raa_include_self: raa.include_self,
            raa_ln_affine: raa.ln_affine,
            attention_hidden: mil.attention_hidden,
            classifier_hidden: mil.classifier_hidden,
            dropout: mil.dropout,
            focal_gamma: loss.gamma,
            label_smoothing: loss.smoothing,
            class_weighting: true,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            grad_clip: None,
            plateau_factor: plateau.factor,
            plateau_patience: plateau.patience,
            plateau_threshold: plateau.threshold,
            min_lr: plateau.min_lr,
            early_stop_patience: 15,
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Apply `key=value` overrides; see [`apply_overrides`].
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let cfg = apply_overrides(self, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("max_epochs and early_stop_patience must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.model_spec(1).mil.validate()?;
        if let Some(r) = self.model_spec(1).raa {
            r.validate()?;
        }
        self.loss().validate()?;
        self.adamw().validate()?;
        self.plateau().validate()
    }

    pub fn model_spec(&self, dim: usize) -> ModelSpec {
        ModelSpec {
            dim,
            raa: self.raa.then_some(RaaConfig {
                window: self.raa_window,
                hidden: self.raa_hidden,
                include_self: self.raa_include_self,
                ln_affine: self.raa_ln_affine,
            }),
            mil: MilConfig {
                attention_hidden: self.attention_hidden,
                classifier_hidden: self.classifier_hidden,
                dropout: self.dropout,
            },
        }
    }

    /// Loss settings with unit class weights.
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            gamma: self.focal_gamma,
            smoothing: self.label_smoothing,
            ..LossConfig::default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            factor: self.plateau_factor,
            patience: self.plateau_patience,
            threshold: self.plateau_threshold,
            min_lr: self.min_lr,
        }
    }
}
