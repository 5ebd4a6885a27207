//! Training configuration, loadable from TOML or JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::losses::{default_lambda, FeatureLossConfig};
use crate::params::AdamConfig;
use crate::sampler::SamplerConfig;
use crate::unet::UNetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    /// Feature-loss weight; `None` picks 100 for one layer and 10 otherwise.
    pub lambda: Option<f64>,
    /// Number of encoder feature layers `|F|` used by the feature loss.
    pub feature_layers: usize,
    pub seed: u64,
    /// Fraction of labelled training volumes used.
    pub label_fraction: f64,
    /// Fraction of the labelled volumes held out for checkpoint selection.
    pub val_fraction: f64,
    /// Evaluate and checkpoint every this many epochs.
    pub eval_every: usize,
    /// Stop early once the selection DSC reaches this value.
    pub stop_at_dsc: Option<f64>,
    /// Train on random crops of this shape instead of whole volumes.
    pub patch_shape: Option<[usize; 3]>,
    /// Label shown in reports; derived from the switches when unset.
    pub run_label: Option<String>,
    pub unet: UNetConfig,
    pub heads: HeadConfig,
    pub sampler: SamplerConfig,
    pub feature_loss: FeatureLossConfig,
    pub preprocess: PreprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 500,
            base_lr: 1e-3,
            poly_power: 0.9,
            weight_decay: 1e-5,
            lambda: None,
            feature_layers: 3,
            seed: 0,
            label_fraction: 1.0,
            val_fraction: 0.0,
            eval_every: 1,
            stop_at_dsc: None,
            patch_shape: None,
            run_label: None,
            unet: UNetConfig::default(),
            heads: HeadConfig::default(),
            sampler: SamplerConfig::default(),
            feature_loss: FeatureLossConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small configuration for CPU-scale synthetic runs.
    pub fn desk(shape: [usize; 3], n_classes: usize) -> Self {
        Self {
            batch_size: 2,
            epochs: 60,
            unet: UNetConfig::desk(n_classes),
            preprocess: PreprocessConfig {
                target_shape: shape,
                ..Default::default()
            },
            ..Self::default()
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| default_lambda(self.feature_layers))
    }

    /// Whether the feature branch participates in training.
    pub fn uses_features(&self) -> bool {
        self.lambda() > 0.0 && self.feature_layers > 0
    }

    pub fn method_label(&self) -> String {
        if let Some(l) = &self.run_label {
            return l.clone();
        }
        if !self.uses_features() {
            "3D U-Net".into()
        } else if !self.feature_loss.weighted {
            "feature (w/o weight)".into()
        } else {
            format!("feature ({})", self.feature_layers)
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return bad("batch_size, epochs and eval_every must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.poly_power.is_nan() || self.poly_power <= 0.0 {
            return bad(format!("poly_power {} must be positive", self.poly_power));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda {l} must be finite and non-negative"));
            }
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!("label_fraction {} outside (0, 1]", self.label_fraction));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        self.unet.validate()?;
        if self.feature_layers > self.unet.depth {
            return bad(format!(
                "feature_layers {} exceeds encoder depth {}",
                self.feature_layers, self.unet.depth
            ));
        }
        self.heads.validate()?;
        self.sampler.validate()?;
        self.preprocess.validate()?;
        let m = self.unet.shape_multiple();
        if self.preprocess.target_shape.iter().any(|n| n % m != 0) {
            return bad(format!(
                "target shape {:?} is not divisible by {m}",
                self.preprocess.target_shape
            ));
        }
        if let Some(p) = self.patch_shape {
            if p.iter().any(|&n| n == 0 || n % m != 0) {
                return bad(format!("patch shape {p:?} is not a positive multiple of {m}"));
            }
            if p.iter().zip(&self.preprocess.target_shape).any(|(a, b)| a > b) {
                return bad(format!("patch shape {p:?} exceeds the volume shape"));
            }
        }
        Ok(())
    }

    /// Reads a `.toml` or `.json` file; other extensions are tried as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Polynomial learning-rate decay `base_lr * (1 - epoch / total)^power`.
pub fn poly_lr(epoch: usize, total_epochs: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(Error::InvalidInput(format!("epoch {epoch} outside 0..={total_epochs}")));
    }
    Ok(base_lr * (1.0 - epoch as f64 / total_epochs as f64).powf(power))
}
