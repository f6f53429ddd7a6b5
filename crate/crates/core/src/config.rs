//! Training and evaluation configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PlidError, Result};
use crate::objective::{BetaPrior, LossSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    /// Descriptions per class.
    #[serde(rename = "M")]
    pub descriptions_per_class: usize,
    /// Augmented views per image.
    #[serde(rename = "N")]
    pub views_per_image: usize,
    pub beta_prior: (f64, f64),
    pub tau: f64,
    pub primitive_loss_weight: f64,
    pub attention_dropout: f64,
    pub embed_dim: usize,
    /// Above this many classes the compositional margins share covariance by object.
    pub dense_cov_limit: usize,
    pub context_len: usize,
    pub recompute_every_step: bool,
    pub use_lid_margins: bool,
    pub use_vlpd: bool,
    pub share_covariance: bool,
    pub encoder_seed: u64,
    pub view_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-5,
            weight_decay: 2e-5,
            epochs: 20,
            batch_size: 64,
            lr_decay_factor: 0.5,
            lr_decay_every: 5,
            seed: 0,
            descriptions_per_class: 64,
            views_per_image: 8,
            beta_prior: (1.0, 9.0),
            tau: 0.01,
            primitive_loss_weight: 0.1,
            attention_dropout: 0.5,
            embed_dim: 64,
            dense_cov_limit: 512,
            context_len: crate::lid::DEFAULT_CONTEXT_LEN,
            recompute_every_step: false,
            use_lid_margins: true,
            use_vlpd: true,
            share_covariance: false,
            encoder_seed: crate::encoder::DEFAULT_ENCODER_SEED,
            view_noise: crate::encoder::DEFAULT_VIEW_NOISE,
        }
    }
}

impl TrainConfig {
    /// Settings sized for the synthetic 5 x 6 fixture on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            base_lr: 2e-3,
            batch_size: 16,
            descriptions_per_class: 16,
            views_per_image: 4,
            tau: 0.05,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("tau", self.tau),
            ("beta_prior.a", self.beta_prior.0),
            ("beta_prior.b", self.beta_prior.1),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PlidError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("primitive_loss_weight", self.primitive_loss_weight),
            ("view_noise", self.view_noise),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PlidError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(PlidError::Config(format!(
                "attention_dropout must be in [0, 1), got {}",
                self.attention_dropout
            )));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("lr_decay_every", self.lr_decay_every),
            ("M", self.descriptions_per_class),
            ("embed_dim", self.embed_dim),
            ("dense_cov_limit", self.dense_cov_limit),
            ("context_len", self.context_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(PlidError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| PlidError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PlidError::Load {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            PlidError::Config(m) => PlidError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn beta(&self) -> BetaPrior {
        BetaPrior {
            a: self.beta_prior.0,
            b: self.beta_prior.1,
        }
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            tau: self.tau,
            state_weight: self.primitive_loss_weight,
            object_weight: self.primitive_loss_weight,
            use_margins: self.use_lid_margins,
            use_decomposition: self.use_vlpd,
        }
    }

    /// Whether compositional margins use object-shared covariance for `num_classes`.
    pub fn shares_covariance(&self, num_classes: usize) -> bool {
        self.share_covariance || num_classes > self.dense_cov_limit
    }

    /// Mixing weight used at evaluation.
    pub fn eval_lambda(&self) -> f64 {
        if self.use_vlpd { self.beta().mean() } else { 0.0 }
    }

    /// Learning rate of a 1-indexed epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = epoch.saturating_sub(1) / self.lr_decay_every;
        self.base_lr * self.lr_decay_factor.powi(decays as i32)
    }
}
