use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::nn::{AdamConfig, MlpSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Accepted by the parser so configs can name it, rejected by
    /// [`AbceiConfig::validate`].
    Rmsprop,
}

/// Quantity monitored on the validation set for early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    /// Factual MSE plus the MI loss (the negated DV estimate).
    #[default]
    ValMsePlusMi,
    ValMse,
}

/// Group whose critic scores the discriminator pushes up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchor {
    #[default]
    Control,
    Treated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbceiVariant {
    #[default]
    Full,
    /// Without the mutual-information component.
    NoMi,
    /// Without the adversarial balancing component.
    NoAdversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbceiConfig {
    /// Encoder layers; the last one is the linear map to the latent space.
    pub encoder_depth: usize,
    pub encoder_width: usize,
    /// Hidden layers of the MI critic (a linear scalar head follows).
    pub mi_depth: usize,
    pub mi_width: usize,
    pub disc_depth: usize,
    pub disc_width: usize,
    /// Hidden layers of each outcome head.
    pub pred_depth: usize,
    pub pred_width: usize,
    pub latent_dim: usize,
    pub lambda: f64,
    pub beta: f64,
    pub disc_steps: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub use_mi: bool,
    pub use_adversarial: bool,
    pub early_stop: EarlyStop,
    pub anchor: Anchor,
}

impl Default for AbceiConfig {
    fn default() -> Self {
        Self {
            encoder_depth: 4,
            encoder_width: 200,
            mi_depth: 2,
            mi_width: 200,
            disc_depth: 3,
            disc_width: 200,
            pred_depth: 3,
            pred_width: 100,
            latent_dim: 200,
            lambda: 1e-4,
            beta: 10.0,
            disc_steps: 3,
            batch_size: 100,
            max_epochs: 300,
            patience: 30,
            seed: 0,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            use_mi: true,
            use_adversarial: true,
            early_stop: EarlyStop::ValMsePlusMi,
            anchor: Anchor::Control,
        }
    }
}

impl AbceiConfig {
    /// Small networks for quick runs on one core.
    pub fn desk() -> Self {
        Self {
            encoder_depth: 2,
            encoder_width: 32,
            mi_depth: 1,
            mi_width: 32,
            disc_depth: 1,
            disc_width: 32,
            pred_depth: 1,
            pred_width: 32,
            latent_dim: 16,
            batch_size: 100,
            max_epochs: 100,
            patience: 15,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.optimizer == OptimizerKind::Rmsprop {
            return bad("optimizer rmsprop is not supported; use adam".into());
        }
        for (name, v) in [
            ("encoder_depth", self.encoder_depth),
            ("encoder_width", self.encoder_width),
            ("mi_depth", self.mi_depth),
            ("mi_width", self.mi_width),
            ("disc_depth", self.disc_depth),
            ("disc_width", self.disc_width),
            ("pred_depth", self.pred_depth),
            ("pred_width", self.pred_width),
            ("latent_dim", self.latent_dim),
            ("disc_steps", self.disc_steps),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be nonnegative, got {}", self.beta));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn encoder_spec(&self, k: usize) -> Result<MlpSpec, ModelError> {
        Ok(MlpSpec::new(
            k,
            vec![self.encoder_width; self.encoder_depth - 1],
            self.latent_dim,
        )?)
    }

    pub fn mi_spec(&self, k: usize) -> Result<MlpSpec, ModelError> {
        Ok(MlpSpec::new(k + self.latent_dim, vec![self.mi_width; self.mi_depth], 1)?)
    }

    pub fn disc_spec(&self) -> Result<MlpSpec, ModelError> {
        Ok(MlpSpec::new(2 * self.latent_dim, vec![self.disc_width; self.disc_depth], 1)?)
    }

    pub fn head_spec(&self) -> Result<MlpSpec, ModelError> {
        Ok(MlpSpec::new(self.latent_dim, vec![self.pred_width; self.pred_depth], 1)?)
    }

    pub fn variant(&self) -> AbceiVariant {
        match (self.use_mi, self.use_adversarial) {
            (false, _) => AbceiVariant::NoMi,
            (true, false) => AbceiVariant::NoAdversarial,
            (true, true) => AbceiVariant::Full,
        }
    }
}

/// Config with the training lines of the requested variant disabled.
pub fn ablate(config: &AbceiConfig, variant: AbceiVariant) -> AbceiConfig {
    let mut c = config.clone();
    match variant {
        AbceiVariant::Full => {}
        AbceiVariant::NoMi => c.use_mi = false,
        AbceiVariant::NoAdversarial => c.use_adversarial = false,
    }
    c
}
