use bitstain_tensor::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ChannelSubsetConfig, LossWeights};
use crate::net::{DiscriminatorConfig, GeneratorConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub w0: f64,
    pub w_min: f64,
    /// Weight used when staining; the end-of-schedule value if absent.
    pub inference_weight: Option<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            w0: 1.0,
            w_min: 0.0,
            inference_weight: None,
        }
    }
}

impl FusionConfig {
    pub fn inference(&self) -> f64 {
        self.inference_weight.unwrap_or(self.w_min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_cycle: f64,
    pub lambda_idt: f64,
    pub lambda_msc: f64,
    pub lambda_style: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub pretrain_epochs: u64,
    pub pretrain_batch_size: usize,
    pub mask_ratio: f64,
    pub alpha: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub fusion: FusionConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub channel_subset: ChannelSubsetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_cycle: w.lambda_cycle,
            lambda_idt: w.lambda_idt,
            lambda_msc: w.lambda_msc,
            lambda_style: w.lambda_style,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 2,
            epochs: 5,
            pretrain_epochs: 50,
            pretrain_batch_size: 4,
            mask_ratio: 0.4,
            alpha: 0.99,
            train_fraction: 0.6,
            seed: 0,
            fusion: FusionConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            channel_subset: ChannelSubsetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule on 512 x 512 tiles.
    pub fn full_scale() -> Self {
        let generator = GeneratorConfig::full_scale();
        Self {
            epochs: 170,
            discriminator: DiscriminatorConfig {
                input_size: generator.input_size,
                base_channels: 64,
                ..DiscriminatorConfig::default()
            },
            generator,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_cycle: self.lambda_cycle,
            lambda_idt: self.lambda_idt,
            lambda_msc: self.lambda_msc,
            lambda_style: self.lambda_style,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.discriminator.input_size != self.generator.input_size {
            return bad(format!(
                "discriminator input {} differs from generator input {}",
                self.discriminator.input_size, self.generator.input_size
            ));
        }
        if self.batch_size == 0 || self.pretrain_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction {} outside (0, 1]", self.train_fraction));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        let f = &self.fusion;
        if !(0.0 <= f.w_min && f.w_min <= f.w0 && f.w0 <= 1.0) {
            return bad(format!("fusion weights need 0 <= w_min <= w0 <= 1, got {f:?}"));
        }
        if let Some(w) = f.inference_weight {
            if !(0.0..=1.0).contains(&w) {
                return bad(format!("inference_weight {w} outside [0, 1]"));
            }
        }
        if self.channel_subset.n == 0 {
            return bad("channel_subset.n must be positive".into());
        }
        Ok(())
    }
}
