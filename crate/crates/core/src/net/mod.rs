//! Generators, patch discriminators and masked-autoencoder pretraining.

mod discriminator;
mod generator;
mod layers;
mod mae;

use bitstain_tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorOutput};
pub use generator::{Encoded, Generator, GeneratorOutput};
pub use mae::{mae_pretrain_step, masked_reconstruction_loss, patch_mask, pixel_mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub input_size: usize,
    /// One entry per convolutional scale, i.e. every scale but the last.
    pub stage_channels: Vec<usize>,
    /// Ascending downsampling factors; the last one is the token grid.
    pub scale_set: Vec<usize>,
    pub token_dim: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub extra_tokens: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stage_channels: vec![16, 32, 64],
            scale_set: vec![1, 2, 4, 16],
            token_dim: 64,
            vit_depth: 2,
            vit_heads: 4,
            extra_tokens: 1,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Full-resolution configuration for 512 x 512 tiles.
    pub fn full_scale() -> Self {
        Self {
            input_size: 512,
            stage_channels: vec![32, 64, 128],
            token_dim: 256,
            vit_depth: 6,
            vit_heads: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        let k = &self.scale_set;
        if k.len() < 2 || k[0] != 1 {
            return bad(format!("scale set {k:?} must start at 1 and hold at least two scales"));
        }
        if k.windows(2).any(|w| w[1] <= w[0]) || k.iter().any(|s| !s.is_power_of_two()) {
            return bad(format!("scale set {k:?} must be strictly increasing powers of two"));
        }
        let kmax = *k.last().unwrap();
        if self.input_size == 0 || !self.input_size.is_multiple_of(kmax) {
            return bad(format!(
                "input size {} not divisible by bottleneck factor {kmax}",
                self.input_size
            ));
        }
        if self.stage_channels.len() != k.len() - 1 || self.stage_channels.contains(&0) {
            return bad(format!(
                "need {} positive stage channel counts, got {:?}",
                k.len() - 1,
                self.stage_channels
            ));
        }
        if self.vit_heads == 0 || self.token_dim < 2 || !self.token_dim.is_multiple_of(self.vit_heads) {
            return bad(format!(
                "token_dim {} must be >= 2 and divisible by vit_heads {}",
                self.token_dim, self.vit_heads
            ));
        }
        if self.vit_depth == 0 {
            return bad("vit_depth must be at least 1".into());
        }
        if self.extra_tokens != 1 {
            return bad(format!("extra_tokens must be 1, got {}", self.extra_tokens));
        }
        Ok(())
    }

    pub fn bottleneck_factor(&self) -> usize {
        *self.scale_set.last().unwrap()
    }

    /// Side length of the token grid.
    pub fn grid_size(&self) -> usize {
        self.input_size / self.bottleneck_factor()
    }

    /// Channel count of the map at each scale (token width for the last).
    pub fn scale_channels(&self) -> Vec<usize> {
        let mut c = self.stage_channels.clone();
        c.push(self.token_dim);
        c
    }

    /// Whether two generators produce comparable feature pyramids.
    pub fn features_compatible(&self, other: &Self) -> bool {
        self.input_size == other.input_size
            && self.scale_set == other.scale_set
            && self.stage_channels == other.stage_channels
            && self.token_dim == other.token_dim
    }
}

/// Encoder feature maps, one `[B, C_k, S/k, S/k]` tensor per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub scales: Vec<usize>,
    pub maps: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn get(&self, k: usize) -> Option<&Tensor> {
        self.scales.iter().position(|&s| s == k).map(|i| &self.maps[i])
    }
}

/// Tape-side pyramid.
#[derive(Clone, Debug)]
pub struct PyramidVars<'t> {
    pub scales: Vec<usize>,
    pub maps: Vec<Var<'t>>,
}

impl<'t> PyramidVars<'t> {
    pub fn detach(&self) -> Self {
        Self {
            scales: self.scales.clone(),
            maps: self.maps.iter().map(|m| m.detach()).collect(),
        }
    }

    pub fn values(&self) -> FeaturePyramid {
        FeaturePyramid {
            scales: self.scales.clone(),
            maps: self.maps.iter().map(|m| (*m.value()).clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        GeneratorConfig::default().validate().unwrap();
        GeneratorConfig::full_scale().validate().unwrap();
        let mut c = GeneratorConfig::default();
        c.scale_set = vec![1, 2, 4, 12];
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::default();
        c.extra_tokens = 2;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::default();
        c.input_size = 40;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::default();
        c.stage_channels = vec![8, 8];
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::default();
        c.vit_heads = 3;
        assert!(c.validate().is_err());
    }
}
