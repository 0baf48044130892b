use bitstain_tensor::{Bound, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::generator::batched;
use super::layers::{self, Init};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    pub base_channels: usize,
    /// Number of stride-2 stages; the logit grid is `input_size / 2^stages`.
    pub stages: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            base_channels: 16,
            stages: 3,
            seed: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.base_channels == 0 {
            return Err(Error::Config("discriminator needs at least one stage and channel".into()));
        }
        if !self.input_size.is_multiple_of(1 << self.stages) {
            return Err(Error::Config(format!(
                "discriminator input {} not divisible by 2^{}",
                self.input_size, self.stages
            )));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.input_size >> self.stages
    }
}

/// Per-patch realness scores `[B, 1, G, G]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput {
    pub logits: Tensor,
}

/// Strided convolutional patch discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(config.seed);
        let mut cin = 3;
        for i in 0..config.stages {
            let cout = config.base_channels << i;
            init.conv(&format!("conv.{i}"), cin, cout, 3)?;
            cin = cout;
        }
        init.conv("head", cin, 1, 3)?;
        Ok(Self {
            config,
            params: init.store,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward_var<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for i in 0..self.config.stages {
            h = layers::conv(p, &format!("conv.{i}"), h, 2, 1).leaky_relu(0.2);
        }
        layers::conv(p, "head", h, 1, 1)
    }

    pub fn discriminate(&self, x: &Tensor) -> Result<DiscriminatorOutput> {
        let x = batched(x)?;
        let s = self.config.input_size;
        if x.rank() != 4 || x.shape()[1] != 3 || x.shape()[2] != s || x.shape()[3] != s {
            return Err(Error::Shape(format!(
                "discriminator expects [B, 3, {s}, {s}], got {:?}",
                x.shape()
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let logits = (*self.forward_var(&p, tape.constant(x)).value()).clone();
        if !logits.is_finite() {
            return Err(Error::Numeric("discriminator logits are non-finite".into()));
        }
        Ok(DiscriminatorOutput { logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_grid_shape() {
        let d = Discriminator::new(DiscriminatorConfig::default()).unwrap();
        let out = d.discriminate(&Tensor::zeros(vec![3, 64, 64])).unwrap();
        assert_eq!(out.logits.shape(), &[1, 1, 8, 8]);
        assert!(out.logits.is_finite());
        let x = Tensor::full(vec![2, 3, 64, 64], 0.3);
        assert_eq!(d.discriminate(&x).unwrap(), d.discriminate(&x).unwrap());
        assert!(d.discriminate(&Tensor::zeros(vec![1, 3, 32, 32])).is_err());
    }
}
