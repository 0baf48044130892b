use std::path::Path;

use bitstain_tensor::{Adam, ParamStore, Tensor};

use super::config::TrainConfig;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::net::{Discriminator, Generator};
use crate::style::{load_prototype, save_prototype, StylePrototype, StyleSource};

const KIND: &str = "train_state";
const NETS: [&str; 4] = ["g_b2h", "g_h2b", "d_he", "d_bit"];

/// Everything needed to continue training bit-exactly: all four networks,
/// their optimizer moments, the style prototype and the counters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub g_b2h: Generator,
    pub g_h2b: Generator,
    pub d_he: Discriminator,
    pub d_bit: Discriminator,
    pub opt_g_b2h: Adam,
    pub opt_g_h2b: Adam,
    pub opt_d_he: Adam,
    pub opt_d_bit: Adam,
    pub prototype: StylePrototype,
    /// Optimization steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Length of the fusion schedule.
    pub total_steps: u64,
}

/// A checkpoint is a serialized [`TrainState`].
pub type CheckpointBundle = TrainState;

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let g_b2h = Generator::new(config.generator.clone())?;
        let mut h2b_cfg = config.generator.clone();
        h2b_cfg.seed = h2b_cfg.seed.wrapping_add(1);
        let g_h2b = Generator::new(h2b_cfg)?.with_input_domain(StyleSource::He);
        let d_he = Discriminator::new(config.discriminator.clone())?;
        let mut dbit_cfg = config.discriminator.clone();
        dbit_cfg.seed = dbit_cfg.seed.wrapping_add(1);
        let d_bit = Discriminator::new(dbit_cfg)?;
        let adam = config.adam();
        Ok(Self {
            opt_g_b2h: Adam::new(adam, g_b2h.params()),
            opt_g_h2b: Adam::new(adam, g_h2b.params()),
            opt_d_he: Adam::new(adam, d_he.params()),
            opt_d_bit: Adam::new(adam, d_bit.params()),
            prototype: StylePrototype::new(config.generator.token_dim, config.alpha)?,
            g_b2h,
            g_h2b,
            d_he,
            d_bit,
            step: 0,
            epoch: 0,
            total_steps: 1,
            config,
        })
    }

    fn parts(&self) -> [(&ParamStore, &Adam); 4] {
        [
            (self.g_b2h.params(), &self.opt_g_b2h),
            (self.g_h2b.params(), &self.opt_g_h2b),
            (self.d_he.params(), &self.opt_d_he),
            (self.d_bit.params(), &self.opt_d_bit),
        ]
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.put_meta("kind", &KIND)?;
        c.put_meta("config", &self.config)?;
        c.put_meta("step", &self.step)?;
        c.put_meta("epoch", &self.epoch)?;
        c.put_meta("total_steps", &self.total_steps)?;
        for (net, (params, opt)) in NETS.iter().zip(self.parts()) {
            c.put_params(&format!("{net}/param"), params);
            c.put_meta(&format!("{net}/adam_steps"), &opt.steps())?;
            for (i, (name, _)) in params.iter().enumerate() {
                c.put_tensor(format!("{net}/adam_m/{name}"), opt.first_moments()[i].clone());
                c.put_tensor(format!("{net}/adam_v/{name}"), opt.second_moments()[i].clone());
            }
        }
        save_prototype(&self.prototype, &mut c)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind: String = c.require_meta("kind")?;
        if kind != KIND {
            return Err(Error::Config(format!("container holds `{kind}`, not a training state")));
        }
        let config: TrainConfig = c.require_meta("config")?;
        let mut state = Self::new(config)?;
        state.step = c.require_meta("step")?;
        state.epoch = c.require_meta("epoch")?;
        state.total_steps = c.require_meta("total_steps")?;
        state.prototype = load_prototype(c)?;
        let adam = state.config.adam();
        let restore = |net: &str, params: &mut ParamStore| -> Result<Adam> {
            c.load_params(&format!("{net}/param"), params)?;
            let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
            let grab = |kind: &str| -> Result<Vec<Tensor>> {
                names
                    .iter()
                    .map(|n| c.tensor(&format!("{net}/{kind}/{n}")).cloned())
                    .collect()
            };
            let steps: u64 = c.require_meta(&format!("{net}/adam_steps"))?;
            Ok(Adam::from_state(adam, steps, grab("adam_m")?, grab("adam_v")?, params)?)
        };
        state.opt_g_b2h = restore("g_b2h", state.g_b2h.params_mut())?;
        state.opt_g_h2b = restore("g_h2b", state.g_h2b.params_mut())?;
        state.opt_d_he = restore("d_he", state.d_he.params_mut())?;
        state.opt_d_bit = restore("d_bit", state.d_bit.params_mut())?;
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        let moments = |a: &Adam, b: &Adam| {
            a.steps() == b.steps()
                && a.first_moments() == b.first_moments()
                && a.second_moments() == b.second_moments()
        };
        self.config == other.config
            && self.g_b2h == other.g_b2h
            && self.g_h2b == other.g_h2b
            && self.d_he == other.d_he
            && self.d_bit == other.d_bit
            && moments(&self.opt_g_b2h, &other.opt_g_b2h)
            && moments(&self.opt_g_h2b, &other.opt_g_h2b)
            && moments(&self.opt_d_he, &other.opt_d_he)
            && moments(&self.opt_d_bit, &other.opt_d_bit)
            && self.prototype == other.prototype
            && self.step == other.step
            && self.epoch == other.epoch
            && self.total_steps == other.total_steps
    }
}
