//! Style tokens: statistics, AdaIN fusion, the EMA prototype and the
//! cosine injection schedule.
//!
//! Every operation exists twice: on plain vectors and on tape variables of
//! shape `[B, D]`. Both versions perform the same floating-point operations
//! in the same order, so they agree bit for bit.

use std::f64::consts::PI;
use std::fmt;

use bitstain_tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};

/// Floor applied to token standard deviations.
pub const TOKEN_EPS: f64 = 1e-5;

/// Reserved container key holding the prototype.
pub const PROTOTYPE_KEY: &str = "style_prototype";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleSource {
    Bit,
    He,
    Fused,
}

impl fmt::Display for StyleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StyleSource::Bit => "BIT",
            StyleSource::He => "HE",
            StyleSource::Fused => "fused",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleToken {
    pub values: Vec<f64>,
    pub source: StyleSource,
}

impl StyleToken {
    pub fn new(values: Vec<f64>, source: StyleSource) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("style token has non-finite entries".into()));
        }
        Ok(Self { values, source })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Mean and floored population standard deviation across the embedding.
pub fn token_stats(s: &StyleToken) -> Result<(f64, f64)> {
    stats(&s.values)
}

fn stats(v: &[f64]) -> Result<(f64, f64)> {
    if v.len() < 2 {
        return Err(Error::Parameter(format!(
            "token statistics need at least 2 entries, got {}",
            v.len()
        )));
    }
    let inv = 1.0 / v.len() as f64;
    let mu = v.iter().sum::<f64>() * inv;
    let var = v.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() * inv;
    Ok((mu, var.sqrt().max(TOKEN_EPS)))
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("token dimension {a} vs prototype {b}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylePrototype {
    pub values: Vec<f64>,
    pub alpha: f64,
    pub observations: u64,
    pub initialized: bool,
}

impl StylePrototype {
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Parameter(format!("EMA factor {alpha} outside (0, 1)")));
        }
        Ok(Self {
            values: vec![0.0; dim],
            alpha,
            observations: 0,
            initialized: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `(mu, sigma)` of the prototype; errors until the first observation.
    pub fn stats(&self) -> Result<(f64, f64)> {
        if !self.initialized {
            return Err(Error::State("style prototype has no observations yet".into()));
        }
        stats(&self.values)
    }

    /// Folds one observation in: copy on first use, `a*old + (1-a)*new` after.
    pub fn update(&mut self, obs: &[f64]) -> Result<()> {
        check_dims(obs.len(), self.dim())?;
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite style observation".into()));
        }
        if self.initialized {
            let a = self.alpha;
            for (p, &o) in self.values.iter_mut().zip(obs) {
                *p = a * *p + (1.0 - a) * o;
            }
        } else {
            self.values.copy_from_slice(obs);
            self.initialized = true;
        }
        self.observations += 1;
        Ok(())
    }
}

pub fn ema_update(proto: &StylePrototype, obs: &StyleToken) -> Result<StylePrototype> {
    let mut next = proto.clone();
    next.update(&obs.values)?;
    Ok(next)
}

pub fn adain_fuse(src: &StyleToken, proto: &StylePrototype) -> Result<StyleToken> {
    check_dims(src.dim(), proto.dim())?;
    let (mp, sp) = proto.stats()?;
    let (ms, ss) = token_stats(src)?;
    Ok(StyleToken {
        values: src.values.iter().map(|&x| (x - ms) / ss * sp + mp).collect(),
        source: StyleSource::Fused,
    })
}

/// `w * adain(src) + (1 - w) * src`.
pub fn apply_fusion(src: &StyleToken, proto: &StylePrototype, w: f64) -> Result<StyleToken> {
    let fused = adain_fuse(src, proto)?;
    Ok(StyleToken {
        values: fused
            .values
            .iter()
            .zip(&src.values)
            .map(|(&f, &s)| f * w + s * (1.0 - w))
            .collect(),
        source: StyleSource::Fused,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSchedule {
    pub w0: f64,
    pub w_min: f64,
    pub total_steps: u64,
}

impl Default for FusionSchedule {
    fn default() -> Self {
        Self {
            w0: 1.0,
            w_min: 0.0,
            total_steps: 1,
        }
    }
}

impl FusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.w_min && self.w_min <= self.w0 && self.w0 <= 1.0) {
            return Err(Error::Parameter(format!(
                "fusion weights need 0 <= w_min ({}) <= w0 ({}) <= 1",
                self.w_min, self.w0
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Parameter("fusion schedule needs at least one step".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `w0` at `t = 0` to `w_min` at `t = T`.
pub fn fusion_weight(t: u64, sched: &FusionSchedule) -> Result<f64> {
    sched.validate()?;
    if t > sched.total_steps {
        return Err(Error::Parameter(format!(
            "step {t} beyond schedule length {}",
            sched.total_steps
        )));
    }
    if t == sched.total_steps {
        return Ok(sched.w_min);
    }
    let c = (PI * t as f64 / sched.total_steps as f64).cos();
    Ok(sched.w_min + 0.5 * (sched.w0 - sched.w_min) * (1.0 + c))
}

pub fn save_prototype(proto: &StylePrototype, ckpt: &mut Container) -> Result<()> {
    ckpt.put_meta(PROTOTYPE_KEY, proto)
}

pub fn load_prototype(ckpt: &Container) -> Result<StylePrototype> {
    let proto: StylePrototype = ckpt
        .meta(PROTOTYPE_KEY)?
        .ok_or_else(|| Error::State("checkpoint holds no style prototype".into()))?;
    if proto.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("stored style prototype is non-finite".into()));
    }
    Ok(proto)
}

/// Per-row `(mu, sigma)` of a `[B, D]` token batch, each `[B, 1]`.
pub fn token_stats_var<'t>(s: Var<'t>) -> (Var<'t>, Var<'t>) {
    let mu = s.sum_axis(1).scale(1.0 / s.shape()[1] as f64);
    let var = (s - mu).square().sum_axis(1).scale(1.0 / s.shape()[1] as f64);
    (mu, var.sqrt().clamp_min(TOKEN_EPS))
}

/// Row-wise [`adain_fuse`] of a `[B, D]` batch against fixed prototype stats.
pub fn adain_var<'t>(s: Var<'t>, proto_mu: f64, proto_sigma: f64) -> Var<'t> {
    let (mu, sigma) = token_stats_var(s);
    ((s - mu) / sigma).scale(proto_sigma).offset(proto_mu)
}

/// Row-wise [`apply_fusion`].
pub fn apply_fusion_var<'t>(s: Var<'t>, proto: &StylePrototype, w: f64) -> Result<Var<'t>> {
    check_dims(s.shape()[1], proto.dim())?;
    let (mp, sp) = proto.stats()?;
    Ok(adain_var(s, mp, sp).scale(w) + s.scale(1.0 - w))
}

/// Mean over the batch of a `[B, D]` token tensor.
pub fn batch_mean_token(t: &Tensor) -> Vec<f64> {
    let (b, d) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; d];
    for row in t.data().chunks(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = 1.0 / b as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}
