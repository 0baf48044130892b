//! Training objectives: multiscale content consistency, cycle, identity,
//! least-squares adversarial and style-statistics losses.

use std::fmt;

use bitstain_tensor::{Bound, Tape, Var};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Discriminator, Encoded, FeaturePyramid, Generator, GeneratorConfig, PyramidVars};
use crate::style::{apply_fusion_var, token_stats, token_stats_var, StylePrototype, StyleToken};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetRule {
    #[default]
    FirstN,
    SeededRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSubsetConfig {
    pub rule: SubsetRule,
    /// Channels kept at the intermediate scales.
    pub n: usize,
    pub seed: u64,
}

impl Default for ChannelSubsetConfig {
    fn default() -> Self {
        Self {
            rule: SubsetRule::FirstN,
            n: 16,
            seed: 0,
        }
    }
}

/// Channel indices compared at each scale.
///
/// The full-resolution map and the token grid keep every channel; scales in
/// between keep at most `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSubset {
    pub scales: Vec<usize>,
    pub indices: Vec<Vec<usize>>,
    pub rule: SubsetRule,
}

impl ChannelSubset {
    pub fn new(cfg: &ChannelSubsetConfig, gen: &GeneratorConfig) -> Result<Self> {
        if cfg.n == 0 {
            return Err(Error::Config("channel subset size must be positive".into()));
        }
        let channels = gen.scale_channels();
        let last = channels.len() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let indices = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if i == 0 || i == last || c <= cfg.n {
                    return (0..c).collect();
                }
                match cfg.rule {
                    SubsetRule::FirstN => (0..cfg.n).collect(),
                    SubsetRule::SeededRandom => {
                        let mut pick = index::sample(&mut rng, c, cfg.n).into_vec();
                        pick.sort_unstable();
                        pick
                    }
                }
            })
            .collect();
        Ok(Self {
            scales: gen.scale_set.clone(),
            indices,
            rule: cfg.rule,
        })
    }

    /// Every channel at every scale.
    pub fn full(gen: &GeneratorConfig) -> Self {
        Self {
            scales: gen.scale_set.clone(),
            indices: gen.scale_channels().into_iter().map(|c| (0..c).collect()).collect(),
            rule: SubsetRule::FirstN,
        }
    }
}

/// Which operand of a feature comparison is held constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopGrad {
    Neither,
    First,
    Second,
}

fn select<'t>(map: Var<'t>, idx: &[usize]) -> Var<'t> {
    let c = map.shape()[1];
    if idx.len() == c && idx.iter().enumerate().all(|(i, &j)| i == j) {
        map
    } else {
        map.gather(1, idx)
    }
}

/// `(1/|K|) sum_k mean |a_k - b_k|` over the subset channels.
pub fn multiscale_content_loss<'t>(
    a: &PyramidVars<'t>,
    b: &PyramidVars<'t>,
    subset: &ChannelSubset,
    stop: StopGrad,
) -> Result<Var<'t>> {
    if a.scales != b.scales || a.scales != subset.scales {
        return Err(Error::Shape(format!(
            "scale sets differ: {:?} vs {:?} (subset {:?})",
            a.scales, b.scales, subset.scales
        )));
    }
    let mut terms = Vec::with_capacity(a.scales.len());
    for ((&ma, &mb), idx) in a.maps.iter().zip(&b.maps).zip(&subset.indices) {
        if ma.shape() != mb.shape() {
            return Err(Error::Shape(format!(
                "feature maps {:?} vs {:?}",
                ma.shape(),
                mb.shape()
            )));
        }
        if idx.iter().any(|&i| i >= ma.shape()[1]) {
            return Err(Error::Shape(format!(
                "channel subset exceeds {} channels",
                ma.shape()[1]
            )));
        }
        let (ma, mb) = match stop {
            StopGrad::Neither => (ma, mb),
            StopGrad::First => (ma.detach(), mb),
            StopGrad::Second => (ma, mb.detach()),
        };
        terms.push((select(ma, idx) - select(mb, idx)).abs().mean());
    }
    let sum = terms[1..].iter().fold(terms[0], |acc, &t| acc + t);
    Ok(sum.scale(1.0 / terms.len() as f64))
}

/// Value-only form of [`multiscale_content_loss`].
pub fn multiscale_content_value(a: &FeaturePyramid, b: &FeaturePyramid, subset: &ChannelSubset) -> Result<f64> {
    let tape = Tape::new();
    let lift = |p: &FeaturePyramid| PyramidVars {
        scales: p.scales.clone(),
        maps: p.maps.iter().map(|m| tape.constant(m.clone())).collect(),
    };
    Ok(multiscale_content_loss(&lift(a), &lift(b), subset, StopGrad::Neither)?
        .value()
        .item())
}

pub fn l1_loss<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    (a - b).abs().mean()
}

/// Mean L1 between an input and its round trip through both generators.
pub fn cycle_loss<'t>(x: Var<'t>, round_trip: Var<'t>) -> Var<'t> {
    l1_loss(x, round_trip)
}

/// Mean L1 between a target-domain input and the generator's output on it.
pub fn identity_loss<'t>(y: Var<'t>, mapped: Var<'t>) -> Var<'t> {
    l1_loss(y, mapped)
}

/// Least-squares critic loss `0.5 * mean[(D(real) - 1)^2 + D(fake)^2]`.
pub fn lsgan_d_loss<'t>(d_real: Var<'t>, d_fake: Var<'t>) -> Var<'t> {
    (d_real.offset(-1.0).square().mean() + d_fake.square().mean()).scale(0.5)
}

/// Least-squares generator loss `mean[(D(fake) - 1)^2]`.
pub fn lsgan_g_loss(d_fake: Var<'_>) -> Var<'_> {
    d_fake.offset(-1.0).square().mean()
}

/// `(d_loss, g_loss)`; the critic term sees `fake` detached.
pub fn adversarial_losses<'t>(
    d: &Discriminator,
    p: &Bound<'t>,
    real: Var<'t>,
    fake: Var<'t>,
) -> (Var<'t>, Var<'t>) {
    let d_loss = lsgan_d_loss(d.forward_var(p, real), d.forward_var(p, fake.detach()));
    let g_loss = lsgan_g_loss(d.forward_var(p, fake));
    (d_loss, g_loss)
}

/// `(mu_f - mu_r)^2 + (sigma_f - sigma_r)^2`; `s_real` is a constant.
pub fn style_statistics_loss(s_fake: &StyleToken, s_real: &StyleToken) -> Result<f64> {
    if s_fake.dim() != s_real.dim() {
        return Err(Error::Shape(format!(
            "style tokens of length {} and {}",
            s_fake.dim(),
            s_real.dim()
        )));
    }
    let (mf, sf) = token_stats(s_fake)?;
    let (mr, sr) = token_stats(s_real)?;
    Ok((mf - mr) * (mf - mr) + (sf - sr) * (sf - sr))
}

/// Batched style loss on `[B, D]` tokens, averaged over the batch.
pub fn style_statistics_loss_var<'t>(s_fake: Var<'t>, s_real: Var<'t>) -> Result<Var<'t>> {
    if s_fake.shape() != s_real.shape() {
        return Err(Error::Shape(format!(
            "style tokens {:?} vs {:?}",
            s_fake.shape(),
            s_real.shape()
        )));
    }
    if s_fake.shape()[1] < 2 {
        return Err(Error::Parameter("style statistics need at least 2 entries".into()));
    }
    let (mf, sf) = token_stats_var(s_fake);
    let (mr, sr) = token_stats_var(s_real.detach());
    Ok(((mf - mr).square() + (sf - sr).square()).mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cycle: f64,
    pub lambda_idt: f64,
    pub lambda_msc: f64,
    pub lambda_style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cycle: 10.0,
            lambda_idt: 0.5,
            lambda_msc: 1.0,
            lambda_style: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cycle, self.lambda_idt, self.lambda_msc, self.lambda_style];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Per-step loss values; serialized as one JSON object per training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossReport {
    pub step: u64,
    pub adversarial_b2h: f64,
    pub adversarial_h2b: f64,
    pub cycle_bit: f64,
    pub cycle_he: f64,
    pub identity_bit: f64,
    pub identity_he: f64,
    pub msc_bit: f64,
    pub msc_he: f64,
    pub msc_total: f64,
    pub style: f64,
    pub total: f64,
    pub disc_he: f64,
    pub disc_bit: f64,
}

impl LossReport {
    pub fn adversarial(&self) -> f64 {
        self.adversarial_b2h + self.adversarial_h2b
    }

    pub fn cycle(&self) -> f64 {
        self.cycle_bit + self.cycle_he
    }

    pub fn identity(&self) -> f64 {
        self.identity_bit + self.identity_he
    }

    /// Named components in report order.
    pub fn components(&self) -> [(&'static str, f64); 13] {
        [
            ("adversarial_b2h", self.adversarial_b2h),
            ("adversarial_h2b", self.adversarial_h2b),
            ("cycle_bit", self.cycle_bit),
            ("cycle_he", self.cycle_he),
            ("identity_bit", self.identity_bit),
            ("identity_he", self.identity_he),
            ("msc_bit", self.msc_bit),
            ("msc_he", self.msc_he),
            ("msc_total", self.msc_total),
            ("style", self.style),
            ("total", self.total),
            ("disc_he", self.disc_he),
            ("disc_bit", self.disc_bit),
        ]
    }

    /// Errors naming the first non-finite component.
    pub fn check_finite(&self) -> Result<()> {
        match self.components().iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::Numeric(format!(
                "loss component `{name}` is {v} at step {}",
                self.step
            ))),
            None => Ok(()),
        }
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} total {:.5} cycle {:.5} idt {:.5} msc {:.5} style {:.5} adv {:.5}",
            self.step,
            self.total,
            self.cycle(),
            self.identity(),
            self.msc_total,
            self.style,
            self.adversarial()
        )
    }
}

/// Weighted generator objective.
pub fn total_generator_loss(r: &LossReport, w: &LossWeights) -> f64 {
    w.lambda_cycle * (r.cycle_bit + r.cycle_he)
        + w.lambda_idt * (r.identity_bit + r.identity_he)
        + w.lambda_msc * (r.msc_bit + r.msc_he)
        + w.lambda_style * r.style
        + (r.adversarial_b2h + r.adversarial_h2b)
}

/// A generator with its parameters bound to a tape.
#[derive(Clone, Copy)]
pub struct Net<'a, 't> {
    pub gen: &'a Generator,
    pub params: &'a Bound<'t>,
}

impl<'a, 't> Net<'a, 't> {
    pub fn encode(&self, x: Var<'t>) -> Encoded<'t> {
        self.gen.encode(self.params, x)
    }

    pub fn decode(&self, enc: &Encoded<'t>, style: Var<'t>) -> Var<'t> {
        self.gen.decode(self.params, enc, style)
    }
}

/// Translation-side style: own token, or own token blended toward a prototype.
#[derive(Clone, Copy, Debug)]
pub enum Fusion<'a> {
    Own,
    Prototype(&'a StylePrototype, f64),
}

impl Fusion<'_> {
    pub fn apply<'t>(&self, own: Var<'t>) -> Result<Var<'t>> {
        match self {
            Fusion::Own => Ok(own),
            Fusion::Prototype(p, w) => apply_fusion_var(own, p, *w),
        }
    }
}

/// Every generator pass of one cycle step on the tape.
pub struct CyclePasses<'t> {
    /// `G_b2h` encoding of the BIT input.
    pub enc_bit: Encoded<'t>,
    pub fake_he: Var<'t>,
    /// `G_h2b` encoding of the synthesized H&E.
    pub enc_fake_he: Encoded<'t>,
    pub rec_bit: Var<'t>,
    /// `G_h2b` encoding of the real H&E input.
    pub enc_he: Encoded<'t>,
    pub fake_bit: Var<'t>,
    /// `G_b2h` encoding of the synthesized BIT.
    pub enc_fake_bit: Encoded<'t>,
    pub rec_he: Var<'t>,
}

impl<'t> CyclePasses<'t> {
    /// Runs both cycles. `enc_he` is the already computed `G_h2b` encoding of
    /// the real H&E batch; `fusion` shapes every `G_b2h` decoding.
    pub fn run(
        b2h: Net<'_, 't>,
        h2b: Net<'_, 't>,
        x: Var<'t>,
        enc_he: Encoded<'t>,
        fusion: Fusion<'_>,
    ) -> Result<Self> {
        let enc_bit = b2h.encode(x);
        let fake_he = b2h.decode(&enc_bit, fusion.apply(enc_bit.style)?);
        let enc_fake_he = h2b.encode(fake_he);
        let rec_bit = h2b.decode(&enc_fake_he, enc_fake_he.style);
        let fake_bit = h2b.decode(&enc_he, enc_he.style);
        let enc_fake_bit = b2h.encode(fake_bit);
        let rec_he = b2h.decode(&enc_fake_bit, fusion.apply(enc_fake_bit.style)?);
        Ok(Self {
            enc_bit,
            fake_he,
            enc_fake_he,
            rec_bit,
            enc_he,
            fake_bit,
            enc_fake_bit,
            rec_he,
        })
    }

    /// `(L_BIT, L_HE)`: each generator's encoding of its real input against
    /// the held-constant encoding of its translation by the other generator.
    pub fn msc(&self, subset: &ChannelSubset) -> Result<(Var<'t>, Var<'t>)> {
        let l_bit = multiscale_content_loss(
            &self.enc_bit.pyramid,
            &self.enc_fake_he.pyramid,
            subset,
            StopGrad::Second,
        )?;
        let l_he = multiscale_content_loss(
            &self.enc_he.pyramid,
            &self.enc_fake_bit.pyramid,
            subset,
            StopGrad::Second,
        )?;
        Ok((l_bit, l_he))
    }

    /// Style loss between the synthesized-pathway token and the real one.
    pub fn style_loss(&self) -> Result<Var<'t>> {
        style_statistics_loss_var(self.enc_fake_he.style, self.enc_he.style)
    }
}

/// `(L_BIT, L_HE)` for one BIT batch `x` and one H&E batch `y`.
pub fn bidirectional_msc<'t>(
    b2h: Net<'_, 't>,
    h2b: Net<'_, 't>,
    x: Var<'t>,
    y: Var<'t>,
    subset: &ChannelSubset,
    fusion: Fusion<'_>,
) -> Result<(Var<'t>, Var<'t>)> {
    if !b2h.gen.config().features_compatible(h2b.gen.config()) {
        return Err(Error::Config(
            "generators need identical input size, scales, stage channels and token width".into(),
        ));
    }
    let enc_he = h2b.encode(y);
    CyclePasses::run(b2h, h2b, x, enc_he, fusion)?.msc(subset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use bitstain_tensor::Tensor;
    use crate::style::StyleSource;

    fn pyr<'t>(tape: &'t Tape, maps: Vec<Tensor>) -> PyramidVars<'t> {
        PyramidVars {
            scales: (0..maps.len()).map(|i| 1 << i).collect(),
            maps: maps.into_iter().map(|m| tape.variable(m)).collect(),
        }
    }

    fn full_subset(channels: &[usize]) -> ChannelSubset {
        ChannelSubset {
            scales: (0..channels.len()).map(|i| 1 << i).collect(),
            indices: channels.iter().map(|&c| (0..c).collect()).collect(),
            rule: SubsetRule::FirstN,
        }
    }

    #[test]
    fn msc_hand_values() {
        let tape = Tape::new();
        let a = pyr(&tape, vec![Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()]);
        let b = pyr(&tape, vec![Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 5.0]).unwrap()]);
        let s = full_subset(&[1]);
        let l = multiscale_content_loss(&a, &b, &s, StopGrad::Neither).unwrap();
        assert_eq!(l.value().item(), 0.25);
        assert_eq!(multiscale_content_loss(&a, &a, &s, StopGrad::Neither).unwrap().value().item(), 0.0);

        // Per-scale losses 0.2 and 0.4 average to 0.3.
        let a = pyr(&tape, vec![Tensor::zeros(vec![1, 1, 1, 5]), Tensor::zeros(vec![1, 1, 1, 5])]);
        let b = pyr(
            &tape,
            vec![
                Tensor::new(vec![1, 1, 1, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
                Tensor::new(vec![1, 1, 1, 5], vec![1.0, 1.0, 0.0, 0.0, 0.0]).unwrap(),
            ],
        );
        let l = multiscale_content_loss(&a, &b, &full_subset(&[1, 1]), StopGrad::Neither).unwrap();
        assert_abs_diff_eq!(l.value().item(), 0.3, epsilon = 1e-15);
        let swapped = multiscale_content_loss(&b, &a, &full_subset(&[1, 1]), StopGrad::First).unwrap();
        assert_eq!(l.value().item(), swapped.value().item());
    }

    #[test]
    fn msc_stop_gradient_routing() {
        let tape = Tape::new();
        let a = pyr(&tape, vec![Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap()]);
        let b = pyr(&tape, vec![Tensor::new(vec![1, 1, 1, 2], vec![2.0, -1.0]).unwrap()]);
        let l = multiscale_content_loss(&a, &b, &full_subset(&[1]), StopGrad::Second).unwrap();
        let g = tape.backward(l);
        assert_eq!(g.get(a.maps[0]).unwrap().data(), &[-0.5, 0.5]);
        assert!(g.get(b.maps[0]).is_none());
    }

    #[test]
    fn msc_shape_errors() {
        let tape = Tape::new();
        let a = pyr(&tape, vec![Tensor::zeros(vec![1, 1, 2, 2])]);
        let b = pyr(&tape, vec![Tensor::zeros(vec![1, 1, 2, 3])]);
        let s = full_subset(&[1]);
        assert!(matches!(multiscale_content_loss(&a, &b, &s, StopGrad::Neither), Err(Error::Shape(_))));
        let c = pyr(&tape, vec![Tensor::zeros(vec![1, 1, 2, 2]), Tensor::zeros(vec![1, 1, 1, 1])]);
        assert!(matches!(multiscale_content_loss(&a, &c, &s, StopGrad::Neither), Err(Error::Shape(_))));
    }

    #[test]
    fn subset_rules() {
        let g = GeneratorConfig::default();
        let s = ChannelSubset::new(&ChannelSubsetConfig::default(), &g).unwrap();
        let lens: Vec<usize> = s.indices.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![16, 16, 16, 64]);
        assert_eq!(s.indices[2], (0..16).collect::<Vec<_>>());
        let cfg = ChannelSubsetConfig {
            rule: SubsetRule::SeededRandom,
            n: 8,
            seed: 5,
        };
        let r1 = ChannelSubset::new(&cfg, &g).unwrap();
        assert_eq!(r1, ChannelSubset::new(&cfg, &g).unwrap());
        assert!(r1.indices[1].iter().all(|&i| i < 32));
        assert_eq!(r1.indices[1].len(), 8);
    }

    #[test]
    fn cycle_identity_adversarial_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 3, 2, 2], 0.5));
        let rt = tape.constant(Tensor::full(vec![1, 3, 2, 2], 0.4));
        assert_abs_diff_eq!(cycle_loss(x, rt).value().item(), 0.1, epsilon = 1e-15);
        assert_eq!(identity_loss(x, x).value().item(), 0.0);
        let half = tape.constant(Tensor::full(vec![1, 1, 4, 4], 0.5));
        assert_eq!(lsgan_d_loss(half, half).value().item(), 0.25);
        assert_eq!(lsgan_g_loss(half).value().item(), 0.25);
        let one = tape.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let zero = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        assert_eq!(lsgan_d_loss(one, zero).value().item(), 0.0);
        assert_eq!(lsgan_g_loss(one).value().item(), 0.0);
    }

    #[test]
    fn style_loss_values_and_gradient_routing() {
        let f = StyleToken::new(vec![0.0, 2.0], StyleSource::Fused).unwrap();
        let r = StyleToken::new(vec![-1.0, 1.0], StyleSource::He).unwrap();
        assert_eq!(style_statistics_loss(&f, &r).unwrap(), 1.0);
        assert_eq!(style_statistics_loss(&f, &f).unwrap(), 0.0);
        let short = StyleToken::new(vec![1.0, 2.0, 3.0], StyleSource::He).unwrap();
        assert!(matches!(style_statistics_loss(&f, &short), Err(Error::Shape(_))));

        let tape = Tape::new();
        let sf = tape.variable(Tensor::new(vec![1, 3], vec![0.3, 1.0, -2.0]).unwrap());
        let sr = tape.variable(Tensor::new(vec![1, 3], vec![1.0, 0.5, 0.0]).unwrap());
        let g = tape.backward(style_statistics_loss_var(sf, sr).unwrap());
        assert!(g.get(sr).is_none());
        assert!(g.get(sf).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn weighted_total() {
        let ones = LossReport {
            adversarial_b2h: 0.5,
            adversarial_h2b: 0.5,
            cycle_bit: 0.5,
            cycle_he: 0.5,
            identity_bit: 0.5,
            identity_he: 0.5,
            msc_bit: 0.5,
            msc_he: 0.5,
            msc_total: 1.0,
            style: 1.0,
            ..LossReport::default()
        };
        assert_eq!(total_generator_loss(&ones, &LossWeights::default()), 13.5);
        assert_eq!(total_generator_loss(&LossReport::default(), &LossWeights::default()), 0.0);
        let w = LossWeights {
            lambda_msc: 0.0,
            ..LossWeights::default()
        };
        let mut bumped = ones;
        bumped.msc_bit = 100.0;
        assert_eq!(total_generator_loss(&bumped, &w), total_generator_loss(&ones, &w));
    }

    #[test]
    fn report_names_first_non_finite() {
        let r = LossReport {
            cycle_he: f64::NAN,
            style: f64::INFINITY,
            ..LossReport::default()
        };
        let msg = r.check_finite().unwrap_err().to_string();
        assert!(msg.contains("cycle_he"), "{msg}");
        let json = serde_json::to_string(&LossReport::default()).unwrap();
        assert!(json.contains("\"msc_total\""));
    }
}
