use bitstain_tensor::{Bound, ParamStore, Tape, Tensor, Var};

use super::layers::{self, Init};
use super::{FeaturePyramid, GeneratorConfig, PyramidVars};
use crate::error::{Error, Result};
use crate::style::{apply_fusion_var, StylePrototype, StyleSource, StyleToken};

const SLOPE: f64 = 0.2;

/// U-Net generator with a transformer bottleneck carrying one style token.
///
/// The style token sits at sequence position 0. Its value after the last
/// transformer block conditions every decoder stage through a per-channel
/// scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    input_domain: StyleSource,
}

/// Encoder half of a forward pass on the tape.
#[derive(Clone, Debug)]
pub struct Encoded<'t> {
    pub pyramid: PyramidVars<'t>,
    /// `[B, D]` token read back from position 0.
    pub style: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOutput {
    pub image: Tensor,
    pub pyramid: FeaturePyramid,
    /// Own style token of each batch item.
    pub styles: Vec<StyleToken>,
}

fn stage_geometry(ratio: usize) -> (usize, usize) {
    // kernel 2r - 1 with padding r - 1 divides the extent exactly by r.
    (2 * ratio - 1, ratio - 1)
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(config.seed);
        let ch = &config.stage_channels;
        let k = &config.scale_set;
        let d = config.token_dim;
        let g = config.grid_size();
        init.conv("enc.0", 3, ch[0], 3)?;
        for i in 1..ch.len() {
            let (kernel, _) = stage_geometry(k[i] / k[i - 1]);
            init.conv(&format!("enc.{i}"), ch[i - 1], ch[i], kernel)?;
        }
        let last = ch.len() - 1;
        init.conv("embed", ch[last], d, k[last + 1] / k[last])?;
        init.normal("pos", &[1, g * g, d], 0.02)?;
        init.normal("style", &[1, 1, d], 1.0)?;
        for j in 0..config.vit_depth {
            layers::init_vit_block(&mut init, &format!("vit.{j}"), d)?;
        }
        init.layer_norm("ln_f", d)?;
        init.conv("dec.proj", d, ch[last], 1)?;
        for i in (0..ch.len()).rev() {
            let from = if i == last { ch[last] } else { ch[i + 1] };
            init.conv(&format!("dec.{i}"), from + ch[i], ch[i], 3)?;
            init.linear(&format!("film.{i}"), d, 2 * ch[i], 0.02 / (d as f64).sqrt())?;
        }
        init.conv("out", ch[0], 3, 1)?;
        Ok(Self {
            config,
            params: init.store,
            input_domain: StyleSource::Bit,
        })
    }

    /// Tags the style tokens this generator extracts with their domain.
    pub fn with_input_domain(mut self, domain: StyleSource) -> Self {
        self.input_domain = domain;
        self
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Checks a `[B, 3, S, S]` input.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[0] == 0 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!(
                "generator expects [B, 3, {s}, {s}], got {shape:?}"
            )));
        }
        Ok(())
    }

    pub fn encode<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Encoded<'t> {
        let cfg = &self.config;
        let k = &cfg.scale_set;
        let nconv = cfg.stage_channels.len();
        let b = x.shape()[0];
        let (d, g) = (cfg.token_dim, cfg.grid_size());

        let mut maps = Vec::with_capacity(k.len());
        let mut h = layers::conv(p, "enc.0", x, 1, 1).leaky_relu(SLOPE);
        maps.push(h);
        for i in 1..nconv {
            let r = k[i] / k[i - 1];
            let (_, pad) = stage_geometry(r);
            h = layers::conv(p, &format!("enc.{i}"), h, r, pad).leaky_relu(SLOPE);
            maps.push(h);
        }
        let r = k[nconv] / k[nconv - 1];
        let tokens = layers::conv(p, "embed", h, r, 0)
            .reshape(vec![b, d, g * g])
            .permute(&[0, 2, 1])
            + p.get("pos");
        let ones = x.tape().constant(Tensor::full(vec![b, 1, 1], 1.0));
        let mut seq = Var::concat(&[ones * p.get("style"), tokens], 1);
        for j in 0..cfg.vit_depth {
            seq = layers::vit_block(p, &format!("vit.{j}"), seq, cfg.vit_heads);
        }
        let style = seq.narrow(1, 0, 1).reshape(vec![b, d]);
        let spatial = layers::layer_norm(p, "ln_f", seq.narrow(1, 1, g * g));
        maps.push(spatial.permute(&[0, 2, 1]).reshape(vec![b, d, g, g]));
        Encoded {
            pyramid: PyramidVars {
                scales: k.clone(),
                maps,
            },
            style,
        }
    }

    /// Decoder half: `[B, 3, S, S]` in `[-1, 1]`, conditioned on `style [B, D]`.
    pub fn decode<'t>(&self, p: &Bound<'t>, enc: &Encoded<'t>, style: Var<'t>) -> Var<'t> {
        let cfg = &self.config;
        let k = &cfg.scale_set;
        let ch = &cfg.stage_channels;
        let b = style.shape()[0];
        let maps = &enc.pyramid.maps;
        let mut h = layers::conv(p, "dec.proj", maps[ch.len()], 1, 0);
        for i in (0..ch.len()).rev() {
            h = h.upsample_nearest(k[i + 1] / k[i]);
            h = layers::conv(p, &format!("dec.{i}"), Var::concat(&[h, maps[i]], 1), 1, 1);
            let film = layers::linear(p, &format!("film.{i}"), style);
            let gamma = film.narrow(1, 0, ch[i]).reshape(vec![b, ch[i], 1, 1]);
            let beta = film.narrow(1, ch[i], ch[i]).reshape(vec![b, ch[i], 1, 1]);
            h = (h * gamma.offset(1.0) + beta).leaky_relu(SLOPE);
        }
        layers::conv(p, "out", h, 1, 0).tanh()
    }

    /// Full pass on the tape with the generator's own style token.
    pub fn forward_var<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> (Var<'t>, Encoded<'t>) {
        let enc = self.encode(p, x);
        let y = self.decode(p, &enc, enc.style);
        (y, enc)
    }

    fn run(
        &self,
        x: &Tensor,
        pick_style: impl for<'t> FnOnce(&'t Tape, Var<'t>) -> Result<Var<'t>>,
    ) -> Result<GeneratorOutput> {
        let x = batched(x)?;
        self.check_input(x.shape())?;
        if !self.params.is_finite() {
            return Err(Error::Numeric("generator parameters contain non-finite values".into()));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let enc = self.encode(&p, tape.constant(x));
        let style = pick_style(&tape, enc.style)?;
        let y = self.decode(&p, &enc, style);
        let own = enc.style.value();
        let d = self.config.token_dim;
        let styles = own
            .data()
            .chunks(d)
            .map(|row| StyleToken::new(row.to_vec(), self.input_domain))
            .collect::<Result<_>>()?;
        let image = (*y.value()).clone();
        if !image.is_finite() {
            return Err(Error::Numeric("generator output is non-finite".into()));
        }
        Ok(GeneratorOutput {
            image,
            pyramid: enc.pyramid.values(),
            styles,
        })
    }

    /// Translates `[B, 3, S, S]` (or a single `[3, S, S]` tile). An override
    /// replaces the bottleneck style token fed to the decoder for every item.
    pub fn forward(&self, x: &Tensor, style_override: Option<&StyleToken>) -> Result<GeneratorOutput> {
        let d = self.config.token_dim;
        if let Some(s) = style_override {
            if s.dim() != d {
                return Err(Error::Shape(format!("style override of length {}, expected {d}", s.dim())));
            }
        }
        self.run(x, |tape, own| {
            Ok(match style_override {
                None => own,
                Some(s) => {
                    let b = own.shape()[0];
                    let rows: Vec<f64> = (0..b).flat_map(|_| s.values.iter().copied()).collect();
                    tape.constant(Tensor::new(vec![b, d], rows)?)
                }
            })
        })
    }

    /// Translation with the own token blended toward `proto` at weight `w`.
    pub fn forward_fused(&self, x: &Tensor, proto: &StylePrototype, w: f64) -> Result<GeneratorOutput> {
        self.run(x, |_, own| apply_fusion_var(own, proto, w))
    }

    pub fn encode_features(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let x = batched(x)?;
        self.check_input(x.shape())?;
        if !self.params.is_finite() {
            return Err(Error::Numeric("generator parameters contain non-finite values".into()));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(self.encode(&p, tape.constant(x)).pyramid.values())
    }
}

/// Adds a leading batch axis to a single `[3, H, W]` tile.
pub(crate) fn batched(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 3 {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        Ok(x.reshape(shape)?)
    } else {
        Ok(x.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            input_size: 32,
            stage_channels: vec![4, 6, 8],
            token_dim: 8,
            vit_depth: 1,
            vit_heads: 2,
            seed: 3,
            ..GeneratorConfig::default()
        }
    }

    fn input(seed: u64, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(vec![2, 3, size, size], 0.5, &mut rng).map(|v| v.clamp(-1.0, 1.0))
    }

    #[test]
    fn pyramid_shapes_default_config() {
        let g = Generator::new(GeneratorConfig::default()).unwrap();
        let x = input(0, 64).index_axis0(0);
        let out = g.forward(&x, None).unwrap();
        let widths: Vec<usize> = out.pyramid.maps.iter().map(|m| m.shape()[3]).collect();
        assert_eq!(widths, vec![64, 32, 16, 4]);
        assert_eq!(out.pyramid.get(1).unwrap().shape(), &[1, 16, 64, 64]);
        assert_eq!(out.pyramid.get(16).unwrap().shape(), &[1, 64, 4, 4]);
        assert_eq!(out.image.shape(), &[1, 3, 64, 64]);
        assert_eq!(out.styles.len(), 1);
        assert_eq!(out.styles[0].dim(), 64);
    }

    #[test]
    fn deterministic_and_bounded() {
        let g = Generator::new(small()).unwrap();
        let x = input(1, 32).map(|v| v * 50.0);
        let a = g.forward(&x, None).unwrap();
        let b = g.forward(&x, None).unwrap();
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(g, Generator::new(small()).unwrap());
    }

    #[test]
    fn own_style_override_is_idempotent() {
        let g = Generator::new(small()).unwrap();
        let x = input(2, 32).index_axis0(0);
        let plain = g.forward(&x, None).unwrap();
        let again = g.forward(&x, Some(&plain.styles[0])).unwrap();
        assert_eq!(plain.image, again.image);
        let other = StyleToken::new(vec![3.0; 8], StyleSource::He).unwrap();
        assert_ne!(g.forward(&x, Some(&other)).unwrap().image, plain.image);
    }

    #[test]
    fn encode_features_matches_forward() {
        let g = Generator::new(small()).unwrap();
        let x = input(4, 32);
        assert_eq!(g.encode_features(&x).unwrap(), g.forward(&x, None).unwrap().pyramid);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = Generator::new(small()).unwrap();
        assert!(matches!(g.forward(&Tensor::zeros(vec![1, 3, 16, 16]), None), Err(Error::Shape(_))));
        let short = StyleToken::new(vec![0.0; 3], StyleSource::He).unwrap();
        assert!(matches!(g.forward(&input(0, 32), Some(&short)), Err(Error::Shape(_))));
        let mut broken = g.clone();
        broken.params_mut().value_mut(0).data_mut()[0] = f64::NAN;
        assert!(matches!(broken.forward(&input(0, 32), None), Err(Error::Numeric(_))));
    }

    #[test]
    fn gradients_finite_at_init() {
        let g = Generator::new(small()).unwrap();
        let tape = Tape::new();
        let p = g.params().bind(&tape, true);
        let (y, enc) = g.forward_var(&p, tape.constant(input(5, 32)));
        let loss = y.square().mean() + enc.style.square().mean();
        let grads = p.grads(&tape.backward(loss));
        assert_eq!(grads.len(), g.params().len());
        for (i, gr) in grads.iter().enumerate() {
            let gr = gr.as_ref().unwrap_or_else(|| panic!("no gradient for {}", g.params().name(i)));
            assert!(gr.is_finite(), "{}", g.params().name(i));
        }
    }
}
