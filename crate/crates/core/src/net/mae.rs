use bitstain_tensor::{Adam, Tape, Tensor, Var};
use rand::seq::index;
use rand::Rng;

use super::Generator;
use crate::error::{Error, Result};

/// Picks `floor(ratio * num_patches)` distinct patches uniformly at random.
pub fn patch_mask<R: Rng + ?Sized>(num_patches: usize, ratio: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let count = (ratio * num_patches as f64).floor() as usize;
    if count == 0 {
        return Err(Error::Parameter(format!(
            "mask ratio {ratio} masks no patch of {num_patches}"
        )));
    }
    let mut mask = vec![false; num_patches];
    for i in index::sample(rng, num_patches, count) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Expands per-patch masks (one per batch item) into a `[B, 1, S, S]` pixel mask.
pub fn pixel_mask(masks: &[Vec<bool>], grid: usize, size: usize) -> Tensor {
    let patch = size / grid;
    let mut data = vec![0.0; masks.len() * size * size];
    for (b, m) in masks.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                if m[(y / patch) * grid + x / patch] {
                    data[(b * size + y) * size + x] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![masks.len(), 1, size, size], data).unwrap()
}

/// Mean squared error over masked pixels only; `mask` is `[B, 1, S, S]`.
pub fn masked_reconstruction_loss<'t>(pred: Var<'t>, target: Var<'t>, mask: &Tensor) -> Var<'t> {
    let channels = pred.shape()[1] as f64;
    let count: f64 = mask.data().iter().sum::<f64>() * channels;
    let m = pred.tape().constant(mask.clone());
    ((pred - target).square() * m).sum().scale(1.0 / count)
}

/// One masked-autoencoder update on `[B, 3, S, S]`: masked patches are zeroed
/// in the input and the generator learns to reconstruct them.
pub fn mae_pretrain_step<R: Rng + ?Sized>(
    gen: &mut Generator,
    adam: &mut Adam,
    batch: &Tensor,
    mask_ratio: f64,
    rng: &mut R,
) -> Result<f64> {
    gen.check_input(batch.shape())?;
    let cfg = gen.config();
    let (grid, size) = (cfg.grid_size(), cfg.input_size);
    let masks = (0..batch.shape()[0])
        .map(|_| patch_mask(grid * grid, mask_ratio, rng))
        .collect::<Result<Vec<_>>>()?;
    let mask = pixel_mask(&masks, grid, size);

    let tape = Tape::new();
    let p = gen.params().bind(&tape, true);
    let target = tape.constant(batch.clone());
    let keep = tape.constant(mask.map(|m| 1.0 - m));
    let (pred, _) = gen.forward_var(&p, target * keep);
    let loss = masked_reconstruction_loss(pred, target, &mask);
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("masked reconstruction loss is {value}")));
    }
    let grads = p.grads(&tape.backward(loss));
    adam.step(gen.params_mut(), &grads);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::GeneratorConfig;
    use bitstain_tensor::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = patch_mask(16, 0.4, &mut rng).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 6);
        assert!(patch_mask(16, 1.0, &mut rng).is_err());
        assert!(patch_mask(16, 0.0, &mut rng).is_err());
        assert!(patch_mask(4, 0.1, &mut rng).is_err());
        let px = pixel_mask(std::slice::from_ref(&m), 4, 8);
        assert_eq!(px.data().iter().sum::<f64>(), 6.0 * 4.0);
    }

    #[test]
    fn loss_ignores_visible_targets() {
        let tape = Tape::new();
        let mask = pixel_mask(&[vec![true, false, false, false]], 2, 4);
        let pred = tape.constant(Tensor::full(vec![1, 3, 4, 4], 0.5));
        let t1 = Tensor::full(vec![1, 3, 4, 4], 0.0);
        let mut t2 = t1.clone();
        // Pixel (x=3, y=3) lies in the unmasked bottom-right patch.
        t2.data_mut()[15] = 9.0;
        let a = masked_reconstruction_loss(pred, tape.constant(t1), &mask).value().item();
        let b = masked_reconstruction_loss(pred, tape.constant(t2), &mask).value().item();
        assert_eq!(a, b);
        assert_eq!(a, 0.25);
        let perfect = masked_reconstruction_loss(pred, pred, &mask).value().item();
        assert_eq!(perfect, 0.0);
    }

    #[test]
    fn pretrain_step_updates_parameters() {
        let cfg = GeneratorConfig {
            input_size: 32,
            stage_channels: vec![4, 4, 8],
            token_dim: 8,
            vit_depth: 1,
            vit_heads: 2,
            ..GeneratorConfig::default()
        };
        let mut g = Generator::new(cfg).unwrap();
        let before = g.params().clone();
        let mut adam = Adam::new(AdamConfig::default(), g.params());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = Tensor::randn(vec![2, 3, 32, 32], 0.3, &mut rng);
        let loss = mae_pretrain_step(&mut g, &mut adam, &batch, 0.5, &mut rng).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_ne!(&before, g.params());
        assert!(mae_pretrain_step(&mut g, &mut adam, &batch, 1.5, &mut rng).is_err());
    }
}
