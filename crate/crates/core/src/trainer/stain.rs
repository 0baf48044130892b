use std::path::Path;

use bitstain_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::state::TrainState;
use crate::container::Container;
use crate::data::{
    preprocess_volume, tile_grid, Modality, PreprocessConfig, ScalingScope, Volume, VolumeMeta,
};
use crate::data::tile::{u8_to_unit, unit_to_u8};
use crate::error::{Error, Result};
use crate::net::Generator;
use crate::style::{load_prototype, StylePrototype};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StainConfig {
    pub preprocess: PreprocessConfig,
    /// Tile stride; half the tile size if absent.
    pub stride: Option<usize>,
    /// Fusion weight; the checkpoint's inference weight if absent.
    pub weight: Option<f64>,
    /// Tiles translated per forward pass.
    pub batch: usize,
}

impl Default for StainConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            stride: None,
            weight: None,
            batch: 4,
        }
    }
}

/// The BIT-to-H&E generator with the style prototype it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Stainer {
    pub generator: Generator,
    pub prototype: StylePrototype,
    pub weight: f64,
}

impl Stainer {
    pub fn from_state(state: &TrainState) -> Result<Self> {
        if !state.prototype.initialized {
            return Err(Error::State("checkpoint style prototype was never observed".into()));
        }
        Ok(Self {
            generator: state.g_b2h.clone(),
            prototype: state.prototype.clone(),
            weight: state.config.fusion.inference(),
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        load_prototype(c)?;
        Self::from_state(&TrainState::from_container(c)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Feathering weight of pixel `i` in a tile of length `t`: rises linearly
/// from the tile edges.
fn feather(i: usize, t: usize) -> f64 {
    (i + 1).min(t - i) as f64
}

/// Stains a raw single-channel BIT volume slice by slice.
///
/// Each slice is preprocessed on its own, cut into overlapping tiles,
/// translated with the fused style token and blended back with linear
/// feathering. Output slice `z` depends only on input slice `z`.
pub fn stain_volume<T: Copy + Into<f64>>(
    stainer: &Stainer,
    volume: &Volume<T>,
    cfg: &StainConfig,
) -> Result<Volume<u8>> {
    if cfg.preprocess.scope == ScalingScope::PerVolume {
        return Err(Error::Config(
            "staining requires per-slice intensity scaling so slices stay independent".into(),
        ));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("stain batch must be at least 1".into()));
    }
    let w = cfg.weight.unwrap_or(stainer.weight);
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Parameter(format!("fusion weight {w} outside [0, 1]")));
    }
    let pre = preprocess_volume(volume, &cfg.preprocess)?;
    let [width, height, depth] = pre.dims();
    let tile = stainer.generator.config().input_size;
    let stride = cfg.stride.unwrap_or((tile / 2).max(1));
    let grid = tile_grid(width, height, tile, stride)?;
    let n = width * height;

    let meta = VolumeMeta::new(pre.dims(), pre.spacing_um(), Modality::He)?;
    let mut out = Volume::filled(meta, 3, 0u8);
    let mut acc = vec![0.0; 3 * n];
    let mut wsum = vec![0.0; n];
    for z in 0..depth {
        acc.iter_mut().for_each(|v| *v = 0.0);
        wsum.iter_mut().for_each(|v| *v = 0.0);
        let slice = pre.slice(z);
        for chunk in grid.chunks(cfg.batch) {
            let tiles: Vec<Tensor> = chunk
                .iter()
                .map(|&(x0, y0)| {
                    let mut data = vec![0.0; 3 * tile * tile];
                    for c in 0..3 {
                        for y in 0..tile {
                            for x in 0..tile {
                                let v = slice[((y0 + y) * width + x0 + x) * 3 + c];
                                data[(c * tile + y) * tile + x] = u8_to_unit(v);
                            }
                        }
                    }
                    Tensor::new(vec![3, tile, tile], data).unwrap()
                })
                .collect();
            let img = stainer
                .generator
                .forward_fused(&Tensor::stack(&tiles)?, &stainer.prototype, w)?
                .image;
            for (b, &(x0, y0)) in chunk.iter().enumerate() {
                let base = b * 3 * tile * tile;
                for y in 0..tile {
                    for x in 0..tile {
                        let f = feather(y, tile) * feather(x, tile);
                        let p = (y0 + y) * width + x0 + x;
                        wsum[p] += f;
                        for c in 0..3 {
                            acc[c * n + p] += f * img.data()[base + (c * tile + y) * tile + x];
                        }
                    }
                }
            }
        }
        let dst = out.slice_mut(z);
        for p in 0..n {
            for c in 0..3 {
                dst[p * 3 + c] = unit_to_u8(acc[c * n + p] / wsum[p]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feather_profile() {
        let w: Vec<f64> = (0..6).map(|i| feather(i, 6)).collect();
        assert_eq!(w, vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0]);
        assert!((0..5).all(|i| feather(i, 5) >= 1.0));
    }
}
