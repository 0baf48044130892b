use serde::{Deserialize, Serialize};

use crate::data::slice::{background_subtract, to_eight_bit_stack, RawSlice, ScalingScope, Slice8};
use crate::data::tile::{crop_slice, make_three_channel, tile_grid, BitTile, HeTile, TileOrigin};
use crate::data::volume::{Modality, Volume, VolumeMeta};
use crate::error::{Error, Result};

/// Raw slice to network input: background subtraction, percentile clipping
/// to 8 bit, then the three-channel stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub sigma_px: f64,
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub scope: ScalingScope,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            sigma_px: 30.0,
            lo_pct: 1.0,
            hi_pct: 99.0,
            scope: ScalingScope::PerSlice,
        }
    }
}

pub fn raw_slices<T: Copy + Into<f64>>(vol: &Volume<T>) -> Result<Vec<RawSlice>> {
    if vol.channels() != 1 {
        return Err(Error::Shape(format!(
            "raw volumes are single channel, got {}",
            vol.channels()
        )));
    }
    let [w, h, depth] = vol.dims();
    let [dx, _, dz] = vol.spacing_um();
    (0..depth)
        .map(|z| {
            let px = vol.slice(z).iter().map(|&v| v.into()).collect();
            RawSlice::new(w, h, px, dx, z, dz)
        })
        .collect()
}

pub fn preprocess_stack<T: Copy + Into<f64>>(vol: &Volume<T>, cfg: &PreprocessConfig) -> Result<Vec<Slice8>> {
    let subtracted = raw_slices(vol)?
        .iter()
        .map(|s| background_subtract(s, cfg.sigma_px))
        .collect::<Result<Vec<_>>>()?;
    to_eight_bit_stack(&subtracted, cfg.lo_pct, cfg.hi_pct, cfg.scope)
}

/// Preprocessed three-channel volume, channels interleaved per voxel.
pub fn preprocess_volume<T: Copy + Into<f64>>(vol: &Volume<T>, cfg: &PreprocessConfig) -> Result<Volume<u8>> {
    let slices = preprocess_stack(vol, cfg)?;
    let meta = VolumeMeta::new(vol.dims(), vol.spacing_um(), Modality::Bit)?;
    let mut data = Vec::with_capacity(meta.voxel_count() * 3);
    for s in &slices {
        for &v in &s.pixels {
            data.extend_from_slice(&[v, 255 - v, v]);
        }
    }
    Volume::new(meta, 3, data)
}

/// Reads a preprocessed slice back as its original 8-bit channel, checking
/// the channel identities on the way.
pub fn stacked_slice(vol: &Volume<u8>, z: usize) -> Result<Slice8> {
    if vol.channels() != 3 {
        return Err(Error::Shape("preprocessed volumes have three channels".into()));
    }
    let [w, h, _] = vol.dims();
    let mut pixels = Vec::with_capacity(w * h);
    for (i, px) in vol.slice(z).chunks(3).enumerate() {
        if px[1] != 255 - px[0] || px[2] != px[0] {
            return Err(Error::Parameter(format!(
                "slice {z} pixel {i} is not an (original, inverted, original) stack"
            )));
        }
        pixels.push(px[0]);
    }
    Ok(Slice8 {
        width: w,
        height: h,
        pixels,
        z_index: z,
    })
}

/// Tiles a preprocessed volume into network inputs.
pub fn bit_tiles(pre: &Volume<u8>, volume_id: u32, tile: usize, stride: usize) -> Result<Vec<BitTile>> {
    let [w, h, depth] = pre.dims();
    let grid = tile_grid(w, h, tile, stride)?;
    let mut out = Vec::with_capacity(grid.len() * depth);
    for z in 0..depth {
        let s = stacked_slice(pre, z)?;
        for &(x, y) in &grid {
            let crop = Slice8 {
                width: tile,
                height: tile,
                pixels: (y..y + tile)
                    .flat_map(|yy| s.pixels[yy * w + x..yy * w + x + tile].iter().copied())
                    .collect(),
                z_index: z,
            };
            out.push(make_three_channel(&crop)?.with_origin(TileOrigin {
                volume_id,
                z_index: z,
                x,
                y,
            }));
        }
    }
    Ok(out)
}

pub fn he_tiles(he: &Volume<u8>, volume_id: u32, tile: usize, stride: usize) -> Result<Vec<HeTile>> {
    if he.channels() != 3 {
        return Err(Error::Shape("H&E volumes are RGB".into()));
    }
    let [w, h, depth] = he.dims();
    let grid = tile_grid(w, h, tile, stride)?;
    let mut out = Vec::with_capacity(grid.len() * depth);
    for z in 0..depth {
        for &(x, y) in &grid {
            let origin = TileOrigin {
                volume_id,
                z_index: z,
                x,
                y,
            };
            out.push(HeTile::from_interleaved(tile, tile, &crop_slice(he, z, x, y, tile), origin)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocessed_volume_holds_channel_identities() {
        let meta = VolumeMeta::new([8, 6, 3], [0.5, 0.5, 1.0], Modality::Bit).unwrap();
        let raw = Volume::new(meta, 1, (0..144).map(|i| ((i * 37) % 251) as u8).collect()).unwrap();
        let pre = preprocess_volume(&raw, &PreprocessConfig { sigma_px: 2.0, ..Default::default() }).unwrap();
        assert_eq!(pre.channels(), 3);
        for z in 0..3 {
            stacked_slice(&pre, z).unwrap();
        }
        let tiles = bit_tiles(&pre, 0, 4, 2).unwrap();
        assert!(tiles.iter().all(|t| t.satisfies_invariants()));
        assert_eq!(tiles.len(), 3 * 3 * 2);
    }

    #[test]
    fn broken_stack_rejected() {
        let meta = VolumeMeta::new([1, 1, 1], [1.0; 3], Modality::Bit).unwrap();
        let v = Volume::new(meta, 3, vec![10, 10, 10]).unwrap();
        assert!(stacked_slice(&v, 0).is_err());
    }
}
