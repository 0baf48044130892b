use bitstain_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::slice::Slice8;
use crate::data::volume::Volume;
use crate::error::{Error, Result};

pub const DEFAULT_TILE_SIZE: usize = 512;

/// Where a tile was cut from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileOrigin {
    pub volume_id: u32,
    pub z_index: usize,
    pub x: usize,
    pub y: usize,
}

/// Three-channel network input `(v, 255 - v, v)`, planar `3 x H x W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTile {
    width: usize,
    height: usize,
    channels: Vec<u8>,
    pub origin: TileOrigin,
}

/// RGB target-domain tile, planar `3 x H x W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeTile {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
    pub origin: TileOrigin,
}

/// Builds the (original, inverted, original) stack from an 8-bit slice.
pub fn make_three_channel(slice: &Slice8) -> Result<BitTile> {
    let n = slice.width * slice.height;
    if n == 0 || slice.pixels.len() != n {
        return Err(Error::Shape(format!(
            "{}x{} slice with {} pixels",
            slice.width,
            slice.height,
            slice.pixels.len()
        )));
    }
    let mut channels = Vec::with_capacity(3 * n);
    channels.extend_from_slice(&slice.pixels);
    channels.extend(slice.pixels.iter().map(|&v| 255 - v));
    channels.extend_from_slice(&slice.pixels);
    Ok(BitTile {
        width: slice.width,
        height: slice.height,
        channels,
        origin: TileOrigin {
            z_index: slice.z_index,
            ..TileOrigin::default()
        },
    })
}

/// `[-1, 1]` scaling used for every network input and output.
pub fn u8_to_unit(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

pub fn unit_to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round_ties_even() as u8
}

fn planar_to_tensor(width: usize, height: usize, planes: &[u8]) -> Tensor {
    Tensor::new(
        vec![3, height, width],
        planes.iter().map(|&v| u8_to_unit(v)).collect(),
    )
    .expect("planar tile length")
}

impl BitTile {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.channels[c * n..(c + 1) * n]
    }

    /// Checks the channel identities: `c1 = 255 - c0` and `c2 = c0`.
    pub fn satisfies_invariants(&self) -> bool {
        let (c0, c1, c2) = (self.channel(0), self.channel(1), self.channel(2));
        c0.iter()
            .zip(c1)
            .zip(c2)
            .all(|((&a, &b), &c)| b == 255 - a && c == a)
    }

    pub fn with_origin(mut self, origin: TileOrigin) -> Self {
        self.origin = origin;
        self
    }

    /// `[3, H, W]` tensor in `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        planar_to_tensor(self.width, self.height, &self.channels)
    }
}

impl HeTile {
    /// From interleaved RGB rows.
    pub fn from_interleaved(width: usize, height: usize, rgb: &[u8], origin: TileOrigin) -> Result<Self> {
        let n = width * height;
        if n == 0 || rgb.len() != 3 * n {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB tile with {} values",
                rgb.len()
            )));
        }
        let mut planar = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                planar[c * n + i] = rgb[3 * i + c];
            }
        }
        Ok(Self {
            width,
            height,
            rgb: planar,
            origin,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.rgb[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        planar_to_tensor(self.width, self.height, &self.rgb)
    }
}

/// Tile start offsets along one axis: multiples of `stride`, plus a final
/// tile clamped to the far edge so the whole axis is covered.
pub fn tile_offsets(len: usize, tile: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || tile == 0 {
        return Err(Error::Parameter("tile size and stride must be positive".into()));
    }
    if stride > tile {
        return Err(Error::Parameter(format!(
            "stride {stride} exceeds tile {tile}; tiles would leave gaps"
        )));
    }
    if tile > len {
        return Err(Error::Shape(format!("tile {tile} larger than extent {len}")));
    }
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + tile <= len).collect();
    let last = len - tile;
    if out.last() != Some(&last) {
        out.push(last);
    }
    Ok(out)
}

/// Row-major `(x, y)` offsets of square tiles covering a `width x height` plane.
pub fn tile_grid(width: usize, height: usize, tile: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    let xs = tile_offsets(width, tile, stride)?;
    let ys = tile_offsets(height, tile, stride)?;
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

/// A square crop of one volume slice, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile<T> {
    pub origin: TileOrigin,
    pub size: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

pub fn crop_slice<T: Copy>(vol: &Volume<T>, z: usize, x0: usize, y0: usize, size: usize) -> Vec<T> {
    let [w, _, _] = vol.dims();
    let c = vol.channels();
    let slice = vol.slice(z);
    let mut out = Vec::with_capacity(size * size * c);
    for y in y0..y0 + size {
        out.extend_from_slice(&slice[(y * w + x0) * c..(y * w + x0 + size) * c]);
    }
    out
}

/// Cuts every slice of `vol` into tiles; slices in order, tiles row-major.
pub fn tile_volume<T: Copy>(vol: &Volume<T>, volume_id: u32, tile: usize, stride: usize) -> Result<Vec<Tile<T>>> {
    let [w, h, depth] = vol.dims();
    let grid = tile_grid(w, h, tile, stride)?;
    let mut out = Vec::with_capacity(grid.len() * depth);
    for z in 0..depth {
        for &(x, y) in &grid {
            out.push(Tile {
                origin: TileOrigin {
                    volume_id,
                    z_index: z,
                    x,
                    y,
                },
                size: tile,
                channels: vol.channels(),
                data: crop_slice(vol, z, x, y, tile),
            });
        }
    }
    Ok(out)
}
