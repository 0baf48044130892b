use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw phase-contrast slice in arbitrary intensity units.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSlice {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    pub pixel_pitch_um: f64,
    pub z_index: usize,
    pub z_spacing_um: f64,
}

impl RawSlice {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        pixel_pitch_um: f64,
        z_index: usize,
        z_spacing_um: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty slice {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} slice needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if !(pixel_pitch_um > 0.0) || !(z_spacing_um > 0.0) {
            return Err(Error::Parameter(format!(
                "pixel pitch ({pixel_pitch_um}) and z spacing ({z_spacing_um}) must be positive"
            )));
        }
        if let Some(bad) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite intensity at pixel {bad}")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            pixel_pitch_um,
            z_index,
            z_spacing_um,
        })
    }

    /// Raw slice from 8-bit samples, unit pitch and spacing.
    pub fn from_u8(width: usize, height: usize, pixels: &[u8], z_index: usize) -> Result<Self> {
        Self::new(
            width,
            height,
            pixels.iter().map(|&v| f64::from(v)).collect(),
            1.0,
            z_index,
            1.0,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    fn with_pixels(&self, pixels: Vec<f64>) -> Self {
        Self {
            pixels,
            ..self.clone()
        }
    }
}

/// An 8-bit grayscale slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slice8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub z_index: usize,
}

/// Maps any integer offset into `0..n` by half-sample symmetric reflection
/// (`d c b a | a b c d | d c b a`), repeating for offsets beyond one period.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Normalized 1-D Gaussian taps truncated at four standard deviations.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(slice: &RawSlice, sigma_px: f64) -> Result<RawSlice> {
    if !(sigma_px > 0.0) || !sigma_px.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma_px}")));
    }
    let (w, h) = (slice.width, slice.height);
    let taps = gaussian_kernel(sigma_px);
    let radius = (taps.len() / 2) as isize;
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        let src = &slice.pixels[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                acc += k * src[reflect_index(x as isize + t as isize - radius, w)];
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                acc += k * rows[reflect_index(y as isize + t as isize - radius, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Ok(slice.with_pixels(out))
}

/// Removes slowly varying background: `slice - blur(slice, sigma_px)`.
///
/// The slice minimum is taken out before blurring; the blur preserves
/// constants, so the result is unchanged, and constant slices come out as
/// exact zeros instead of rounding noise.
pub fn background_subtract(slice: &RawSlice, sigma_px: f64) -> Result<RawSlice> {
    let floor = slice.pixels.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted = slice.with_pixels(slice.pixels.iter().map(|v| v - floor).collect());
    let blurred = gaussian_blur(&shifted, sigma_px)?;
    let pixels = shifted
        .pixels
        .iter()
        .zip(&blurred.pixels)
        .map(|(a, b)| a - b)
        .collect();
    Ok(slice.with_pixels(pixels))
}

/// Linear-interpolated percentile of already sorted data, `pct` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn check_percentiles(lo_pct: f64, hi_pct: f64) -> Result<()> {
    if !(0.0..100.0).contains(&lo_pct) || !(hi_pct > lo_pct && hi_pct <= 100.0) {
        return Err(Error::Parameter(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got ({lo_pct}, {hi_pct})"
        )));
    }
    Ok(())
}

/// Clip points `(P_lo, P_hi)` of a set of intensities.
pub fn clip_points(values: &[f64], lo_pct: f64, hi_pct: f64) -> Result<(f64, f64)> {
    check_percentiles(lo_pct, hi_pct)?;
    if values.is_empty() {
        return Err(Error::Shape("no intensities".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((
        percentile_sorted(&sorted, lo_pct),
        percentile_sorted(&sorted, hi_pct),
    ))
}

/// Clips to `[lo, hi]`, maps affinely onto `[0, 255]` and rounds half to even.
/// A degenerate range sends everything to 0.
pub fn scale_to_u8(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| {
            let t = (v.clamp(lo, hi) - lo) / (hi - lo) * 255.0;
            t.round_ties_even() as u8
        })
        .collect()
}

/// Per-slice percentile clipping and 8-bit scaling.
pub fn to_eight_bit(slice: &RawSlice, lo_pct: f64, hi_pct: f64) -> Result<Slice8> {
    let (lo, hi) = clip_points(&slice.pixels, lo_pct, hi_pct)?;
    Ok(Slice8 {
        width: slice.width,
        height: slice.height,
        pixels: scale_to_u8(&slice.pixels, lo, hi),
        z_index: slice.z_index,
    })
}

/// Whether 8-bit clip points are computed per slice or once for the stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingScope {
    #[default]
    PerSlice,
    PerVolume,
}

/// 8-bit scaling of a whole stack; with [`ScalingScope::PerVolume`] the clip
/// points are shared by all slices.
pub fn to_eight_bit_stack(
    slices: &[RawSlice],
    lo_pct: f64,
    hi_pct: f64,
    scope: ScalingScope,
) -> Result<Vec<Slice8>> {
    match scope {
        ScalingScope::PerSlice => slices
            .iter()
            .map(|s| to_eight_bit(s, lo_pct, hi_pct))
            .collect(),
        ScalingScope::PerVolume => {
            let all: Vec<f64> = slices.iter().flat_map(|s| s.pixels.iter().copied()).collect();
            let (lo, hi) = clip_points(&all, lo_pct, hi_pct)?;
            Ok(slices
                .iter()
                .map(|s| Slice8 {
                    width: s.width,
                    height: s.height,
                    pixels: scale_to_u8(&s.pixels, lo, hi),
                    z_index: s.z_index,
                })
                .collect())
        }
    }
}
