use serde::{Deserialize, Serialize};

use super::masks::{connected_components, stack_masks_2d_to_3d, LabelSlice};
use crate::data::{LabelVolume, Volume};
use crate::error::{Error, Result};

/// Reference optical-density vectors for haematoxylin and eosin.
const HEMATOXYLIN_OD: [f64; 3] = [0.650, 0.704, 0.286];
const EOSIN_OD: [f64; 3] = [0.072, 0.990, 0.105];

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Optical density of an 8-bit intensity.
pub fn optical_density(v: u8) -> f64 {
    -((f64::from(v) + 1.0) / 256.0).log10()
}

/// Colour deconvolution onto the haematoxylin channel.
#[derive(Clone, Debug)]
pub struct ColorDeconvolution {
    /// Row of the inverse stain matrix that yields the haematoxylin amount.
    h_row: [f64; 3],
}

impl Default for ColorDeconvolution {
    fn default() -> Self {
        let h = normalize(HEMATOXYLIN_OD);
        let e = normalize(EOSIN_OD);
        let r = normalize(cross(h, e));
        let m = nalgebra::Matrix3::new(h[0], h[1], h[2], e[0], e[1], e[2], r[0], r[1], r[2]);
        let inv = m.try_inverse().expect("stain vectors are independent");
        Self {
            h_row: [inv[(0, 0)], inv[(1, 0)], inv[(2, 0)]],
        }
    }
}

impl ColorDeconvolution {
    pub fn hematoxylin(&self, rgb: [u8; 3]) -> f64 {
        (0..3).map(|c| optical_density(rgb[c]) * self.h_row[c]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Minimum haematoxylin optical density of a nucleus pixel.
    pub threshold: f64,
    /// Smallest 2-D component kept, in pixels.
    pub min_area: usize,
    pub iou_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.35,
            min_area: 4,
            iou_threshold: 0.5,
        }
    }
}

/// Classical nuclei segmenter for H&E-coloured volumes: haematoxylin
/// thresholding per slice, 4-connected components, then greedy IoU stacking.
#[derive(Clone, Debug, Default)]
pub struct HematoxylinDetector {
    pub config: DetectorConfig,
    deconv: ColorDeconvolution,
}

impl HematoxylinDetector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        if !config.threshold.is_finite() {
            return Err(Error::Parameter("detector threshold must be finite".into()));
        }
        Ok(Self {
            config,
            deconv: ColorDeconvolution::default(),
        })
    }

    pub fn segment_slice(&self, rgb: &[u8], width: usize, height: usize) -> LabelSlice {
        let mask: Vec<bool> = rgb
            .chunks_exact(3)
            .map(|p| self.deconv.hematoxylin([p[0], p[1], p[2]]) >= self.config.threshold)
            .collect();
        let mut labels = connected_components(&mask, width, height);
        let max = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut area = vec![0usize; max + 1];
        for &l in &labels {
            area[l as usize] += 1;
        }
        for l in labels.iter_mut() {
            if *l > 0 && area[*l as usize] < self.config.min_area {
                *l = 0;
            }
        }
        LabelSlice {
            width,
            height,
            labels,
        }
    }

    pub fn segment(&self, volume: &Volume<u8>) -> Result<LabelVolume> {
        if volume.channels() != 3 {
            return Err(Error::Shape(format!(
                "detector needs an RGB volume, got {} channels",
                volume.channels()
            )));
        }
        let [w, h, d] = volume.dims();
        let slices: Vec<LabelSlice> = (0..d).map(|z| self.segment_slice(volume.slice(z), w, h)).collect();
        stack_masks_2d_to_3d(&slices, volume.spacing_um(), self.config.iou_threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{BACKGROUND_RGB, NUCLEUS_RGB};

    #[test]
    fn separates_phantom_palette() {
        let d = ColorDeconvolution::default();
        let cfg = DetectorConfig::default();
        assert!(d.hematoxylin(NUCLEUS_RGB) > cfg.threshold);
        assert!(d.hematoxylin(BACKGROUND_RGB) < cfg.threshold);
        assert!(d.hematoxylin([255, 255, 255]).abs() < 1e-12);
    }

    #[test]
    fn drops_small_components() {
        let det = HematoxylinDetector::default();
        let mut rgb = Vec::new();
        for i in 0..16 {
            let c = if i < 4 || i == 10 { NUCLEUS_RGB } else { BACKGROUND_RGB };
            rgb.extend_from_slice(&c);
        }
        let s = det.segment_slice(&rgb, 4, 4);
        assert_eq!(s.labels.iter().filter(|&&l| l > 0).count(), 4);
    }
}
