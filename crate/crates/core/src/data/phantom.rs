//! Synthetic voxel-aligned (phase-contrast, H&E, label) triplets.
//!
//! Nuclei are axis-aligned ellipsoids. In the phase-contrast channel a
//! nucleus is darker than the background below the focal plane and brighter
//! at or above it; the H&E rendering uses one fixed palette throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::volume::{LabelVolume, Modality, Volume, VolumeMeta};
use crate::error::{Error, Result};

/// Phase-contrast background intensity.
pub const BACKGROUND_LEVEL: f64 = 128.0;
/// Eosin-like background colour.
pub const BACKGROUND_RGB: [u8; 3] = [236, 172, 208];
/// Hematoxylin-like nuclear colour.
pub const NUCLEUS_RGB: [u8; 3] = [88, 56, 148];

const ATTEMPTS_PER_NUCLEUS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// Voxels along `(x, y, z)`.
    pub volume_dims: [usize; 3],
    pub voxel_spacing_um: [f64; 3],
    pub nuclei_count: usize,
    pub radius_range_um: [f64; 2],
    /// Slices below this index show dark nuclei, the rest bright ones.
    pub focal_plane_z: usize,
    /// Peak nuclear contrast as a fraction of the 8-bit range, at most 0.5.
    pub contrast_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            volume_dims: [64, 64, 16],
            voxel_spacing_um: [0.5, 0.5, 1.0],
            nuclei_count: 10,
            radius_range_um: [2.5, 4.0],
            focal_plane_z: 8,
            contrast_amplitude: 0.3,
            noise_sigma: 4.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        VolumeMeta::new(self.volume_dims, self.voxel_spacing_um, Modality::Bit)?;
        let [lo, hi] = self.radius_range_um;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Parameter(format!(
                "radius range must satisfy 0 < min <= max, got [{lo}, {hi}]"
            )));
        }
        if self.focal_plane_z > self.volume_dims[2] {
            return Err(Error::Parameter(format!(
                "focal plane {} outside [0, {}]",
                self.focal_plane_z, self.volume_dims[2]
            )));
        }
        if !(0.0..=0.5).contains(&self.contrast_amplitude) {
            return Err(Error::Parameter(format!(
                "contrast amplitude {} outside [0, 0.5]",
                self.contrast_amplitude
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!("noise sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nucleus {
    pub id: u32,
    pub center_um: [f64; 3],
    pub radii_um: [f64; 3],
}

impl Nucleus {
    pub fn analytic_volume_um3(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii_um.iter().product::<f64>()
    }

    /// Squared normalized radius of a physical point; `<= 1` means inside.
    fn rho2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center_um[i]) / self.radii_um[i]).powi(2))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub bit: Volume<u8>,
    pub he: Volume<u8>,
    pub labels: LabelVolume,
    pub nuclei: Vec<Nucleus>,
}

fn place_nuclei(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Nucleus>> {
    let extent: Vec<f64> = (0..3)
        .map(|i| (spec.volume_dims[i] - 1) as f64 * spec.voxel_spacing_um[i])
        .collect();
    let gap = spec.voxel_spacing_um.iter().cloned().fold(0.0, f64::max);
    let [rlo, rhi] = spec.radius_range_um;
    let mut placed: Vec<Nucleus> = Vec::with_capacity(spec.nuclei_count);
    let mut attempts = 0;
    while placed.len() < spec.nuclei_count {
        if attempts >= ATTEMPTS_PER_NUCLEUS * spec.nuclei_count {
            return Err(Error::Generation {
                placed: placed.len(),
                requested: spec.nuclei_count,
            });
        }
        attempts += 1;
        let radii = [0, 1, 2].map(|_| if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo });
        let mut center = [0.0; 3];
        let mut fits = true;
        for i in 0..3 {
            let (lo, hi) = (radii[i], extent[i] - radii[i]);
            if hi < lo {
                fits = false;
                break;
            }
            center[i] = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        }
        if !fits {
            continue;
        }
        let rmax = radii.iter().cloned().fold(0.0, f64::max);
        let clear = placed.iter().all(|n| {
            let other = n.radii_um.iter().cloned().fold(0.0, f64::max);
            let d2: f64 = (0..3).map(|i| (center[i] - n.center_um[i]).powi(2)).sum();
            d2.sqrt() >= rmax + other + gap
        });
        if clear {
            placed.push(Nucleus {
                id: placed.len() as u32 + 1,
                center_um: center,
                radii_um: radii,
            });
        }
    }
    Ok(placed)
}

/// Renders a phantom; the output is a pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let [nx, ny, nz] = spec.volume_dims;
    let sp = spec.voxel_spacing_um;
    let mut placement_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nuclei = place_nuclei(spec, &mut placement_rng)?;

    let bit_meta = VolumeMeta::new(spec.volume_dims, sp, Modality::Bit)?;
    let he_meta = VolumeMeta { modality: Modality::He, ..bit_meta };
    let label_meta = VolumeMeta { modality: Modality::Label, ..bit_meta };

    let mut labels = Volume::filled(label_meta, 1, 0u32);
    // nuclear shading in (0, 1], zero on background
    let mut shade = vec![0.0f64; bit_meta.voxel_count()];
    for n in &nuclei {
        let lo = |i: usize| (((n.center_um[i] - n.radii_um[i]) / sp[i]).floor().max(0.0)) as usize;
        let hi = |i: usize, d: usize| ((((n.center_um[i] + n.radii_um[i]) / sp[i]).ceil()) as usize).min(d - 1);
        for z in lo(2)..=hi(2, nz) {
            for y in lo(1)..=hi(1, ny) {
                for x in lo(0)..=hi(0, nx) {
                    let r2 = n.rho2([x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]]);
                    if r2 <= 1.0 {
                        let i = (z * ny + y) * nx + x;
                        labels.data_mut()[i] = n.id;
                        shade[i] = 0.6 + 0.4 * (1.0 - r2);
                    }
                }
            }
        }
    }

    let amplitude = spec.contrast_amplitude * 255.0;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut bit = Vec::with_capacity(bit_meta.voxel_count());
    for z in 0..nz {
        // one independent stream per slice keeps slices renderable in any order
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(z as u64 + 1);
        let polarity = if z < spec.focal_plane_z { -1.0 } else { 1.0 };
        for i in z * nx * ny..(z + 1) * nx * ny {
            let mut v = BACKGROUND_LEVEL + polarity * amplitude * shade[i];
            if spec.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            bit.push(v.clamp(0.0, 255.0).round_ties_even() as u8);
        }
    }

    let mut he = Vec::with_capacity(3 * he_meta.voxel_count());
    for &l in labels.data() {
        he.extend_from_slice(if l > 0 { &NUCLEUS_RGB } else { &BACKGROUND_RGB });
    }

    Ok(Phantom {
        bit: Volume::new(bit_meta, 1, bit)?,
        he: Volume::new(he_meta, 3, he)?,
        labels,
        nuclei,
    })
}
