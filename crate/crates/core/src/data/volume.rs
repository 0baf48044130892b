//! In-memory volumes and their on-disk form: one PNG per axial slice
//! (`slice_0000.png`, ...) next to a `meta.txt` key-value sidecar.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Bit,
    He,
    Label,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Bit => "bit",
            Modality::He => "he",
            Modality::Label => "label",
        })
    }
}

impl FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bit" => Ok(Modality::Bit),
            "he" => Ok(Modality::He),
            "label" => Ok(Modality::Label),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

/// Voxel grid size `(x, y, z)` and physical spacing in micrometres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing_um: [f64; 3],
    pub modality: Modality,
}

impl VolumeMeta {
    pub fn new(dims: [usize; 3], spacing_um: [f64; 3], modality: Modality) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("volume dims must be positive, got {dims:?}")));
        }
        if spacing_um.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!(
                "voxel spacing must be positive, got {spacing_um:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing_um,
            modality,
        })
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel_volume_um3(&self) -> f64 {
        self.spacing_um.iter().product()
    }
}

/// Dense volume stored slice by slice, each slice row-major with
/// interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub meta: VolumeMeta,
    channels: usize,
    data: Vec<T>,
}

/// Integer instance labels, 0 for background.
pub type LabelVolume = Volume<u32>;

impl<T: Copy> Volume<T> {
    pub fn new(meta: VolumeMeta, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || data.len() != meta.voxel_count() * channels {
            return Err(Error::Shape(format!(
                "volume {:?} x {channels} channels needs {} values, got {}",
                meta.dims,
                meta.voxel_count() * channels,
                data.len()
            )));
        }
        Ok(Self {
            meta,
            channels,
            data,
        })
    }

    pub fn filled(meta: VolumeMeta, channels: usize, value: T) -> Self {
        Self {
            meta,
            channels,
            data: vec![value; meta.voxel_count() * channels],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.meta.dims
    }

    pub fn spacing_um(&self) -> [f64; 3] {
        self.meta.spacing_um
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn depth(&self) -> usize {
        self.meta.dims[2]
    }

    fn slice_stride(&self) -> usize {
        self.meta.slice_len() * self.channels
    }

    pub fn slice(&self, z: usize) -> &[T] {
        let s = self.slice_stride();
        &self.data[z * s..(z + 1) * s]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [T] {
        let s = self.slice_stride();
        &mut self.data[z * s..(z + 1) * s]
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        ((z * self.meta.dims[1] + y) * self.meta.dims[0] + x) * self.channels
    }

    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> T {
        self.data[self.index(x, y, z) + c]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, v: T) {
        let i = self.index(x, y, z) + c;
        self.data[i] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            meta: self.meta,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A volume read back from disk, typed by its slice pixel format.
#[derive(Clone, Debug, PartialEq)]
pub enum LoadedVolume {
    Gray8(Volume<u8>),
    Rgb8(Volume<u8>),
    Gray16(Volume<u16>),
}

impl LoadedVolume {
    pub fn meta(&self) -> &VolumeMeta {
        match self {
            LoadedVolume::Gray8(v) | LoadedVolume::Rgb8(v) => &v.meta,
            LoadedVolume::Gray16(v) => &v.meta,
        }
    }
}

pub fn slice_file_name(z: usize) -> String {
    format!("slice_{z:04}.png")
}

fn write_meta(dir: &Path, meta: &VolumeMeta) -> Result<()> {
    let [x, y, z] = meta.dims;
    let [dx, dy, dz] = meta.spacing_um;
    let text = format!(
        "dims = {x} {y} {z}\nspacing_um = {dx} {dy} {dz}\nmodality = {}\n",
        meta.modality
    );
    let path = dir.join(META_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_meta(dir: &Path) -> Result<VolumeMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut dims = None;
    let mut spacing = None;
    let mut modality = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::io(&path, format!("line {}: {msg}", n + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
        let nums = |v: &str| -> Vec<String> { v.split_whitespace().map(str::to_string).collect() };
        match key.trim() {
            "dims" => {
                let parts: std::result::Result<Vec<usize>, _> =
                    nums(value).iter().map(|s| s.parse()).collect();
                match parts {
                    Ok(p) if p.len() == 3 => dims = Some([p[0], p[1], p[2]]),
                    _ => return Err(bad(format!("bad dims `{}`", value.trim()))),
                }
            }
            "spacing_um" => {
                let parts: std::result::Result<Vec<f64>, _> =
                    nums(value).iter().map(|s| s.parse()).collect();
                match parts {
                    Ok(p) if p.len() == 3 => spacing = Some([p[0], p[1], p[2]]),
                    _ => return Err(bad(format!("bad spacing_um `{}`", value.trim()))),
                }
            }
            "modality" => modality = Some(value.parse::<Modality>().map_err(bad)?),
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    let missing = |k: &str| Error::io(&path, format!("missing key `{k}`"));
    VolumeMeta::new(
        dims.ok_or_else(|| missing("dims"))?,
        spacing.ok_or_else(|| missing("spacing_um"))?,
        modality.ok_or_else(|| missing("modality"))?,
    )
}

/// Pixel formats that can be written as PNG slices.
pub trait SliceFormat: Copy {
    fn write_slice(path: &Path, width: u32, height: u32, channels: usize, data: &[Self]) -> Result<()>;
}

fn png_err(path: &Path) -> impl Fn(image::ImageError) -> Error + '_ {
    move |e| Error::io(path, e)
}

impl SliceFormat for u8 {
    fn write_slice(path: &Path, width: u32, height: u32, channels: usize, data: &[u8]) -> Result<()> {
        match channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_raw(width, height, data.to_vec())
                .expect("slice length checked")
                .save(path)
                .map_err(png_err(path)),
            3 => ImageBuffer::<Rgb<u8>, _>::from_raw(width, height, data.to_vec())
                .expect("slice length checked")
                .save(path)
                .map_err(png_err(path)),
            c => Err(Error::Shape(format!("cannot write {c}-channel 8-bit slices"))),
        }
    }
}

impl SliceFormat for u16 {
    fn write_slice(path: &Path, width: u32, height: u32, channels: usize, data: &[u16]) -> Result<()> {
        if channels != 1 {
            return Err(Error::Shape("16-bit slices must be single channel".into()));
        }
        ImageBuffer::<Luma<u16>, _>::from_raw(width, height, data.to_vec())
            .expect("slice length checked")
            .save(path)
            .map_err(png_err(path))
    }
}

pub fn save_volume<T: SliceFormat>(volume: &Volume<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [w, h, depth] = volume.meta.dims;
    for z in 0..depth {
        let path = dir.join(slice_file_name(z));
        T::write_slice(&path, w as u32, h as u32, volume.channels, volume.slice(z))?;
    }
    write_meta(dir, &volume.meta)
}

/// Writes instance labels as 16-bit slices; ids above 65535 are rejected.
pub fn save_labels(volume: &LabelVolume, dir: impl AsRef<Path>) -> Result<()> {
    if let Some(&too_big) = volume.data().iter().find(|&&v| v > u32::from(u16::MAX)) {
        return Err(Error::Parameter(format!(
            "label id {too_big} does not fit a 16-bit slice"
        )));
    }
    save_volume(&volume.map(|v| v as u16), dir)
}

fn slice_index(name: &str) -> Option<usize> {
    name.strip_prefix("slice_")?.strip_suffix(".png")?.parse().ok()
}

fn list_slices(dir: &Path, depth: usize) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = std::collections::BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(i) = slice_index(&name) {
            found.insert(i, entry.path());
        }
    }
    let mut out = Vec::with_capacity(depth);
    for z in 0..depth {
        match found.remove(&z) {
            Some(p) => out.push(p),
            None => {
                return Err(Error::io(
                    dir.join(slice_file_name(z)),
                    format!("missing slice index {z}"),
                ))
            }
        }
    }
    if let Some((&extra, path)) = found.iter().next() {
        return Err(Error::io(
            path,
            format!("slice index {extra} beyond declared depth {depth}"),
        ));
    }
    Ok(out)
}

pub fn load_volume(dir: impl AsRef<Path>) -> Result<LoadedVolume> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let [w, h, depth] = meta.dims;
    let paths = list_slices(dir, depth)?;
    let mut gray8 = Vec::new();
    let mut rgb8 = Vec::new();
    let mut gray16 = Vec::new();
    let mut kind = None;
    for path in &paths {
        let img = image::open(path).map_err(|e| Error::io(path, e))?;
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(Error::io(
                path,
                format!(
                    "slice is {}x{}, metadata says {w}x{h}",
                    img.width(),
                    img.height()
                ),
            ));
        }
        let this = match img {
            image::DynamicImage::ImageLuma8(b) => {
                gray8.extend_from_slice(b.as_raw());
                0
            }
            image::DynamicImage::ImageRgb8(b) => {
                rgb8.extend_from_slice(b.as_raw());
                1
            }
            image::DynamicImage::ImageLuma16(b) => {
                gray16.extend_from_slice(b.as_raw());
                2
            }
            other => {
                return Err(Error::io(
                    path,
                    format!("unsupported pixel format {:?}", other.color()),
                ))
            }
        };
        if *kind.get_or_insert(this) != this {
            return Err(Error::io(path, "pixel format differs from earlier slices"));
        }
    }
    Ok(match kind.unwrap_or(0) {
        0 => LoadedVolume::Gray8(Volume::new(meta, 1, gray8)?),
        1 => LoadedVolume::Rgb8(Volume::new(meta, 3, rgb8)?),
        _ => LoadedVolume::Gray16(Volume::new(meta, 1, gray16)?),
    })
}

pub fn load_gray8(dir: impl AsRef<Path>) -> Result<Volume<u8>> {
    let dir = dir.as_ref();
    match load_volume(dir)? {
        LoadedVolume::Gray8(v) => Ok(v),
        _ => Err(Error::io(dir, "expected 8-bit grayscale slices")),
    }
}

pub fn load_rgb8(dir: impl AsRef<Path>) -> Result<Volume<u8>> {
    let dir = dir.as_ref();
    match load_volume(dir)? {
        LoadedVolume::Rgb8(v) => Ok(v),
        _ => Err(Error::io(dir, "expected 8-bit RGB slices")),
    }
}

/// Reads instance labels from 16-bit (or 8-bit) grayscale slices.
pub fn load_labels(dir: impl AsRef<Path>) -> Result<LabelVolume> {
    let dir = dir.as_ref();
    match load_volume(dir)? {
        LoadedVolume::Gray16(v) => Ok(v.map(u32::from)),
        LoadedVolume::Gray8(v) => Ok(v.map(u32::from)),
        LoadedVolume::Rgb8(_) => Err(Error::io(dir, "expected grayscale label slices")),
    }
}
