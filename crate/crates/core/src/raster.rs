//! Multiband raster model and its on-disk container.
//!
//! A container is a JSON header (`<name>.rhdr`) next to a raw payload
//! (`<name>.rbin`) holding every band back-to-back, row-major, as
//! little-endian `f32`. All bands are assumed to share one pixel grid; any
//! resampling between sensors of different resolution happens upstream.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE: &str = "f32le";
pub const LAYOUT: &str = "band-sequential";

/// One spectral band of a [`Raster`].
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    name: String,
    wavelength_nm: Option<f64>,
    samples: Vec<f32>,
}

impl Band {
    pub fn new(name: impl Into<String>, wavelength_nm: Option<f64>, samples: Vec<f32>) -> Self {
        Band { name: name.into(), wavelength_nm, samples }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn wavelength_nm(&self) -> Option<f64> {
        self.wavelength_nm
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// Immutable multiband image.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    bands: Vec<Band>,
    nodata: Option<f32>,
    origin: (i64, i64),
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        bands: Vec<Band>,
        nodata: Option<f32>,
        origin: (i64, i64),
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("raster dimensions must be positive, got {width}x{height}")));
        }
        if bands.is_empty() {
            return Err(Error::Shape("raster needs at least one band".into()));
        }
        let mut seen = HashSet::new();
        for b in &bands {
            if !seen.insert(b.name.as_str()) {
                return Err(Error::format("bands", format!("duplicate band name `{}`", b.name)));
            }
            if b.samples.len() != width * height {
                return Err(Error::Shape(format!(
                    "band `{}` has {} samples, expected {}",
                    b.name,
                    b.samples.len(),
                    width * height
                )));
            }
            if let Some(w) = b.wavelength_nm {
                if !(w > 0.0 && w.is_finite()) {
                    return Err(Error::format("wavelength_nm", format!("band `{}`: {w} is not positive", b.name)));
                }
            }
        }
        Ok(Raster { width, height, bands, nodata, origin })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn band_names(&self) -> Vec<String> {
        self.bands.iter().map(|b| b.name.clone()).collect()
    }

    pub fn nodata(&self) -> Option<f32> {
        self.nodata
    }

    pub fn origin(&self) -> (i64, i64) {
        self.origin
    }

    pub fn into_bands(self) -> Vec<Band> {
        self.bands
    }

    /// Looks up a band by name.
    pub fn band(&self, name: &str) -> Result<&Band> {
        self.bands.iter().find(|b| b.name == name).ok_or_else(|| Error::Lookup {
            name: name.to_string(),
            available: self.band_names(),
        })
    }

    pub fn is_nodata(&self, value: f32) -> bool {
        self.nodata.is_some_and(|nd| nd.to_bits() == value.to_bits())
    }

    /// Pixels where every band is finite and differs (bitwise) from the nodata value.
    pub fn valid_mask(&self) -> Mask {
        let mut bits = vec![true; self.len()];
        for band in &self.bands {
            for (bit, &v) in bits.iter_mut().zip(&band.samples) {
                if !v.is_finite() || self.is_nodata(v) {
                    *bit = false;
                }
            }
        }
        Mask { width: self.width, height: self.height, bits }
    }
}

/// Per-pixel boolean selection; `true` means valid or selected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(format!("mask has {} bits, expected {}", bits.len(), width * height)));
        }
        Ok(Mask { width, height, bits })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Mask { width, height, bits: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::Shape(format!(
                "mask is {}x{}, data is {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Pixelwise conjunction.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        other.same_shape(self.width, self.height)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(Mask { width: self.width, height: self.height, bits })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BandHeader {
    name: String,
    wavelength_nm: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    width: usize,
    height: usize,
    dtype: String,
    layout: String,
    nodata: Option<f32>,
    origin: [i64; 2],
    bands: Vec<BandHeader>,
}

/// Payload path belonging to a header path (`x.rhdr` -> `x.rbin`).
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("rbin")
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| header_error(&e))?;
    if header.dtype != DTYPE {
        return Err(Error::format("dtype", format!("expected `{DTYPE}`, found `{}`", header.dtype)));
    }
    if header.layout != LAYOUT {
        return Err(Error::format("layout", format!("expected `{LAYOUT}`, found `{}`", header.layout)));
    }
    if header.width == 0 {
        return Err(Error::format("width", "must be at least 1"));
    }
    if header.height == 0 {
        return Err(Error::format("height", "must be at least 1"));
    }
    if header.bands.is_empty() {
        return Err(Error::format("bands", "must list at least one band"));
    }

    let bin = payload_path(path);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let n = header.width * header.height;
    let expected = 4 * n as u64 * header.bands.len() as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Size { expected, actual: bytes.len() as u64 });
    }

    let bands = header
        .bands
        .into_iter()
        .zip(bytes.chunks_exact(4 * n))
        .map(|(bh, chunk)| {
            let samples = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Band::new(bh.name, bh.wavelength_nm, samples)
        })
        .collect();
    Raster::new(header.width, header.height, bands, header.nodata, (header.origin[0], header.origin[1]))
}

/// Writes `path` (header) and its sibling payload. A NaN nodata value is
/// written as `null`; non-finite samples are invalid on load either way.
pub fn save_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        width: raster.width,
        height: raster.height,
        dtype: DTYPE.to_string(),
        layout: LAYOUT.to_string(),
        nodata: raster.nodata.filter(|v| v.is_finite()),
        origin: [raster.origin.0, raster.origin.1],
        bands: raster
            .bands
            .iter()
            .map(|b| BandHeader { name: b.name.clone(), wavelength_nm: b.wavelength_nm })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;

    let mut payload = Vec::with_capacity(4 * raster.len() * raster.bands.len());
    for band in &raster.bands {
        for v in &band.samples {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = payload_path(path);
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))
}

fn header_error(e: &serde_json::Error) -> Error {
    let msg = e.to_string();
    // serde reports the offending key in backticks, e.g. "missing field `width`".
    let field = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "header".to_string());
    Error::format(field, msg)
}
