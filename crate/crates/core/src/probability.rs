use crate::error::{Error, Result};
use crate::raster::{Band, Mask, Raster};

/// Band name used when a probability map is written as a raster.
pub const PROBABILITY_BAND: &str = "probability";
pub const PROBABILITY_NODATA: f32 = -1.0;

/// Per-pixel palm likelihood. `NaN` marks pixels without a prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!("{} values for a {width}x{height} map", values.len())));
        }
        Ok(ProbabilityMap { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        ProbabilityMap { width, height, values: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let v = self.values[y * self.width + x];
        (!v.is_nan()).then_some(v)
    }

    pub fn valid_mask(&self) -> Mask {
        Mask::new(self.width, self.height, self.values.iter().map(|v| !v.is_nan()).collect())
            .expect("map is consistent")
    }

    pub fn to_raster(&self, origin: (i64, i64)) -> Raster {
        let samples = self
            .values
            .iter()
            .map(|&v| if v.is_nan() { PROBABILITY_NODATA } else { v })
            .collect();
        Raster::new(
            self.width,
            self.height,
            vec![Band::new(PROBABILITY_BAND, None, samples)],
            Some(PROBABILITY_NODATA),
            origin,
        )
        .expect("map dimensions are valid")
    }

    pub fn from_raster(raster: &Raster) -> Result<Self> {
        let band = raster.band(PROBABILITY_BAND)?;
        let values = band
            .samples()
            .iter()
            .map(|&v| if v.is_finite() && !raster.is_nodata(v) { v } else { f32::NAN })
            .collect();
        ProbabilityMap::new(raster.width(), raster.height(), values)
    }
}
