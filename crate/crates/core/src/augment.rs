//! Seeded augmentation of training tiles and their annotations.
//!
//! Every random operation draws from its own ChaCha stream keyed by
//! `(seed, tile id, operation index)`, so results do not depend on the order
//! or thread in which tiles are processed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationSet, Crown};
use crate::error::{Error, Result};
use crate::raster::{Band, Raster};

/// Crowns keeping less than this fraction of their disc area after clipping are dropped.
pub const MIN_RETAINED_AREA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    Crop { size: usize },
    GaussianNoise { sigma: f64 },
    Gamma { min: f64, max: f64 },
    FlipH {
        #[serde(default = "always")]
        probability: f64,
    },
    FlipV {
        #[serde(default = "always")]
        probability: f64,
    },
    Scale { min: f64, max: f64 },
}

fn always() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub operations: Vec<AugmentOp>,
    #[serde(default)]
    pub seed: u64,
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        for op in &self.operations {
            let ok = match *op {
                AugmentOp::Crop { size } => size > 0,
                AugmentOp::GaussianNoise { sigma } => sigma >= 0.0 && sigma.is_finite(),
                AugmentOp::Gamma { min, max } | AugmentOp::Scale { min, max } => {
                    min > 0.0 && min <= max && max.is_finite()
                }
                AugmentOp::FlipH { probability } | AugmentOp::FlipV { probability } => {
                    (0.0..=1.0).contains(&probability)
                }
            };
            if !ok {
                return Err(Error::Parameter(format!("invalid augmentation {op:?}")));
            }
        }
        Ok(())
    }

    /// Runs every operation in order on one tile.
    pub fn apply(&self, tile_id: u64, tile: &Raster, ann: &AnnotationSet) -> Result<(Raster, AnnotationSet)> {
        self.validate()?;
        let mut raster = tile.clone();
        let mut ann = ann.clone();
        for (i, op) in self.operations.iter().enumerate() {
            let mut rng = op_rng(self.seed, tile_id, i as u64);
            (raster, ann) = match *op {
                AugmentOp::Crop { size } => random_crop(&raster, &ann, size, &mut rng)?,
                AugmentOp::GaussianNoise { sigma } => (gaussian_noise(&raster, sigma, &mut rng)?, ann),
                AugmentOp::Gamma { min, max } => {
                    let e = draw(&mut rng, min, max);
                    (gamma_adjust(&raster, e)?, ann)
                }
                AugmentOp::FlipH { probability } => {
                    if rng.random::<f64>() < probability {
                        flip_h(&raster, &ann)
                    } else {
                        (raster, ann)
                    }
                }
                AugmentOp::FlipV { probability } => {
                    if rng.random::<f64>() < probability {
                        flip_v(&raster, &ann)
                    } else {
                        (raster, ann)
                    }
                }
                AugmentOp::Scale { min, max } => {
                    let f = draw(&mut rng, min, max);
                    scale(&raster, &ann, f)?
                }
            };
        }
        Ok((raster, ann))
    }
}

fn draw(rng: &mut ChaCha8Rng, min: f64, max: f64) -> f64 {
    if min == max {
        min
    } else {
        rng.random_range(min..max)
    }
}

/// Independent generator for one `(seed, tile, operation)` triple.
pub fn op_rng(seed: u64, tile_id: u64, op_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ splitmix64(tile_id));
    rng.set_stream(op_index);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable tile identifier from a file stem (64-bit FNV-1a).
pub fn tile_id(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

fn map_bands(tile: &Raster, f: impl Fn(&[f32]) -> Vec<f32>) -> Raster {
    let bands = tile
        .bands()
        .iter()
        .map(|b| Band::new(b.name(), b.wavelength_nm(), f(b.samples())))
        .collect();
    Raster::new(tile.width(), tile.height(), bands, tile.nodata(), tile.origin()).expect("same geometry")
}

/// Mirrors about the vertical axis.
pub fn flip_h(tile: &Raster, ann: &AnnotationSet) -> (Raster, AnnotationSet) {
    let w = tile.width();
    let raster = map_bands(tile, |s| {
        let mut out = s.to_vec();
        for row in out.chunks_exact_mut(w) {
            row.reverse();
        }
        out
    });
    let crowns = ann
        .crowns
        .iter()
        .map(|c| Crown { cx: (w - 1) as f64 - c.cx, ..c.clone() })
        .collect();
    (raster, AnnotationSet { crowns })
}

/// Mirrors about the horizontal axis.
pub fn flip_v(tile: &Raster, ann: &AnnotationSet) -> (Raster, AnnotationSet) {
    let (w, h) = (tile.width(), tile.height());
    let raster = map_bands(tile, |s| s.chunks_exact(w).rev().flatten().copied().collect());
    let crowns = ann
        .crowns
        .iter()
        .map(|c| Crown { cy: (h - 1) as f64 - c.cy, ..c.clone() })
        .collect();
    (raster, AnnotationSet { crowns })
}

/// Keeps crowns that retain at least half their disc area inside `width x height`.
pub fn clip_annotations(crowns: impl IntoIterator<Item = Crown>, width: usize, height: usize) -> AnnotationSet {
    let crowns = crowns
        .into_iter()
        .filter(|c| {
            let full = c.full_area();
            full > 0 && c.area_within(0, 0, width as i64, height as i64) as f64 >= MIN_RETAINED_AREA * full as f64
        })
        .collect();
    AnnotationSet { crowns }
}

pub fn random_crop(
    tile: &Raster,
    ann: &AnnotationSet,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Raster, AnnotationSet)> {
    let (w, h) = (tile.width(), tile.height());
    if size == 0 || size > w || size > h {
        return Err(Error::Parameter(format!("crop size {size} does not fit a {w}x{h} tile")));
    }
    let x0 = rng.random_range(0..=w - size);
    let y0 = rng.random_range(0..=h - size);
    Ok(crop_at(tile, ann, x0, y0, size))
}

pub fn crop_at(tile: &Raster, ann: &AnnotationSet, x0: usize, y0: usize, size: usize) -> (Raster, AnnotationSet) {
    let w = tile.width();
    let bands = tile
        .bands()
        .iter()
        .map(|b| {
            let s = b.samples();
            let mut out = Vec::with_capacity(size * size);
            for y in y0..y0 + size {
                out.extend_from_slice(&s[y * w + x0..y * w + x0 + size]);
            }
            Band::new(b.name(), b.wavelength_nm(), out)
        })
        .collect();
    let (ox, oy) = tile.origin();
    let raster = Raster::new(size, size, bands, tile.nodata(), (ox + x0 as i64, oy + y0 as i64))
        .expect("crop geometry is valid");
    let shifted = ann
        .crowns
        .iter()
        .map(|c| Crown { cx: c.cx - x0 as f64, cy: c.cy - y0 as f64, ..c.clone() });
    (raster, clip_annotations(shifted, size, size))
}

/// Adds zero-mean normal noise to every valid pixel and clamps at zero.
pub fn gaussian_noise(tile: &Raster, sigma: f64, rng: &mut impl Rng) -> Result<Raster> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(tile.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    let valid = tile.valid_mask();
    let bands = tile
        .bands()
        .iter()
        .map(|b| {
            let out = b
                .samples()
                .iter()
                .zip(valid.bits())
                .map(|(&v, &ok)| if ok { (f64::from(v) + normal.sample(rng)).max(0.0) as f32 } else { v })
                .collect();
            Band::new(b.name(), b.wavelength_nm(), out)
        })
        .collect();
    Raster::new(tile.width(), tile.height(), bands, tile.nodata(), tile.origin())
}

/// Gamma correction `v -> v^exponent` on valid pixels.
pub fn gamma_adjust(tile: &Raster, exponent: f64) -> Result<Raster> {
    if !(exponent > 0.0 && exponent.is_finite()) {
        return Err(Error::Parameter(format!("gamma exponent must be positive, got {exponent}")));
    }
    let valid = tile.valid_mask();
    for b in tile.bands() {
        if let Some(v) = b.samples().iter().zip(valid.bits()).find(|(v, ok)| **ok && **v < 0.0) {
            return Err(Error::Domain(format!("band `{}` has negative sample {}", b.name(), v.0)));
        }
    }
    if exponent == 1.0 {
        return Ok(tile.clone());
    }
    Ok(map_bands(tile, |s| {
        s.iter()
            .zip(valid.bits())
            .map(|(&v, &ok)| if ok { f64::from(v).powf(exponent) as f32 } else { v })
            .collect()
    }))
}

/// Bilinear resize to `floor(factor * dim)`; output pixel `u` samples source `u / factor`.
pub fn scale(tile: &Raster, ann: &AnnotationSet, factor: f64) -> Result<(Raster, AnnotationSet)> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Parameter(format!("scale factor must be positive, got {factor}")));
    }
    let (w, h) = (tile.width(), tile.height());
    let nw = (factor * w as f64).floor() as usize;
    let nh = (factor * h as f64).floor() as usize;
    if nw == 0 || nh == 0 {
        return Err(Error::Parameter(format!("scaling {w}x{h} by {factor} leaves an empty tile")));
    }
    if factor == 1.0 {
        return Ok((tile.clone(), ann.clone()));
    }
    let valid = tile.valid_mask();
    let fill = tile.nodata().unwrap_or(f32::NAN);
    let axis = |n: usize, limit: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|u| {
                let s = (u as f64 / factor).min((limit - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(limit - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = axis(nw, w);
    let ys = axis(nh, h);
    let bands = tile
        .bands()
        .iter()
        .map(|b| {
            let s = b.samples();
            let mut out = Vec::with_capacity(nw * nh);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let taps = [
                        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                        (y0 * w + x1, fx * (1.0 - fy)),
                        (y1 * w + x0, (1.0 - fx) * fy),
                        (y1 * w + x1, fx * fy),
                    ];
                    if taps.iter().any(|&(i, wt)| wt > 0.0 && !valid.bits()[i]) {
                        out.push(fill);
                        continue;
                    }
                    let v: f64 = taps.iter().filter(|t| t.1 > 0.0).map(|&(i, wt)| wt * f64::from(s[i])).sum();
                    out.push(v as f32);
                }
            }
            Band::new(b.name(), b.wavelength_nm(), out)
        })
        .collect();
    let raster = Raster::new(nw, nh, bands, tile.nodata(), tile.origin())?;
    let crowns = ann.crowns.iter().map(|c| Crown {
        cx: c.cx * factor,
        cy: c.cy * factor,
        radius_px: c.radius_px * factor,
        ..c.clone()
    });
    Ok((raster, clip_annotations(crowns, nw, nh)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::HealthClass;

    fn ramp(w: usize, h: usize) -> Raster {
        let s: Vec<f32> = (0..w * h).map(|i| i as f32 / (w * h) as f32).collect();
        Raster::new(w, h, vec![Band::new("red", None, s.clone()), Band::new("nir", None, s)], None, (0, 0)).unwrap()
    }

    fn crown(id: u32, cx: f64, cy: f64, r: f64) -> Crown {
        Crown { id, class: HealthClass::Healthy, cx, cy, radius_px: r }
    }

    #[test]
    fn flip_centroid_arithmetic() {
        let tile = ramp(100, 20);
        let ann = AnnotationSet::new(vec![crown(1, 10.0, 7.0, 3.0)]).unwrap();
        let (_, a) = flip_h(&tile, &ann);
        assert_eq!((a.crowns[0].cx, a.crowns[0].cy), (89.0, 7.0));
        let (_, a) = flip_v(&tile, &ann);
        assert_eq!((a.crowns[0].cx, a.crowns[0].cy), (10.0, 12.0));
    }

    #[test]
    fn flips_are_involutions() {
        let tile = ramp(7, 5);
        let ann = AnnotationSet::new(vec![crown(1, 1.5, 2.0, 1.0)]).unwrap();
        let (t, a) = flip_h(&tile, &ann);
        assert_ne!(t, tile);
        let (t, a) = flip_h(&t, &a);
        assert_eq!((t, a), (tile.clone(), ann.clone()));
        let (t, a) = flip_v(&tile, &ann);
        let (t, a) = flip_v(&t, &a);
        assert_eq!((t, a), (tile, ann));
    }

    #[test]
    fn flip_v_keeps_column_constant_tile() {
        let s: Vec<f32> = (0..12).map(|i| (i % 4) as f32).collect();
        let tile = Raster::new(4, 3, vec![Band::new("a", None, s)], None, (0, 0)).unwrap();
        assert_eq!(flip_v(&tile, &AnnotationSet::default()).0, tile);
    }

    #[test]
    fn crop_full_size_is_identity() {
        let tile = ramp(16, 16);
        let ann = AnnotationSet::new(vec![crown(1, 5.0, 5.0, 2.0)]).unwrap();
        let (t, a) = random_crop(&tile, &ann, 16, &mut op_rng(1, 2, 3)).unwrap();
        assert_eq!((t, a), (tile, ann));
    }

    #[test]
    fn crop_shifts_and_drops() {
        let tile = ramp(64, 64);
        let ann = AnnotationSet::new(vec![crown(1, 20.0, 24.0, 3.0), crown(2, 60.0, 60.0, 2.0), crown(3, 16.0, 30.0, 4.0)]).unwrap();
        let (t, a) = crop_at(&tile, &ann, 16, 16, 32);
        assert_eq!(t.origin(), (16, 16));
        let ids: Vec<_> = a.crowns.iter().map(|c| c.id).collect();
        // crown 3 sits on the left edge: exactly its right half plus centre column survives
        assert_eq!(ids, vec![1, 3]);
        assert_eq!((a.crowns[0].cx, a.crowns[0].cy), (4.0, 8.0));
        assert_eq!(t.band("red").unwrap().samples()[0], tile.band("red").unwrap().samples()[16 * 64 + 16]);
    }

    #[test]
    fn crop_larger_than_tile_fails() {
        assert!(matches!(
            random_crop(&ramp(8, 8), &AnnotationSet::default(), 9, &mut op_rng(0, 0, 0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn noise_zero_sigma_identity_and_determinism() {
        let tile = ramp(32, 32);
        assert_eq!(gaussian_noise(&tile, 0.0, &mut op_rng(1, 1, 0)).unwrap(), tile);
        let a = gaussian_noise(&tile, 0.05, &mut op_rng(9, 4, 1)).unwrap();
        let b = gaussian_noise(&tile, 0.05, &mut op_rng(9, 4, 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, tile);
        assert!(a.bands().iter().all(|b| b.samples().iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn noise_skips_nodata() {
        let tile = Raster::new(2, 1, vec![Band::new("a", None, vec![-9999.0, 0.5])], Some(-9999.0), (0, 0)).unwrap();
        let out = gaussian_noise(&tile, 1.0, &mut op_rng(0, 0, 0)).unwrap();
        assert_eq!(out.bands()[0].samples()[0], -9999.0);
    }

    #[test]
    fn noise_mean_shift_small() {
        let n = 1000 * 1000;
        let tile = Raster::new(1000, 1000, vec![Band::new("a", None, vec![0.5; n])], None, (0, 0)).unwrap();
        let sigma = 0.02;
        let out = gaussian_noise(&tile, sigma, &mut op_rng(42, 0, 0)).unwrap();
        let mean = out.bands()[0].samples().iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * sigma / 1000.0, "mean shift {}", mean - 0.5);
    }

    #[test]
    fn gamma_cases() {
        let tile = Raster::new(2, 1, vec![Band::new("a", None, vec![0.25, 1.0])], None, (0, 0)).unwrap();
        assert_eq!(gamma_adjust(&tile, 1.0).unwrap(), tile);
        assert_eq!(gamma_adjust(&tile, 0.5).unwrap().bands()[0].samples(), &[0.5, 1.0]);
        let neg = Raster::new(1, 1, vec![Band::new("a", None, vec![-0.1])], None, (0, 0)).unwrap();
        assert!(matches!(gamma_adjust(&neg, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn scale_cases() {
        let tile = ramp(10, 10);
        let ann = AnnotationSet::new(vec![crown(1, 10.0 / 2.0, 4.0, 2.0)]).unwrap();
        assert_eq!(scale(&tile, &ann, 1.0).unwrap(), (tile.clone(), ann.clone()));

        let big = ramp(40, 40);
        let ann = AnnotationSet::new(vec![crown(1, 10.0, 10.0, 3.0)]).unwrap();
        let (t, a) = scale(&big, &ann, 2.0).unwrap();
        assert_eq!((t.width(), t.height()), (80, 80));
        assert_eq!((a.crowns[0].cx, a.crowns[0].cy, a.crowns[0].radius_px), (20.0, 20.0, 6.0));

        let flat = Raster::new(9, 7, vec![Band::new("a", None, vec![0.37; 63])], None, (0, 0)).unwrap();
        for f in [0.5, 0.77, 1.3, 2.5] {
            let (t, _) = scale(&flat, &AnnotationSet::default(), f).unwrap();
            assert!(t.bands()[0].samples().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
        assert!(matches!(scale(&flat, &AnnotationSet::default(), 0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn spec_json_shape() {
        let json = r#"{"seed": 7, "operations": [{"op": "crop", "size": 8}, {"op": "gaussian_noise", "sigma": 0.01},
            {"op": "gamma", "min": 0.8, "max": 1.2}, {"op": "flip_h"}, {"op": "flip_v", "probability": 0.5},
            {"op": "scale", "min": 0.9, "max": 1.1}]}"#;
        let spec: AugmentSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.operations.len(), 6);
        assert_eq!(spec.operations[3], AugmentOp::FlipH { probability: 1.0 });
        spec.validate().unwrap();
        let tile = ramp(16, 16);
        let ann = AnnotationSet::new(vec![crown(1, 8.0, 8.0, 2.0)]).unwrap();
        let a = spec.apply(tile_id("tile_0_0"), &tile, &ann).unwrap();
        let b = spec.apply(tile_id("tile_0_0"), &tile, &ann).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_rejected() {
        for op in [AugmentOp::GaussianNoise { sigma: -1.0 }, AugmentOp::Gamma { min: 0.0, max: 1.0 }, AugmentOp::Scale { min: 2.0, max: 1.0 }] {
            assert!(AugmentSpec { operations: vec![op], seed: 0 }.validate().is_err());
        }
    }
}
