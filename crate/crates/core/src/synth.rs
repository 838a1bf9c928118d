//! Annotated synthetic scenes with class-controlled palm crowns.
//!
//! Crowns are discs whose reflectance darkens towards the rim along a cosine
//! profile. They are placed by seeded rejection sampling, painted over a bare
//! soil background, and then every sample receives Gaussian sensor noise.
//! Default profiles give healthy crowns NDVI near 0.73, gray dead crowns
//! near 0.06 and soil near 0.06.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationSet, Crown, HealthClass};
use crate::error::{Error, Result};
use crate::raster::{Band, Mask, Raster};

/// Band names and approximate centre wavelengths of generated scenes.
pub const SCENE_BANDS: [(&str, f64); 4] = [("red", 660.0), ("green", 545.0), ("blue", 480.0), ("nir", 833.0)];

/// Placement attempts per crown before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub red: f64,
    pub green: f64,
    pub blue: f64,
    pub nir: f64,
}

impl Profile {
    fn as_array(&self) -> [f64; 4] {
        [self.red, self.green, self.blue, self.nir]
    }

    pub fn ndvi(&self) -> f64 {
        (self.nir - self.red) / (self.nir + self.red)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrownClassSpec {
    pub count: usize,
    /// Inclusive diameter range in pixels.
    pub diameter_px: [f64; 2],
    pub profile: Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub healthy: CrownClassSpec,
    pub smallish: CrownClassSpec,
    pub dead: CrownClassSpec,
    pub background: Profile,
    /// Per-crown, per-band std dev of the profile mean.
    pub jitter_std: f64,
    /// Fractional brightness loss at the crown rim.
    pub rim_darkening: f64,
    pub noise_sigma: f64,
    /// Minimum gap between crown edges.
    pub spacing_px: f64,
    pub seed: u64,
}

const HEALTHY: Profile = Profile { red: 0.06, green: 0.10, blue: 0.05, nir: 0.38 };
const DEAD: Profile = Profile { red: 0.17, green: 0.17, blue: 0.16, nir: 0.19 };
const SOIL: Profile = Profile { red: 0.32, green: 0.27, blue: 0.22, nir: 0.36 };

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 4096,
            height: 4096,
            healthy: CrownClassSpec { count: 120, diameter_px: [18.0, 26.0], profile: HEALTHY },
            smallish: CrownClassSpec { count: 30, diameter_px: [8.0, 12.0], profile: HEALTHY },
            dead: CrownClassSpec { count: 20, diameter_px: [16.0, 24.0], profile: DEAD },
            background: SOIL,
            jitter_std: 0.01,
            rim_darkening: 0.15,
            noise_sigma: 0.02,
            spacing_px: 12.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn class(&self, class: HealthClass) -> &CrownClassSpec {
        match class {
            HealthClass::Healthy => &self.healthy,
            HealthClass::Smallish => &self.smallish,
            HealthClass::Dead => &self.dead,
        }
    }

    pub fn crown_count(&self) -> usize {
        HealthClass::ALL.iter().map(|&c| self.class(c).count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parameter("scene dimensions must be positive".into()));
        }
        for class in HealthClass::ALL {
            let c = self.class(class);
            let [lo, hi] = c.diameter_px;
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Parameter(format!("{class} diameter range [{lo}, {hi}] is invalid")));
            }
            if c.profile.as_array().iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Parameter(format!("{class} profile must be nonnegative")));
            }
        }
        if self.background.as_array().iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Parameter("background profile must be nonnegative".into()));
        }
        if !(self.spacing_px >= 0.0 && self.noise_sigma >= 0.0 && self.jitter_std >= 0.0) {
            return Err(Error::Parameter("spacing, noise and jitter must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.rim_darkening) {
            return Err(Error::Parameter("rim_darkening must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn place_crowns(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(Crown, [f64; 4])>> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let jitter = Normal::new(0.0, spec.jitter_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut placed: Vec<(Crown, [f64; 4])> = Vec::with_capacity(spec.crown_count());
    for class in HealthClass::ALL {
        let cs = spec.class(class);
        for _ in 0..cs.count {
            let mut accepted = None;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let [lo, hi] = cs.diameter_px;
                let r = if lo == hi { lo } else { rng.random_range(lo..=hi) } / 2.0;
                if w - 1.0 < 2.0 * r || h - 1.0 < 2.0 * r {
                    break;
                }
                let cx = rng.random_range(r..=w - 1.0 - r);
                let cy = rng.random_range(r..=h - 1.0 - r);
                let clear = placed.iter().all(|(c, _)| {
                    let gap = spec.spacing_px + r + c.radius_px;
                    (c.cx - cx).powi(2) + (c.cy - cy).powi(2) >= gap * gap
                });
                if clear {
                    accepted = Some(Crown { id: 0, class, cx, cy, radius_px: r });
                    break;
                }
            }
            let crown = accepted.ok_or(Error::Capacity {
                placed_so_far: placed.len(),
                attempts: MAX_PLACEMENT_ATTEMPTS,
            })?;
            let mut profile = cs.profile.as_array();
            if spec.jitter_std > 0.0 {
                for v in &mut profile {
                    *v = (*v + jitter.sample(rng)).max(0.0);
                }
            }
            placed.push((crown, profile));
        }
    }
    placed.sort_by(|a, b| a.0.cy.total_cmp(&b.0.cy).then(a.0.cx.total_cmp(&b.0.cx)));
    for (k, (c, _)) in placed.iter_mut().enumerate() {
        c.id = k as u32 + 1;
    }
    Ok(placed)
}

/// Renders a four-band scene (`red`, `green`, `blue`, `nir`) and its annotations.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Raster, AnnotationSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let placed = place_crowns(spec, &mut rng)?;
    let (w, h) = (spec.width, spec.height);

    let mut planes: Vec<Vec<f32>> = spec.background.as_array().iter().map(|&v| vec![v as f32; w * h]).collect();
    for (crown, profile) in &placed {
        for i in crown.pixels(w, h) {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let d = ((x - crown.cx).powi(2) + (y - crown.cy).powi(2)).sqrt() / crown.radius_px;
            let falloff = 1.0 - spec.rim_darkening * (1.0 - (std::f64::consts::FRAC_PI_2 * d.min(1.0)).cos());
            for (plane, &mean) in planes.iter_mut().zip(profile) {
                plane[i] = (mean * falloff) as f32;
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma is positive");
        for (b, plane) in planes.iter_mut().enumerate() {
            plane.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
                // one independent stream per (band, row) keeps output independent of thread count
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(1 + (b * h + y) as u64);
                for v in row {
                    *v = (f64::from(*v) + normal.sample(&mut rng)).max(0.0) as f32;
                }
            });
        }
    }

    let bands = planes
        .into_iter()
        .zip(SCENE_BANDS)
        .map(|(samples, (name, wl))| Band::new(name, Some(wl), samples))
        .collect();
    let raster = Raster::new(w, h, bands, None, (0, 0))?;
    let ann = AnnotationSet::new(placed.into_iter().map(|(c, _)| c).collect())?;
    Ok((raster, ann))
}

/// True where a pixel centre falls inside any crown disc.
pub fn rasterize_labels(ann: &AnnotationSet, width: usize, height: usize) -> Mask {
    let mut bits = vec![false; width * height];
    for c in &ann.crowns {
        for i in c.pixels(width, height) {
            bits[i] = true;
        }
    }
    Mask::new(width, height, bits).expect("dimensions agree")
}
