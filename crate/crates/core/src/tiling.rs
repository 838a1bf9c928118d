//! Fixed-size tile planning, extraction and stitching.
//!
//! Windows advance by `tile_size - overlap`. The last row and column are not
//! shifted inward; they run past the scene edge and the excess is padded with
//! nodata, so every tile has identical geometry.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::probability::ProbabilityMap;
use crate::raster::{Band, Raster};

pub const DEFAULT_TILE_SIZE: usize = 1024;
/// Overlap used for index and mask passes.
pub const DEFAULT_INDEX_OVERLAP: usize = 0;
/// Overlap used for probability-map inference.
pub const DEFAULT_PREDICT_OVERLAP: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct TileWindow {
    pub row: usize,
    pub col: usize,
    pub x: usize,
    pub y: usize,
    /// In-scene extent; at most the tile size.
    pub width: usize,
    pub height: usize,
    pub padded_right: usize,
    pub padded_bottom: usize,
}

impl TileWindow {
    pub fn name(&self) -> String {
        format!("tile_{}_{}", self.row, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TilePlan {
    pub tile_size: usize,
    pub overlap: usize,
    pub scene_width: usize,
    pub scene_height: usize,
    pub rows: usize,
    pub cols: usize,
    pub windows: Vec<TileWindow>,
}

impl TilePlan {
    pub fn stride(&self) -> usize {
        self.tile_size - self.overlap
    }
}

fn starts(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    while out.last().unwrap() + tile < extent {
        out.push(out.last().unwrap() + stride);
    }
    out
}

pub fn tile_plan(scene_w: usize, scene_h: usize, tile_size: usize, overlap: usize) -> Result<TilePlan> {
    if tile_size == 0 {
        return Err(Error::Parameter("tile size must be at least 1".into()));
    }
    if overlap >= tile_size {
        return Err(Error::Parameter(format!("overlap {overlap} must be smaller than tile size {tile_size}")));
    }
    if scene_w == 0 || scene_h == 0 {
        return Err(Error::Parameter(format!("scene dimensions must be positive, got {scene_w}x{scene_h}")));
    }
    let stride = tile_size - overlap;
    let xs = starts(scene_w, tile_size, stride);
    let ys = starts(scene_h, tile_size, stride);
    let mut windows = Vec::with_capacity(xs.len() * ys.len());
    for (row, &y) in ys.iter().enumerate() {
        for (col, &x) in xs.iter().enumerate() {
            let width = tile_size.min(scene_w - x);
            let height = tile_size.min(scene_h - y);
            windows.push(TileWindow {
                row,
                col,
                x,
                y,
                width,
                height,
                padded_right: tile_size - width,
                padded_bottom: tile_size - height,
            });
        }
    }
    Ok(TilePlan {
        tile_size,
        overlap,
        scene_width: scene_w,
        scene_height: scene_h,
        rows: ys.len(),
        cols: xs.len(),
        windows,
    })
}

/// Copies a window into a `tile_size x tile_size` raster. Padding is filled
/// with the scene's nodata value, or `NaN` when the scene declares none.
pub fn extract_tile(raster: &Raster, window: &TileWindow) -> Result<Raster> {
    let tile = window.width + window.padded_right;
    if window.height + window.padded_bottom != tile
        || window.width == 0
        || window.height == 0
        || window.x + window.width > raster.width()
        || window.y + window.height > raster.height()
    {
        return Err(Error::Bounds(format!(
            "window {} at ({}, {}) size {}x{} does not fit a {}x{} scene",
            window.name(),
            window.x,
            window.y,
            window.width,
            window.height,
            raster.width(),
            raster.height()
        )));
    }
    let nodata = raster.nodata().unwrap_or(f32::NAN);
    let bands = raster
        .bands()
        .iter()
        .map(|band| {
            let src = band.samples();
            let mut out = vec![nodata; tile * tile];
            for r in 0..window.height {
                let s = (window.y + r) * raster.width() + window.x;
                out[r * tile..r * tile + window.width].copy_from_slice(&src[s..s + window.width]);
            }
            Band::new(band.name(), band.wavelength_nm(), out)
        })
        .collect();
    let (ox, oy) = raster.origin();
    Raster::new(tile, tile, bands, Some(nodata), (ox + window.x as i64, oy + window.y as i64))
}

/// Joins per-tile maps into one scene map. Overlapping pixels take the
/// unweighted mean of their valid contributors; padding is discarded.
pub fn stitch(plan: &TilePlan, outputs: &[(TileWindow, ProbabilityMap)]) -> Result<ProbabilityMap> {
    let (w, h) = (plan.scene_width, plan.scene_height);
    let mut sum = vec![0.0f64; w * h];
    let mut count = vec![0u32; w * h];
    for window in &plan.windows {
        let (_, map) = outputs
            .iter()
            .find(|(wi, _)| wi == window)
            .ok_or(Error::Completeness { x: window.x, y: window.y })?;
        if map.width < window.width || map.height < window.height {
            return Err(Error::Shape(format!(
                "output for {} is {}x{}, window needs {}x{}",
                window.name(),
                map.width,
                map.height,
                window.width,
                window.height
            )));
        }
        for r in 0..window.height {
            let dst = (window.y + r) * w + window.x;
            let src = &map.values[r * map.width..r * map.width + window.width];
            for (i, &v) in src.iter().enumerate() {
                if !v.is_nan() {
                    sum[dst + i] += f64::from(v);
                    count[dst + i] += 1;
                }
            }
        }
    }
    let values = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { f32::NAN } else { (s / f64::from(c)) as f32 })
        .collect();
    ProbabilityMap::new(w, h, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_counts() {
        let p = tile_plan(2048, 3072, 1024, 0).unwrap();
        assert_eq!((p.cols, p.rows, p.windows.len()), (2, 3, 6));
        assert!(p.windows.iter().all(|w| w.padded_right == 0 && w.padded_bottom == 0));

        let p = tile_plan(1000, 1000, 1024, 0).unwrap();
        assert_eq!(p.windows.len(), 1);
        assert_eq!((p.windows[0].padded_right, p.windows[0].padded_bottom), (24, 24));

        let p = tile_plan(1024, 1024, 1024, 0).unwrap();
        assert_eq!(p.windows.len(), 1);
        assert_eq!(p.windows[0].width, 1024);
        assert_eq!(p.windows[0].padded_right, 0);
    }

    #[test]
    fn plan_rejects_bad_overlap() {
        assert!(matches!(tile_plan(10, 10, 4, 4), Err(Error::Parameter(_))));
        assert!(matches!(tile_plan(10, 10, 0, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn overlapping_plan_layout() {
        let p = tile_plan(4096, 100, 1024, 128).unwrap();
        let xs: Vec<_> = p.windows.iter().map(|w| w.x).collect();
        assert_eq!(xs, vec![0, 896, 1792, 2688, 3584]);
        assert_eq!(p.windows[4].width, 512);
        assert_eq!(p.windows[4].padded_right, 512);
    }

    #[test]
    fn padded_tile_is_nodata() {
        let r = Raster::new(3, 2, vec![Band::new("a", None, (0..6).map(|v| v as f32).collect())], Some(-1.0), (10, 20)).unwrap();
        let plan = tile_plan(3, 2, 4, 0).unwrap();
        let t = extract_tile(&r, &plan.windows[0]).unwrap();
        assert_eq!((t.width(), t.height(), t.origin()), (4, 4, (10, 20)));
        let s = t.band("a").unwrap().samples();
        assert_eq!(&s[0..4], &[0.0, 1.0, 2.0, -1.0]);
        assert_eq!(&s[4..8], &[3.0, 4.0, 5.0, -1.0]);
        let mask = t.valid_mask();
        assert_eq!(mask.count(), 6);
        assert!(!mask.get(3, 0) && !mask.get(0, 2));
    }

    #[test]
    fn window_outside_scene() {
        let r = Raster::new(2, 2, vec![Band::new("a", None, vec![0.0; 4])], None, (0, 0)).unwrap();
        let mut w = tile_plan(8, 8, 4, 0).unwrap().windows[3];
        w.x = 4;
        assert!(matches!(extract_tile(&r, &w), Err(Error::Bounds(_))));
    }

    #[test]
    fn overlap_mean_of_two() {
        let plan = tile_plan(3, 1, 2, 1).unwrap();
        assert_eq!(plan.windows.len(), 2);
        let a = ProbabilityMap::new(2, 2, vec![0.1, 0.2, f32::NAN, f32::NAN]).unwrap();
        let b = ProbabilityMap::new(2, 2, vec![0.6, 0.9, f32::NAN, f32::NAN]).unwrap();
        let m = stitch(&plan, &[(plan.windows[0], a), (plan.windows[1], b)]).unwrap();
        assert_eq!(m.values[0], 0.1);
        assert!((m.values[1] - 0.4).abs() < 1e-7);
        assert_eq!(m.values[2], 0.9);
    }

    #[test]
    fn missing_window_reported() {
        let plan = tile_plan(4, 4, 2, 0).unwrap();
        let outs: Vec<_> = plan.windows[..3].iter().map(|w| (*w, ProbabilityMap::filled(2, 2, 0.5))).collect();
        assert!(matches!(stitch(&plan, &outs), Err(Error::Completeness { x: 2, y: 2 })));
    }

    #[test]
    fn constant_tiles_stitch_constant() {
        let plan = tile_plan(37, 23, 8, 3).unwrap();
        let outs: Vec<_> = plan.windows.iter().map(|w| (*w, ProbabilityMap::filled(8, 8, 0.3))).collect();
        let m = stitch(&plan, &outs).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.3));
    }
}
