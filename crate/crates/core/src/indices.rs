//! Normalized-difference vegetation indices, vegetation masks and per-class
//! index summaries.

use serde::Serialize;

use crate::annotation::{AnnotationSet, HealthClass};
use crate::error::{Error, Result};
use crate::raster::{Band, Mask, Raster};

/// Conventional sparse-vegetation NDVI cutoff.
pub const DEFAULT_VEGETATION_THRESHOLD: f64 = 0.2;

/// Sample value used for invalid pixels when an index map is written to disk.
pub const INDEX_NODATA: f32 = -9999.0;

/// Built-in normalized-difference indices: `(name, positive band, negative band)`.
pub const BUILTIN_INDICES: &[(&str, &str, &str)] = &[("ndvi", "nir", "red"), ("gndvi", "nir", "green")];

/// Single-band index grid; `NaN` marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    pub index_name: String,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl IndexMap {
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let v = self.values[y * self.width + x];
        (!v.is_nan()).then_some(v)
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }

    pub fn to_raster(&self) -> Raster {
        let samples = self.values.iter().map(|&v| if v.is_nan() { INDEX_NODATA } else { v }).collect();
        Raster::new(
            self.width,
            self.height,
            vec![Band::new(self.index_name.clone(), None, samples)],
            Some(INDEX_NODATA),
            (0, 0),
        )
        .expect("index map dimensions are valid")
    }

    /// Reads the first band of a single-index raster back into a map.
    pub fn from_raster(raster: &Raster) -> IndexMap {
        let band = &raster.bands()[0];
        let values = band
            .samples()
            .iter()
            .map(|&v| if v.is_finite() && !raster.is_nodata(v) { v } else { f32::NAN })
            .collect();
        IndexMap {
            index_name: band.name().to_string(),
            width: raster.width(),
            height: raster.height(),
            values,
        }
    }
}

/// `(a - b) / (a + b)` on every masked-in pixel; zero denominators are invalid.
pub fn normalized_difference(name: &str, a: &Band, b: &Band, mask: &Mask) -> Result<IndexMap> {
    let n = mask.width() * mask.height();
    if a.samples().len() != n || b.samples().len() != n {
        return Err(Error::Shape(format!(
            "bands `{}` ({}) and `{}` ({}) do not match a {}x{} mask",
            a.name(),
            a.samples().len(),
            b.name(),
            b.samples().len(),
            mask.width(),
            mask.height()
        )));
    }
    let values = a
        .samples()
        .iter()
        .zip(b.samples())
        .zip(mask.bits())
        .map(|((&pa, &pb), &ok)| nd_value(pa, pb, ok))
        .collect();
    Ok(IndexMap { index_name: name.to_string(), width: mask.width(), height: mask.height(), values })
}

#[inline]
pub(crate) fn nd_value(a: f32, b: f32, valid: bool) -> f32 {
    if !valid {
        return f32::NAN;
    }
    let (a, b) = (f64::from(a), f64::from(b));
    let den = a + b;
    if den == 0.0 {
        return f32::NAN;
    }
    ((a - b) / den) as f32
}

pub fn ndvi(nir: &Band, red: &Band, mask: &Mask) -> Result<IndexMap> {
    normalized_difference("ndvi", nir, red, mask)
}

pub fn gndvi(nir: &Band, green: &Band, mask: &Mask) -> Result<IndexMap> {
    normalized_difference("gndvi", nir, green, mask)
}

/// Evaluates a built-in index by name on a raster.
pub fn compute_index(raster: &Raster, name: &str, mask: &Mask) -> Result<IndexMap> {
    let (_, pos, neg) = BUILTIN_INDICES
        .iter()
        .find(|(n, _, _)| *n == name)
        .ok_or_else(|| Error::Parameter(format!("unknown index `{name}`")))?;
    normalized_difference(name, raster.band(pos)?, raster.band(neg)?, mask)
}

/// True where the index is valid and strictly above `threshold`.
pub fn vegetation_mask(index: &IndexMap, threshold: f64) -> Mask {
    let bits = index.values.iter().map(|&v| !v.is_nan() && f64::from(v) > threshold).collect();
    Mask::new(index.width, index.height, bits).expect("index map is consistent")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassIndexStats {
    pub class_label: HealthClass,
    pub index_name: String,
    pub count: usize,
    pub mean: Option<f64>,
    pub std_dev: Option<f64>,
    pub min: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
    pub max: Option<f64>,
}

impl ClassIndexStats {
    /// Summary of `values`; the order of `values` does not matter.
    pub fn from_values(class_label: HealthClass, index_name: &str, mut values: Vec<f64>) -> Self {
        let count = values.len();
        if count == 0 {
            return ClassIndexStats {
                class_label,
                index_name: index_name.to_string(),
                count,
                mean: None,
                std_dev: None,
                min: None,
                q1: None,
                median: None,
                q3: None,
                max: None,
            };
        }
        values.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / count as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        ClassIndexStats {
            class_label,
            index_name: index_name.to_string(),
            count,
            mean: Some(mean),
            std_dev: Some(var.sqrt()),
            min: Some(values[0]),
            q1: Some(quantile_sorted(&values, 0.25)),
            median: Some(quantile_sorted(&values, 0.5)),
            q3: Some(quantile_sorted(&values, 0.75)),
            max: Some(values[count - 1]),
        }
    }
}

/// Linear-interpolation quantile of sorted, non-empty data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One record per class that appears in `annotations`, pooled over the union
/// of that class's crown pixels. Invalid index pixels are skipped.
pub fn index_stats_by_class(index: &IndexMap, annotations: &AnnotationSet) -> Result<Vec<ClassIndexStats>> {
    annotations.check_bounds(index.width, index.height)?;
    let mut out = Vec::new();
    for class in HealthClass::ALL {
        let crowns: Vec<_> = annotations.crowns.iter().filter(|c| c.class == class).collect();
        if crowns.is_empty() {
            continue;
        }
        let mut pixels: Vec<usize> = crowns.iter().flat_map(|c| c.pixels(index.width, index.height)).collect();
        pixels.sort_unstable();
        pixels.dedup();
        let values = pixels
            .into_iter()
            .map(|i| index.values[i])
            .filter(|v| !v.is_nan())
            .map(f64::from)
            .collect();
        out.push(ClassIndexStats::from_values(class, &index.index_name, values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::Crown;

    fn band(name: &str, v: Vec<f32>) -> Band {
        Band::new(name, None, v)
    }

    #[test]
    fn ndvi_examples() {
        let m = Mask::filled(3, 1, true);
        let idx = ndvi(&band("nir", vec![0.5, 0.6, 0.0]), &band("red", vec![0.5, 0.2, 0.0]), &m).unwrap();
        assert_eq!(idx.get(0, 0), Some(0.0));
        assert!((idx.get(1, 0).unwrap() - 0.5).abs() < 1e-6);
        assert_eq!(idx.get(2, 0), None);
    }

    #[test]
    fn gndvi_examples() {
        let m = Mask::new(3, 1, vec![true, true, false]).unwrap();
        let idx = gndvi(&band("nir", vec![0.3, 0.8, 0.9]), &band("green", vec![0.3, 0.2, 0.1]), &m).unwrap();
        assert_eq!(idx.get(0, 0), Some(0.0));
        assert!((idx.get(1, 0).unwrap() - 0.6).abs() < 1e-6);
        assert_eq!(idx.get(2, 0), None);
    }

    #[test]
    fn shape_mismatch() {
        let m = Mask::filled(2, 2, true);
        assert!(matches!(ndvi(&band("nir", vec![0.1; 4]), &band("red", vec![0.1; 3]), &m), Err(Error::Shape(_))));
    }

    #[test]
    fn threshold_is_strict() {
        let idx = IndexMap { index_name: "ndvi".into(), width: 3, height: 1, values: vec![0.9, 0.2, f32::NAN] };
        // the stored value is the f32 nearest 0.2, so use that exact threshold
        assert_eq!(vegetation_mask(&idx, f64::from(0.2f32)).bits(), &[true, false, false]);
        let all = IndexMap { index_name: "ndvi".into(), width: 2, height: 1, values: vec![0.9, 0.9] };
        assert_eq!(vegetation_mask(&all, 0.2).count(), 2);
    }

    #[test]
    fn compute_by_name() {
        let r = Raster::new(
            1,
            1,
            vec![band("red", vec![0.2]), band("green", vec![0.2]), band("nir", vec![0.6])],
            None,
            (0, 0),
        )
        .unwrap();
        let m = r.valid_mask();
        assert!((compute_index(&r, "ndvi", &m).unwrap().values[0] - 0.5).abs() < 1e-6);
        assert!(compute_index(&r, "ptwsi", &m).is_err());
    }

    #[test]
    fn stats_for_constant_crown_and_empty_class() {
        let idx = IndexMap { index_name: "ndvi".into(), width: 20, height: 20, values: vec![0.5; 400] };
        let ann = AnnotationSet::new(vec![Crown { id: 1, class: HealthClass::Dead, cx: 10.0, cy: 10.0, radius_px: 3.0 }]).unwrap();
        let stats = index_stats_by_class(&idx, &ann).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].class_label, HealthClass::Dead);
        assert_eq!(stats[0].mean, Some(0.5));
        assert_eq!(stats[0].std_dev, Some(0.0));

        let empty = ClassIndexStats::from_values(HealthClass::Healthy, "ndvi", vec![]);
        assert_eq!(empty.count, 0);
        assert!(empty.mean.is_none() && empty.q1.is_none());
    }

    #[test]
    fn stats_reject_out_of_bounds_crown() {
        let idx = IndexMap { index_name: "ndvi".into(), width: 5, height: 5, values: vec![0.5; 25] };
        let ann = AnnotationSet::new(vec![Crown { id: 7, class: HealthClass::Dead, cx: 9.0, cy: 1.0, radius_px: 1.0 }]).unwrap();
        match index_stats_by_class(&idx, &ann) {
            Err(Error::Bounds(msg)) => assert!(msg.contains("crown 7")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn quartiles_ordered() {
        let s = ClassIndexStats::from_values(HealthClass::Healthy, "ndvi", vec![4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (Some(1.0), Some(2.0), Some(3.0), Some(4.0), Some(5.0)));
    }

    #[test]
    fn persists_through_container() {
        let idx = IndexMap { index_name: "gndvi".into(), width: 2, height: 1, values: vec![0.25, f32::NAN] };
        let r = idx.to_raster();
        assert_eq!(r.band("gndvi").unwrap().samples(), &[0.25, INDEX_NODATA]);
        let back = IndexMap::from_raster(&r);
        assert_eq!(back.get(0, 0), Some(0.25));
        assert_eq!(back.get(1, 0), None);
    }
}
