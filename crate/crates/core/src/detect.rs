//! Crown detection on probability maps, rule-based health classification,
//! and matching against ground truth.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationSet, HealthClass};
use crate::error::{Error, Result};
use crate::indices::{compute_index, IndexMap};
use crate::probability::ProbabilityMap;
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub prob_threshold: f64,
    pub min_area: usize,
    pub max_area: usize,
    pub split_min_distance: f64,
    pub smallish_diameter_px: f64,
    pub dead_ndvi_max: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            prob_threshold: 0.5,
            min_area: 20,
            max_area: 4000,
            split_min_distance: 8.0,
            // Sits between the default synthetic smallish (<= 12 px) and healthy (>= 18 px) diameters.
            smallish_diameter_px: 15.0,
            dead_ndvi_max: 0.15,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::Parameter(format!("prob_threshold {} must lie in (0, 1)", self.prob_threshold)));
        }
        if self.min_area == 0 || self.min_area > self.max_area {
            return Err(Error::Parameter(format!(
                "need 0 < min_area <= max_area, got {} and {}",
                self.min_area, self.max_area
            )));
        }
        if !(self.split_min_distance >= 0.0) || !(self.smallish_diameter_px >= 0.0) {
            return Err(Error::Parameter("distances must be nonnegative".into()));
        }
        if !(-1.0..=1.0).contains(&self.dead_ndvi_max) {
            return Err(Error::Parameter(format!("dead_ndvi_max {} outside [-1, 1]", self.dead_ndvi_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrownDetection {
    pub id: u32,
    /// Sub-pixel centroid `(x, y)` in map pixel coordinates.
    pub centroid: (f64, f64),
    /// Inclusive `(x_min, y_min, x_max, y_max)`.
    pub bbox: (usize, usize, usize, usize),
    pub pixel_count: usize,
    pub diameter_px: f64,
    pub score: f64,
    pub class_label: Option<HealthClass>,
    pub mean_ndvi: Option<f64>,
    pub mean_gndvi: Option<f64>,
    /// Row-major pixel indices into the probability map.
    #[serde(skip)]
    pub pixels: Vec<usize>,
}

impl CrownDetection {
    fn from_pixels(pixels: Vec<usize>, prob: &ProbabilityMap) -> Self {
        let w = prob.width;
        let (mut sx, mut sy, mut sp) = (0.0f64, 0.0f64, 0.0f64);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &i in &pixels {
            let (x, y) = (i % w, i / w);
            sx += x as f64;
            sy += y as f64;
            sp += f64::from(prob.values[i]);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let n = pixels.len() as f64;
        CrownDetection {
            id: 0,
            centroid: (sx / n, sy / n),
            bbox: (x0, y0, x1, y1),
            pixel_count: pixels.len(),
            diameter_px: 2.0 * (n / std::f64::consts::PI).sqrt(),
            score: sp / n,
            class_label: None,
            mean_ndvi: None,
            mean_gndvi: None,
            pixels,
        }
    }
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

fn neighbours(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = ((i % w) as isize, (i / w) as isize);
    NEIGHBOURS.iter().filter_map(move |&(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h).then(|| ny as usize * w + nx as usize)
    })
}

/// 8-connected components of `fg`, each in BFS discovery order, components ordered by first pixel.
pub fn connected_components(fg: &[bool], width: usize, height: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; fg.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            for j in neighbours(i, width, height) {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Thresholds the map, labels components, splits oversized ones and returns
/// unlabelled detections sorted by descending score, then centroid `(y, x)`.
pub fn detect_crowns(prob: &ProbabilityMap, cfg: &DetectorConfig) -> Result<Vec<CrownDetection>> {
    cfg.validate()?;
    let t = cfg.prob_threshold;
    let fg: Vec<bool> = prob.values.iter().map(|&v| !v.is_nan() && f64::from(v) > t).collect();
    let mut dets = Vec::new();
    for comp in connected_components(&fg, prob.width, prob.height) {
        if comp.len() < cfg.min_area {
            continue;
        }
        if comp.len() <= cfg.max_area {
            dets.push(CrownDetection::from_pixels(comp, prob));
            continue;
        }
        for part in split_touching(&comp, prob, cfg) {
            if part.len() >= cfg.min_area {
                dets.push(CrownDetection::from_pixels(part, prob));
            }
        }
    }
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.centroid.1.total_cmp(&b.centroid.1))
            .then(a.centroid.0.total_cmp(&b.centroid.0))
    });
    for (k, d) in dets.iter_mut().enumerate() {
        d.id = k as u32 + 1;
        d.pixels.sort_unstable();
    }
    Ok(dets)
}

/// Partitions a component around its probability peaks.
///
/// Regional maxima (plateaus of equal value with no higher neighbour inside
/// the component) are ranked by value; a peak within `split_min_distance` of
/// a stronger accepted peak is merged into it. Pixels go to their nearest
/// surviving peak. A single surviving peak returns the component whole.
pub fn split_touching(component: &[usize], prob: &ProbabilityMap, cfg: &DetectorConfig) -> Vec<Vec<usize>> {
    let (w, h) = (prob.width, prob.height);
    let mut sorted = component.to_vec();
    sorted.sort_unstable();
    let value = |i: usize| prob.values[i];

    // (value, y, x) of each regional maximum's representative pixel
    let mut peaks: Vec<(f32, usize, usize)> = Vec::new();
    let mut visited = vec![false; sorted.len()];
    for (k, &start) in sorted.iter().enumerate() {
        if visited[k] {
            continue;
        }
        let v = value(start);
        let mut plateau = vec![start];
        visited[k] = true;
        let mut is_max = true;
        let mut head = 0;
        while head < plateau.len() {
            let i = plateau[head];
            head += 1;
            for j in neighbours(i, w, h) {
                let Ok(kj) = sorted.binary_search(&j) else { continue };
                let vj = value(j);
                if vj > v {
                    is_max = false;
                } else if vj == v && !visited[kj] {
                    visited[kj] = true;
                    plateau.push(j);
                }
            }
        }
        if !is_max {
            continue;
        }
        let n = plateau.len() as f64;
        let cx = plateau.iter().map(|&i| (i % w) as f64).sum::<f64>() / n;
        let cy = plateau.iter().map(|&i| (i / w) as f64).sum::<f64>() / n;
        let rep = plateau
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = ((a % w) as f64 - cx).powi(2) + ((a / w) as f64 - cy).powi(2);
                let db = ((b % w) as f64 - cx).powi(2) + ((b / w) as f64 - cy).powi(2);
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("plateau is non-empty");
        peaks.push((v, rep / w, rep % w));
    }

    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let d2 = cfg.split_min_distance * cfg.split_min_distance;
    let mut seeds: Vec<(f64, f64)> = Vec::new();
    for &(_, y, x) in &peaks {
        let (x, y) = (x as f64, y as f64);
        if seeds.iter().all(|&(sx, sy)| (sx - x).powi(2) + (sy - y).powi(2) >= d2) {
            seeds.push((x, y));
        }
    }
    if seeds.len() <= 1 {
        return vec![component.to_vec()];
    }
    let mut parts = vec![Vec::new(); seeds.len()];
    for &i in component {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let nearest = seeds
            .iter()
            .enumerate()
            .map(|(k, &(sx, sy))| (k, (sx - x).powi(2) + (sy - y).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(k, _)| k)
            .expect("at least two seeds");
        parts[nearest].push(i);
    }
    parts
}

/// Applies the health rules using NDVI and gNDVI maps computed once per scene.
pub struct CrownClassifier {
    ndvi: IndexMap,
    gndvi: IndexMap,
}

impl CrownClassifier {
    pub fn new(raster: &Raster) -> Result<Self> {
        let mask = raster.valid_mask();
        Ok(CrownClassifier {
            ndvi: compute_index(raster, "ndvi", &mask)?,
            gndvi: compute_index(raster, "gndvi", &mask)?,
        })
    }

    /// Dead if mean NDVI <= `dead_ndvi_max`, else smallish if the
    /// equivalent diameter is below `smallish_diameter_px`, else healthy.
    /// Records the crown's mean indices on the detection.
    pub fn classify(&self, det: &mut CrownDetection, cfg: &DetectorConfig) -> Result<HealthClass> {
        let n = self.ndvi.values.len();
        if let Some(&bad) = det.pixels.iter().find(|&&i| i >= n) {
            return Err(Error::Bounds(format!("crown {} pixel {bad} outside a {n}-pixel raster", det.id)));
        }
        let mean_ndvi = mean_valid(&self.ndvi, &det.pixels).ok_or(Error::Unclassifiable { id: det.id })?;
        det.mean_ndvi = Some(mean_ndvi);
        det.mean_gndvi = mean_valid(&self.gndvi, &det.pixels);
        let class = if mean_ndvi <= cfg.dead_ndvi_max {
            HealthClass::Dead
        } else if det.diameter_px < cfg.smallish_diameter_px {
            HealthClass::Smallish
        } else {
            HealthClass::Healthy
        };
        det.class_label = Some(class);
        Ok(class)
    }

    pub fn classify_all(&self, dets: &mut [CrownDetection], cfg: &DetectorConfig) -> Result<()> {
        for d in dets {
            self.classify(d, cfg)?;
        }
        Ok(())
    }
}

fn mean_valid(map: &IndexMap, pixels: &[usize]) -> Option<f64> {
    let (sum, n) = pixels
        .iter()
        .map(|&i| map.values[i])
        .filter(|v| !v.is_nan())
        .fold((0.0f64, 0usize), |(s, n), v| (s + f64::from(v), n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn classify_crown(det: &mut CrownDetection, raster: &Raster, cfg: &DetectorConfig) -> Result<HealthClass> {
    CrownClassifier::new(raster)?.classify(det, cfg)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matching {
    /// `(detection index, truth index, centroid distance)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

/// Greedy one-to-one matching by ascending centroid distance. Equal
/// distances resolve by detection index, then truth index.
pub fn match_detections(dets: &[CrownDetection], truth: &AnnotationSet, max_centroid_dist: f64) -> Result<Matching> {
    if !(max_centroid_dist > 0.0) {
        return Err(Error::Parameter(format!("max_centroid_dist must be positive, got {max_centroid_dist}")));
    }
    let mut by_x: Vec<usize> = (0..truth.crowns.len()).collect();
    by_x.sort_by(|&a, &b| truth.crowns[a].cx.total_cmp(&truth.crowns[b].cx).then(a.cmp(&b)));
    let xs: Vec<f64> = by_x.iter().map(|&k| truth.crowns[k].cx).collect();

    let mut candidates = Vec::new();
    for (di, d) in dets.iter().enumerate() {
        let (dx, dy) = d.centroid;
        let lo = xs.partition_point(|&x| x < dx - max_centroid_dist);
        for &ti in by_x[lo..].iter().take_while(|&&ti| truth.crowns[ti].cx <= dx + max_centroid_dist) {
            let t = &truth.crowns[ti];
            let dist = ((t.cx - dx).powi(2) + (t.cy - dy).powi(2)).sqrt();
            if dist <= max_centroid_dist {
                candidates.push((dist, di, ti));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut det_used = vec![false; dets.len()];
    let mut truth_used = vec![false; truth.crowns.len()];
    let mut m = Matching::default();
    for (dist, di, ti) in candidates {
        if !det_used[di] && !truth_used[ti] {
            det_used[di] = true;
            truth_used[ti] = true;
            m.pairs.push((di, ti, dist));
        }
    }
    m.pairs.sort_by_key(|p| p.0);
    m.false_positives = (0..dets.len()).filter(|&i| !det_used[i]).collect();
    m.false_negatives = (0..truth.crowns.len()).filter(|&i| !truth_used[i]).collect();
    Ok(m)
}

#[derive(Serialize)]
struct Geometry {
    #[serde(rename = "type")]
    kind: &'static str,
    coordinates: [f64; 2],
}

#[derive(Serialize)]
struct Properties {
    id: u32,
    class: Option<HealthClass>,
    score: f64,
    diameter_px: f64,
    pixel_count: usize,
    bbox: [i64; 4],
    mean_ndvi: Option<f64>,
    mean_gndvi: Option<f64>,
}

#[derive(Serialize)]
struct Feature {
    #[serde(rename = "type")]
    kind: &'static str,
    geometry: Geometry,
    properties: Properties,
}

#[derive(Serialize)]
struct FeatureCollection {
    #[serde(rename = "type")]
    kind: &'static str,
    features: Vec<Feature>,
}

fn shifted_bbox(d: &CrownDetection, origin: (i64, i64)) -> [i64; 4] {
    let (x0, y0, x1, y1) = d.bbox;
    [x0 as i64 + origin.0, y0 as i64 + origin.1, x1 as i64 + origin.0, y1 as i64 + origin.1]
}

/// GeoJSON FeatureCollection of centroid points, offset by the raster origin.
pub fn to_geojson(dets: &[CrownDetection], origin: (i64, i64)) -> String {
    let fc = FeatureCollection {
        kind: "FeatureCollection",
        features: dets
            .iter()
            .map(|d| Feature {
                kind: "Feature",
                geometry: Geometry {
                    kind: "Point",
                    coordinates: [d.centroid.0 + origin.0 as f64, d.centroid.1 + origin.1 as f64],
                },
                properties: Properties {
                    id: d.id,
                    class: d.class_label,
                    score: d.score,
                    diameter_px: d.diameter_px,
                    pixel_count: d.pixel_count,
                    bbox: shifted_bbox(d, origin),
                    mean_ndvi: d.mean_ndvi,
                    mean_gndvi: d.mean_gndvi,
                },
            })
            .collect(),
    };
    serde_json::to_string_pretty(&fc).expect("detections serialize") + "\n"
}

pub const CSV_HEADER: &str =
    "id,class,x,y,score,diameter_px,pixel_count,bbox_x_min,bbox_y_min,bbox_x_max,bbox_y_max,mean_ndvi,mean_gndvi";

pub fn to_csv(dets: &[CrownDetection], origin: (i64, i64)) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for d in dets {
        let b = shifted_bbox(d, origin);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            d.id,
            d.class_label.map(HealthClass::as_str).unwrap_or(""),
            d.centroid.0 + origin.0 as f64,
            d.centroid.1 + origin.1 as f64,
            d.score,
            d.diameter_px,
            d.pixel_count,
            b[0],
            b[1],
            b[2],
            b[3],
            opt(d.mean_ndvi),
            opt(d.mean_gndvi)
        );
    }
    out
}

/// Reads detections written by [`to_csv`] (origin already applied; pixel sets are not stored).
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<CrownDetection>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::format("header", format!("{} does not start with the detection CSV header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(row, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 13 {
                return Err(Error::format(format!("row {}", row + 1), format!("expected 13 columns, found {}", f.len())));
            }
            let num = |k: usize| -> Result<f64> {
                f[k].parse::<f64>().map_err(|e| Error::format(format!("row {} column {k}", row + 1), e.to_string()))
            };
            let opt = |k: usize| -> Result<Option<f64>> { if f[k].is_empty() { Ok(None) } else { num(k).map(Some) } };
            let class = if f[1].is_empty() { None } else { Some(f[1].parse()?) };
            Ok(CrownDetection {
                id: num(0)? as u32,
                class_label: class,
                centroid: (num(2)?, num(3)?),
                score: num(4)?,
                diameter_px: num(5)?,
                pixel_count: num(6)? as usize,
                bbox: (num(7)?.max(0.0) as usize, num(8)?.max(0.0) as usize, num(9)?.max(0.0) as usize, num(10)?.max(0.0) as usize),
                mean_ndvi: opt(11)?,
                mean_gndvi: opt(12)?,
                pixels: Vec::new(),
            })
        })
        .collect()
}
