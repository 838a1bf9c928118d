//! Ground-truth crown annotations and their JSON form
//! (`{"crowns": [{"id", "class", "cx", "cy", "radius_px"}, ...]}`).
//!
//! Pixel coordinates refer to pixel centres: pixel `(x, y)` belongs to a crown
//! when its centre lies inside the crown disc.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthClass {
    Healthy,
    Smallish,
    Dead,
}

impl HealthClass {
    pub const ALL: [HealthClass; 3] = [HealthClass::Healthy, HealthClass::Smallish, HealthClass::Dead];

    pub fn as_str(self) -> &'static str {
        match self {
            HealthClass::Healthy => "healthy",
            HealthClass::Smallish => "smallish",
            HealthClass::Dead => "dead",
        }
    }
}

impl fmt::Display for HealthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HealthClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "healthy" => Ok(HealthClass::Healthy),
            "smallish" => Ok(HealthClass::Smallish),
            "dead" => Ok(HealthClass::Dead),
            other => Err(Error::Label(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crown {
    pub id: u32,
    pub class: HealthClass,
    pub cx: f64,
    pub cy: f64,
    pub radius_px: f64,
}

impl Crown {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        dx * dx + dy * dy <= self.radius_px * self.radius_px
    }

    /// Inclusive integer bounding box of the disc, unclipped.
    fn extent(&self) -> (i64, i64, i64, i64) {
        let r = self.radius_px;
        (
            (self.cx - r).ceil() as i64,
            (self.cy - r).ceil() as i64,
            (self.cx + r).floor() as i64,
            (self.cy + r).floor() as i64,
        )
    }

    /// Disc pixel count on an unbounded grid.
    pub fn full_area(&self) -> usize {
        self.area_within(i64::MIN / 4, i64::MIN / 4, i64::MAX / 4, i64::MAX / 4)
    }

    /// Disc pixel count inside the half-open window `[x0, x1) x [y0, y1)`.
    pub fn area_within(&self, x0: i64, y0: i64, x1: i64, y1: i64) -> usize {
        let (ex0, ey0, ex1, ey1) = self.extent();
        let mut n = 0;
        for y in ey0.max(y0)..=ey1.min(y1 - 1) {
            for x in ex0.max(x0)..=ex1.min(x1 - 1) {
                if self.contains(x as f64, y as f64) {
                    n += 1;
                }
            }
        }
        n
    }

    /// Disc pixels inside a `width x height` grid, as row-major indices.
    pub fn pixels(&self, width: usize, height: usize) -> Vec<usize> {
        let (ex0, ey0, ex1, ey1) = self.extent();
        let mut out = Vec::new();
        for y in ey0.max(0)..=ey1.min(height as i64 - 1) {
            for x in ex0.max(0)..=ex1.min(width as i64 - 1) {
                if self.contains(x as f64, y as f64) {
                    out.push(y as usize * width + x as usize);
                }
            }
        }
        out
    }

    pub fn centroid_within(&self, width: usize, height: usize) -> bool {
        self.cx >= 0.0 && self.cy >= 0.0 && self.cx <= (width - 1) as f64 && self.cy <= (height - 1) as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub crowns: Vec<Crown>,
}

impl AnnotationSet {
    pub fn new(crowns: Vec<Crown>) -> Result<Self> {
        let set = AnnotationSet { crowns };
        set.check_ids()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.crowns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crowns.is_empty()
    }

    fn check_ids(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.crowns.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::format("crowns.id", format!("duplicate crown id {}", w[0])));
        }
        Ok(())
    }

    /// Fails with a bounds error naming the first crown whose centre lies outside the grid.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        match self.crowns.iter().find(|c| !c.centroid_within(width, height)) {
            Some(c) => Err(Error::Bounds(format!(
                "crown {} centred at ({}, {}) lies outside {width}x{height}",
                c.id, c.cx, c.cy
            ))),
            None => Ok(()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: AnnotationSet =
            serde_json::from_str(&text).map_err(|e| Error::format("crowns", e.to_string()))?;
        set.check_ids()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("annotations serialize");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crown(cx: f64, cy: f64, r: f64) -> Crown {
        Crown { id: 1, class: HealthClass::Healthy, cx, cy, radius_px: r }
    }

    #[test]
    fn unit_disc_has_five_pixels() {
        assert_eq!(crown(5.0, 5.0, 1.0).full_area(), 5);
        assert_eq!(crown(5.0, 5.0, 1.0).pixels(10, 10), vec![45, 54, 55, 56, 65]);
    }

    #[test]
    fn clipped_area_at_corner() {
        let c = crown(0.0, 0.0, 1.0);
        assert_eq!(c.area_within(0, 0, 10, 10), 3);
        assert_eq!(c.pixels(10, 10).len(), 3);
    }

    #[test]
    fn json_round_trip_and_format() {
        let set = AnnotationSet::new(vec![crown(3.5, 4.0, 2.0)]).unwrap();
        let text = serde_json::to_string(&set).unwrap();
        assert_eq!(text, r#"{"crowns":[{"id":1,"class":"healthy","cx":3.5,"cy":4.0,"radius_px":2.0}]}"#);
        let back: AnnotationSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(AnnotationSet::new(vec![crown(1.0, 1.0, 1.0), crown(2.0, 2.0, 1.0)]).is_err());
    }

    #[test]
    fn class_parsing() {
        assert_eq!("dead".parse::<HealthClass>().unwrap(), HealthClass::Dead);
        assert!(matches!("palm".parse::<HealthClass>(), Err(Error::Label(_))));
    }
}
