//! Pixelwise palm classifier producing probability maps.
//!
//! The model is logistic regression over standardized per-pixel features
//! (raw band reflectances followed by vegetation indices), fit by mini-batch
//! gradient descent on mean cross-entropy plus an L2 penalty `l2/2 * |w|^2`.
//! The bias is not penalized.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indices::{nd_value, BUILTIN_INDICES};
use crate::probability::ProbabilityMap;
use crate::raster::{Mask, Raster};

pub const DEFAULT_FEATURES: [&str; 6] = ["red", "green", "blue", "nir", "ndvi", "gndvi"];

/// Per-pixel feature columns over a raster grid.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub names: Vec<String>,
    pub width: usize,
    pub height: usize,
    /// One column per feature, row-major over the grid.
    pub columns: Vec<Vec<f32>>,
    pub valid: Mask,
}

impl FeatureGrid {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Feature vector at a pixel, or `None` where the pixel is masked out.
    pub fn vector(&self, x: usize, y: usize) -> Option<Vec<f64>> {
        let i = y * self.width + x;
        self.valid.bits()[i].then(|| self.columns.iter().map(|c| f64::from(c[i])).collect())
    }
}

/// Manifest for a raster: its bands in order, then every built-in index whose bands exist.
pub fn default_manifest(raster: &Raster) -> Vec<String> {
    let mut names = raster.band_names();
    for (name, a, b) in BUILTIN_INDICES {
        if raster.band(a).is_ok() && raster.band(b).is_ok() {
            names.push(name.to_string());
        }
    }
    names
}

fn columns<'a>(raster: &'a Raster, mask: &Mask, manifest: &[String]) -> std::result::Result<Vec<Cow<'a, [f32]>>, Vec<String>> {
    let mut out = Vec::with_capacity(manifest.len());
    let mut missing = Vec::new();
    for name in manifest {
        if let Ok(b) = raster.band(name) {
            out.push(Cow::Borrowed(b.samples()));
            continue;
        }
        let idx = BUILTIN_INDICES.iter().find(|(n, _, _)| n == name);
        match idx.map(|(_, a, b)| (raster.band(a), raster.band(b))) {
            Some((Ok(a), Ok(b))) => {
                // An undefined index (zero denominator) on a valid pixel contributes 0.
                let col = a
                    .samples()
                    .iter()
                    .zip(b.samples())
                    .zip(mask.bits())
                    .map(|((&pa, &pb), &ok)| {
                        let v = nd_value(pa, pb, ok);
                        if v.is_nan() && ok {
                            0.0
                        } else {
                            v
                        }
                    })
                    .collect();
                out.push(Cow::Owned(col));
            }
            _ => missing.push(name.clone()),
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(missing)
    }
}

pub fn featurize(raster: &Raster, mask: &Mask, manifest: &[String]) -> Result<FeatureGrid> {
    mask.same_shape(raster.width(), raster.height())?;
    let cols = columns(raster, mask, manifest).map_err(|missing| Error::Lookup {
        name: missing.join(","),
        available: raster.band_names(),
    })?;
    Ok(FeatureGrid {
        names: manifest.to_vec(),
        width: raster.width(),
        height: raster.height(),
        columns: cols.into_iter().map(Cow::into_owned).collect(),
        valid: mask.clone(),
    })
}

/// Training rows in row-major order with 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub feature_names: Vec<String>,
    pub rows: Vec<f64>,
    pub labels: Vec<f64>,
}

impl TrainingSet {
    pub fn new(feature_names: Vec<String>, rows: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        let n = feature_names.len();
        if n == 0 || rows.len() != n * labels.len() {
            return Err(Error::Shape(format!(
                "{} values cannot form {} rows of {n} features",
                rows.len(),
                labels.len()
            )));
        }
        Ok(TrainingSet { feature_names, rows, labels })
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.n_features();
        &self.rows[i * n..(i + 1) * n]
    }

    /// Every valid pixel of the grid; masked pixels contribute no row.
    pub fn from_grid(grid: &FeatureGrid, labels: &Mask) -> Result<Self> {
        labels.same_shape(grid.width, grid.height)?;
        let idx: Vec<usize> = (0..grid.width * grid.height).filter(|&i| grid.valid.bits()[i]).collect();
        Ok(Self::gather(grid, labels, &idx))
    }

    /// At most `per_class` valid pixels of each label, drawn uniformly without replacement.
    pub fn sample_balanced(grid: &FeatureGrid, labels: &Mask, per_class: usize, seed: u64) -> Result<Self> {
        labels.same_shape(grid.width, grid.height)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = Vec::new();
        for want in [true, false] {
            let mut pool: Vec<usize> = (0..grid.width * grid.height)
                .filter(|&i| grid.valid.bits()[i] && labels.bits()[i] == want)
                .collect();
            if pool.len() > per_class {
                let (chosen, _) = pool.partial_shuffle(&mut rng, per_class);
                chosen.sort_unstable();
                pool = chosen.to_vec();
            }
            idx.extend(pool);
        }
        Ok(Self::gather(grid, labels, &idx))
    }

    fn gather(grid: &FeatureGrid, labels: &Mask, idx: &[usize]) -> Self {
        let mut rows = Vec::with_capacity(idx.len() * grid.len());
        for &i in idx {
            rows.extend(grid.columns.iter().map(|c| f64::from(c[i])));
        }
        TrainingSet {
            feature_names: grid.names.clone(),
            rows,
            labels: idx.iter().map(|&i| if labels.bits()[i] { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Concatenates sets sharing one manifest.
    pub fn concat(sets: Vec<TrainingSet>) -> Result<Self> {
        let mut it = sets.into_iter();
        let mut out = it.next().ok_or_else(|| Error::DegenerateData("no training data".into()))?;
        for s in it {
            if s.feature_names != out.feature_names {
                return Err(Error::Shape("training sets use different feature manifests".into()));
            }
            out.rows.extend(s.rows);
            out.labels.extend(s.labels);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Identity standardization for `n` features.
    pub fn identity(n: usize) -> Self {
        NormStats { mean: vec![0.0; n], std: vec![1.0; n] }
    }

    /// Population mean and standard deviation per feature; zero spread maps to 1.
    pub fn fit(set: &TrainingSet) -> Self {
        let n = set.n_features();
        let m = set.len() as f64;
        let mut mean = vec![0.0; n];
        for i in 0..set.len() {
            for (acc, v) in mean.iter_mut().zip(set.row(i)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; n];
        for i in 0..set.len() {
            for ((acc, v), mu) in var.iter_mut().zip(set.row(i)).zip(&mean) {
                *acc += (v - mu).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / m).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        NormStats { mean, std }
    }

    /// Writes the standardized `row` into `out`.
    pub fn apply(&self, row: &[f64], out: &mut [f64]) {
        for (((o, v), mu), sd) in out.iter_mut().zip(row).zip(&self.mean).zip(&self.std) {
            *o = (v - mu) / sd;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub features: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub norm: NormStats,
}

impl ModelParams {
    /// All-zero parameters: every prediction is 0.5.
    pub fn zeros(features: Vec<String>, norm: NormStats) -> Self {
        let n = features.len();
        ModelParams { features, weights: vec![0.0; n], bias: 0.0, norm }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.len();
        if self.weights.len() != n || self.norm.mean.len() != n || self.norm.std.len() != n {
            return Err(Error::Shape(format!(
                "{n} features but {} weights, {} means, {} std devs",
                self.weights.len(),
                self.norm.mean.len(),
                self.norm.std.len()
            )));
        }
        if self.norm.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Domain("normalization std devs must be positive".into()));
        }
        Ok(())
    }

    /// Probability for one raw (unstandardized) feature vector.
    pub fn probability(&self, raw: &[f64]) -> f64 {
        let z: f64 = raw
            .iter()
            .zip(&self.weights)
            .zip(self.norm.mean.iter().zip(&self.norm.std))
            .map(|((v, w), (mu, sd))| w * (v - mu) / sd)
            .sum::<f64>()
            + self.bias;
        sigmoid(z)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: ModelParams = serde_json::from_str(&text).map_err(|e| Error::format("model", e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("params serialize");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.1, epochs: 300, batch_size: 4096, seed: 0, l2: 1e-4 }
    }
}

/// Raw feature rows and labels for one gradient or loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub rows: &'a [f64],
    pub labels: &'a [f64],
}

impl<'a> Batch<'a> {
    pub fn of(set: &'a TrainingSet) -> Self {
        Batch { rows: &set.rows, labels: &set.labels }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

// Both routines operate on already-standardized rows.
fn grad_std(weights: &[f64], bias: f64, rows: &[f64], labels: &[f64], l2: f64) -> Gradient {
    let n = weights.len();
    let mut gw = vec![0.0; n];
    let mut gb = 0.0;
    for (x, &y) in rows.chunks_exact(n).zip(labels) {
        let z = x.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() + bias;
        let err = sigmoid(z) - y;
        for (g, v) in gw.iter_mut().zip(x) {
            *g += err * v;
        }
        gb += err;
    }
    let m = labels.len() as f64;
    for (g, w) in gw.iter_mut().zip(weights) {
        *g = *g / m + l2 * w;
    }
    Gradient { weights: gw, bias: gb / m }
}

fn loss_std(weights: &[f64], bias: f64, rows: &[f64], labels: &[f64], l2: f64) -> f64 {
    let n = weights.len();
    let data: f64 = rows
        .chunks_exact(n)
        .zip(labels)
        .map(|(x, &y)| {
            let z = x.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() + bias;
            softplus(z) - y * z
        })
        .sum();
    data / labels.len() as f64 + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

fn standardize(params: &ModelParams, rows: &[f64]) -> Vec<f64> {
    let n = params.features.len();
    let mut out = vec![0.0; rows.len()];
    for (src, dst) in rows.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        params.norm.apply(src, dst);
    }
    out
}

/// Analytic gradient of the regularized mean cross-entropy at `params`.
pub fn gradient(params: &ModelParams, batch: Batch<'_>, l2: f64) -> Gradient {
    assert!(!batch.labels.is_empty(), "gradient of an empty batch");
    let xs = standardize(params, batch.rows);
    grad_std(&params.weights, params.bias, &xs, batch.labels, l2)
}

/// Regularized mean cross-entropy at `params`.
pub fn loss(params: &ModelParams, batch: Batch<'_>, l2: f64) -> f64 {
    let xs = standardize(params, batch.rows);
    loss_std(&params.weights, params.bias, &xs, batch.labels, l2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Full-set loss after each epoch.
    pub loss_history: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }
}

pub fn train(set: &TrainingSet, config: &TrainConfig) -> Result<TrainOutcome> {
    check_trainable(set)?;
    train_with_norm(set, NormStats::fit(set), config)
}

/// Training with caller-supplied standardization statistics.
pub fn train_with_norm(set: &TrainingSet, norm: NormStats, config: &TrainConfig) -> Result<TrainOutcome> {
    check_trainable(set)?;
    if !(config.learning_rate > 0.0) || config.batch_size == 0 || !(config.l2 >= 0.0) {
        return Err(Error::Parameter(format!("invalid training config {config:?}")));
    }
    let n = set.n_features();
    let mut params = ModelParams::zeros(set.feature_names.clone(), norm);
    params.validate()?;
    let xs = standardize(&params, &set.rows);
    let m = set.len();
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut batch_rows = Vec::with_capacity(config.batch_size.min(m) * n);
    let mut batch_labels = Vec::with_capacity(config.batch_size.min(m));
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if config.batch_size < m {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.batch_size) {
            let g = if chunk.len() == m {
                grad_std(&params.weights, params.bias, &xs, &set.labels, config.l2)
            } else {
                batch_rows.clear();
                batch_labels.clear();
                for &i in chunk {
                    batch_rows.extend_from_slice(&xs[i * n..(i + 1) * n]);
                    batch_labels.push(set.labels[i]);
                }
                grad_std(&params.weights, params.bias, &batch_rows, &batch_labels, config.l2)
            };
            for (w, gw) in params.weights.iter_mut().zip(&g.weights) {
                *w -= config.learning_rate * gw;
            }
            params.bias -= config.learning_rate * g.bias;
        }
        let l = loss_std(&params.weights, params.bias, &xs, &set.labels, config.l2);
        if !l.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.push(l);
    }
    Ok(TrainOutcome { params, loss_history: history })
}

fn check_trainable(set: &TrainingSet) -> Result<()> {
    let pos = set.labels.iter().filter(|&&y| y == 1.0).count();
    if pos == 0 || pos == set.len() {
        return Err(Error::DegenerateData(format!(
            "need both palm and non-palm examples, got {pos} of {}",
            set.len()
        )));
    }
    if set.rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("training features must be finite".into()));
    }
    Ok(())
}

/// `sigmoid(w . x_std + b)` per masked-in pixel; `NaN` elsewhere.
pub fn predict_map(raster: &Raster, mask: &Mask, params: &ModelParams) -> Result<ProbabilityMap> {
    params.validate()?;
    mask.same_shape(raster.width(), raster.height())?;
    let cols = columns(raster, mask, &params.features).map_err(|missing| Error::Compatibility { missing })?;
    let w = raster.width();
    let n = params.features.len();
    let mut values = vec![f32::NAN; raster.len()];
    values.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let mut raw = vec![0.0; n];
        for (x, out) in row.iter_mut().enumerate() {
            let i = y * w + x;
            if !mask.bits()[i] {
                continue;
            }
            for (r, c) in raw.iter_mut().zip(&cols) {
                *r = f64::from(c[i]);
            }
            *out = params.probability(&raw) as f32;
        }
    });
    ProbabilityMap::new(w, raster.height(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indices::ndvi;
    use crate::raster::Band;

    fn scene() -> Raster {
        let n = 6;
        let mk = |k: f32| (0..n).map(|i| 0.1 + k * i as f32 / 10.0).collect::<Vec<_>>();
        Raster::new(
            3,
            2,
            vec![
                Band::new("red", None, mk(0.2)),
                Band::new("green", None, mk(0.3)),
                Band::new("blue", None, mk(0.1)),
                Band::new("nir", None, mk(0.9)),
            ],
            None,
            (0, 0),
        )
        .unwrap()
    }

    fn manifest() -> Vec<String> {
        DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn four_bands_plus_two_indices() {
        let r = scene();
        assert_eq!(default_manifest(&r), vec!["red", "green", "blue", "nir", "ndvi", "gndvi"]);
        let g = featurize(&r, &r.valid_mask(), &manifest()).unwrap();
        assert_eq!(g.vector(1, 1).unwrap().len(), 6);
        let nd = ndvi(r.band("nir").unwrap(), r.band("red").unwrap(), &r.valid_mask()).unwrap();
        assert_eq!(g.columns[4], nd.values);
    }

    #[test]
    fn masked_pixel_has_no_row() {
        let r = scene();
        let mask = Mask::new(3, 2, vec![true, false, true, true, true, true]).unwrap();
        let g = featurize(&r, &mask, &manifest()).unwrap();
        assert!(g.vector(1, 0).is_none());
        let labels = Mask::new(3, 2, vec![true, true, false, false, false, false]).unwrap();
        let set = TrainingSet::from_grid(&g, &labels).unwrap();
        assert_eq!(set.len(), 5);
        assert_eq!(set.labels, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_band_errors() {
        let r = scene();
        let mut m = manifest();
        m.push("swir".into());
        assert!(matches!(featurize(&r, &r.valid_mask(), &m), Err(Error::Lookup { .. })));
        let p = ModelParams::zeros(m, NormStats::identity(7));
        match predict_map(&r, &r.valid_mask(), &p) {
            Err(Error::Compatibility { missing }) => assert_eq!(missing, vec!["swir"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_params_predict_half_and_keep_mask() {
        let r = scene();
        let mask = Mask::new(3, 2, vec![true, true, false, true, true, true]).unwrap();
        let p = ModelParams::zeros(manifest(), NormStats::identity(6));
        let map = predict_map(&r, &mask, &p).unwrap();
        assert_eq!(map.valid_mask(), mask);
        assert!(map.values.iter().filter(|v| !v.is_nan()).all(|&v| v == 0.5));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let set = TrainingSet::new(vec!["a".into()], vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        let out = train(&set, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
        assert_eq!(out.params.weights, vec![0.0]);
        assert_eq!(out.params.bias, 0.0);
        assert!(out.final_loss().is_none());
        assert_eq!(out.params.probability(&[3.0]), 0.5);
    }

    #[test]
    fn single_class_is_degenerate() {
        let set = TrainingSet::new(vec!["a".into()], vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(train(&set, &TrainConfig::default()), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn huge_step_diverges_with_epoch() {
        let set = TrainingSet::new(vec!["a".into()], vec![-1.0, 1.0, -2.0, 2.0], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let cfg = TrainConfig { learning_rate: 1e308, epochs: 5, l2: 1.0, ..TrainConfig::default() };
        assert!(matches!(train(&set, &cfg), Err(Error::Divergence { epoch: 0 })));
    }

    #[test]
    fn l2_term_is_lambda_w() {
        let set = TrainingSet::new(vec!["a".into(), "b".into()], vec![1.0, 2.0, -1.0, 0.5], vec![1.0, 0.0]).unwrap();
        let mut p = ModelParams::zeros(set.feature_names.clone(), NormStats::identity(2));
        p.weights = vec![0.7, -1.3];
        let g0 = gradient(&p, Batch::of(&set), 0.0);
        let g1 = gradient(&p, Batch::of(&set), 0.25);
        assert!((g1.weights[0] - g0.weights[0] - 0.25 * 0.7).abs() < 1e-15);
        assert!((g1.weights[1] - g0.weights[1] - 0.25 * -1.3).abs() < 1e-15);
        assert_eq!(g1.bias, g0.bias);
    }

    #[test]
    fn symmetric_balanced_batch_has_zero_bias_gradient() {
        let set = TrainingSet::new(vec!["a".into()], vec![-1.0, 1.0, -2.0, 2.0], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let p = ModelParams::zeros(vec!["a".into()], NormStats::identity(1));
        assert_eq!(gradient(&p, Batch::of(&set), 1e-4).bias, 0.0);
    }

    #[test]
    fn params_json_round_trip() {
        let p = ModelParams {
            features: vec!["red".into(), "ndvi".into()],
            weights: vec![0.1 + 0.2, -1.0 / 3.0],
            bias: std::f64::consts::PI,
            norm: NormStats { mean: vec![1e-17, 2.5], std: vec![0.3, 7.0 / 9.0] },
        };
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.starts_with(r#"{"features":["red","ndvi"],"weights":["#));
        let back: ModelParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }
}
