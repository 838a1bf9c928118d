//! End-to-end run: mask, tile, predict, stitch, detect, classify and, when
//! ground truth is supplied, score. Every parameter lives in
//! [`PipelineConfig`], which is written next to the outputs as the run
//! manifest and can be fed back in to reproduce them.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationSet, HealthClass};
use crate::detect::{detect_crowns, match_detections, to_csv, to_geojson, CrownClassifier, CrownDetection, DetectorConfig};
use crate::error::{Error, Result};
use crate::evaluate::{confusion_matrix, metrics, Averaging, ConfusionMatrix, MetricsReport};
use crate::indices::{compute_index, vegetation_mask, DEFAULT_VEGETATION_THRESHOLD};
use crate::model::{default_manifest, featurize, predict_map, ModelParams, TrainingSet};
use crate::probability::ProbabilityMap;
use crate::raster::{load_raster, save_raster, Raster};
use crate::synth::rasterize_labels;
use crate::tiling::{extract_tile, stitch, tile_plan, DEFAULT_PREDICT_OVERLAP, DEFAULT_TILE_SIZE};

pub const DEFAULT_MATCH_DISTANCE_PX: f64 = 5.0;
/// Training pixels sampled per label and scene.
pub const DEFAULT_SAMPLES_PER_CLASS: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub scene: PathBuf,
    pub model: PathBuf,
    pub truth: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub vegetation_threshold: f64,
    pub tile_size: usize,
    pub overlap: usize,
    pub detector: DetectorConfig,
    pub match_distance_px: f64,
    pub averaging: Averaging,
    pub jobs: usize,
    pub save_probability_map: bool,
}

impl PipelineConfig {
    pub fn new(scene: impl Into<PathBuf>, model: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            scene: scene.into(),
            model: model.into(),
            truth: None,
            output_dir: output_dir.into(),
            vegetation_threshold: DEFAULT_VEGETATION_THRESHOLD,
            tile_size: DEFAULT_TILE_SIZE,
            overlap: DEFAULT_PREDICT_OVERLAP,
            detector: DetectorConfig::default(),
            match_distance_px: DEFAULT_MATCH_DISTANCE_PX,
            averaging: Averaging::Macro,
            jobs: 1,
            save_probability_map: false,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Checks inputs and ranges before any compute.
    pub fn validate(&self) -> Result<()> {
        let exists = |label: &str, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::Config(format!("{label} `{}` does not exist", p.display())))
            }
        };
        exists("scene", &self.scene)?;
        exists("model", &self.model)?;
        if let Some(t) = &self.truth {
            exists("truth annotations", t)?;
        }
        if !(-1.0..=1.0).contains(&self.vegetation_threshold) {
            return Err(Error::Config(format!("vegetation threshold {} outside [-1, 1]", self.vegetation_threshold)));
        }
        if self.tile_size == 0 || self.overlap >= self.tile_size {
            return Err(Error::Config(format!("need 0 <= overlap < tile size, got {} and {}", self.overlap, self.tile_size)));
        }
        if !(self.match_distance_px > 0.0) {
            return Err(Error::Config("match distance must be positive".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.detector.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionEvaluation {
    pub matched: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub detection_precision: f64,
    pub detection_recall: f64,
    /// Health classes of matched pairs, rows = ground truth.
    pub confusion: ConfusionMatrix,
    /// `None` when nothing matched.
    pub report: Option<MetricsReport>,
}

impl DetectionEvaluation {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("evaluation serializes") + "\n"
    }
}

/// Scores detections against ground truth: detection precision and recall
/// from the centroid matching, health-class metrics over matched pairs.
pub fn evaluate_detections(
    dets: &[CrownDetection],
    truth: &AnnotationSet,
    max_centroid_dist: f64,
    averaging: Averaging,
) -> Result<DetectionEvaluation> {
    let m = match_detections(dets, truth, max_centroid_dist)?;
    let classes: Vec<&str> = HealthClass::ALL.iter().map(|c| c.as_str()).collect();
    let mut actual = Vec::with_capacity(m.pairs.len());
    let mut predicted = Vec::with_capacity(m.pairs.len());
    for &(di, ti, _) in &m.pairs {
        let label = dets[di]
            .class_label
            .ok_or_else(|| Error::Label(format!("detection {} has no class", dets[di].id)))?;
        actual.push(truth.crowns[ti].class.as_str());
        predicted.push(label.as_str());
    }
    let confusion = confusion_matrix(&actual, &predicted, &classes)?;
    let report = if m.pairs.is_empty() { None } else { Some(metrics(&confusion, averaging)?) };
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(DetectionEvaluation {
        matched: m.pairs.len(),
        false_positives: m.false_positives.len(),
        false_negatives: m.false_negatives.len(),
        detection_precision: ratio(m.pairs.len(), dets.len()),
        detection_recall: ratio(m.pairs.len(), truth.len()),
        confusion,
        report,
    })
}

/// Balanced per-pixel training rows for one annotated scene.
pub fn training_rows(raster: &Raster, truth: &AnnotationSet, per_class: usize, seed: u64) -> Result<TrainingSet> {
    let grid = featurize(raster, &raster.valid_mask(), &default_manifest(raster))?;
    let labels = rasterize_labels(truth, raster.width(), raster.height());
    TrainingSet::sample_balanced(&grid, &labels, per_class, seed)
}

/// Tiles the scene, predicts each tile on `jobs` threads and stitches the result.
pub fn predict_scene(
    raster: &Raster,
    params: &ModelParams,
    tile_size: usize,
    overlap: usize,
    jobs: usize,
) -> Result<ProbabilityMap> {
    let plan = tile_plan(raster.width(), raster.height(), tile_size, overlap)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    let outputs = pool.install(|| {
        plan.windows
            .par_iter()
            .map(|w| {
                let tile = extract_tile(raster, w)?;
                Ok((*w, predict_map(&tile, &tile.valid_mask(), params)?))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    stitch(&plan, &outputs)
}

/// Detects and classifies crowns on a stitched probability map of `raster`.
pub fn detect_and_classify(prob: &ProbabilityMap, raster: &Raster, cfg: &DetectorConfig) -> Result<Vec<CrownDetection>> {
    let mut dets = detect_crowns(prob, cfg)?;
    CrownClassifier::new(raster)?.classify_all(&mut dets, cfg)?;
    Ok(dets)
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub vegetation_fraction: f64,
    pub detections: Vec<CrownDetection>,
    pub evaluation: Option<DetectionEvaluation>,
    pub outputs: Vec<PathBuf>,
}

fn write(path: PathBuf, text: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    outputs.push(path);
    Ok(())
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineSummary> {
    config.validate()?;
    let scene_name = config.scene.display().to_string();
    let raster = load_raster(&config.scene).map_err(|e| e.in_stage("load", &scene_name))?;
    let params = ModelParams::load(&config.model).map_err(|e| e.in_stage("load", config.model.display().to_string()))?;
    let truth = match &config.truth {
        Some(p) => Some(AnnotationSet::load(p).map_err(|e| e.in_stage("load", p.display().to_string()))?),
        None => None,
    };
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;

    let valid = raster.valid_mask();
    let ndvi = compute_index(&raster, "ndvi", &valid).map_err(|e| e.in_stage("mask", &scene_name))?;
    let vegetation_fraction = vegetation_mask(&ndvi, config.vegetation_threshold).count() as f64 / raster.len() as f64;

    let prob = predict_scene(&raster, &params, config.tile_size, config.overlap, config.jobs)
        .map_err(|e| e.in_stage("predict", &scene_name))?;
    let dets = detect_and_classify(&prob, &raster, &config.detector).map_err(|e| e.in_stage("detect", &scene_name))?;

    let out = &config.output_dir;
    let mut outputs = Vec::new();
    if config.save_probability_map {
        let p = out.join("probability.rhdr");
        save_raster(&prob.to_raster(raster.origin()), &p)?;
        outputs.push(p);
    }
    write(out.join("detections.geojson"), &to_geojson(&dets, raster.origin()), &mut outputs)?;
    write(out.join("detections.csv"), &to_csv(&dets, raster.origin()), &mut outputs)?;

    let evaluation = match &truth {
        Some(t) => {
            let ev = evaluate_detections(&dets, t, config.match_distance_px, config.averaging)
                .map_err(|e| e.in_stage("evaluate", &scene_name))?;
            if let Some(report) = &ev.report {
                write(out.join("metrics.csv"), &report.to_csv(), &mut outputs)?;
            }
            write(out.join("evaluation.json"), &ev.to_json(), &mut outputs)?;
            Some(ev)
        }
        None => None,
    };
    write(out.join("manifest.json"), &config.to_json(), &mut outputs)?;
    Ok(PipelineSummary { vegetation_fraction, detections: dets, evaluation, outputs })
}
