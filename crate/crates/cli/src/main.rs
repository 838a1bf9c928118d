// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use palmwatch::augment::{tile_id, AugmentSpec};
use palmwatch::detect::{read_csv, to_csv, to_geojson, DetectorConfig};
use palmwatch::evaluate::Averaging;
use palmwatch::indices::{compute_index, index_stats_by_class, vegetation_mask, DEFAULT_VEGETATION_THRESHOLD};
use palmwatch::model::{train, TrainConfig, TrainingSet};
use palmwatch::pipeline::{
    detect_and_classify, evaluate_detections, predict_scene, run_pipeline, training_rows, PipelineConfig,
    DEFAULT_MATCH_DISTANCE_PX, DEFAULT_SAMPLES_PER_CLASS,
};
use palmwatch::synth::{generate_scene, SceneSpec};
use palmwatch::tiling::{extract_tile, tile_plan, DEFAULT_INDEX_OVERLAP, DEFAULT_PREDICT_OVERLAP, DEFAULT_TILE_SIZE};
use palmwatch::{load_raster, save_raster, AnnotationSet, Band, Error, ProbabilityMap, Raster, Result};

/// Date-palm crown detection and health classification from multiband imagery.
#[derive(Parser)]
#[command(name = "palmwatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write NDVI and gNDVI maps plus the vegetation mask of a scene.
    Index(IndexArgs),
    /// Cut a scene into fixed-size tiles named tile_{row}_{col}.
    Tile(TileArgs),
    /// Apply a seeded augmentation spec to every tile in a directory.
    Augment(AugmentArgs),
    /// Generate a synthetic plantation scene with ground-truth crowns.
    Synth(SynthArgs),
    /// Fit the per-pixel palm model on annotated scenes.
    Train(TrainArgs),
    /// Write the palm probability map of a scene.
    Predict(PredictArgs),
    /// Extract and classify crowns from a probability map.
    Detect(DetectArgs),
    /// Score detections against ground-truth annotations.
    Eval(EvalArgs),
    /// Run predict, detect and (with --truth) eval in one go.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct IndexArgs {
    scene: PathBuf,
    out_dir: PathBuf,
    /// NDVI cutoff; the mask keeps pixels strictly above it.
    #[arg(long, default_value_t = DEFAULT_VEGETATION_THRESHOLD)]
    vegetation_threshold: f64,
    /// Also write per-class index statistics for these annotations.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct TileArgs {
    scene: PathBuf,
    out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TILE_SIZE)]
    tile_size: usize,
    #[arg(long, default_value_t = DEFAULT_INDEX_OVERLAP)]
    overlap: usize,
    /// Clip these annotations into one tile_{row}_{col}.json per tile.
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    /// JSON with `operations` and `seed`.
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
    in_dir: PathBuf,
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec JSON; omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training scene; repeat together with --truth.
    #[arg(long = "scene", required = true)]
    scenes: Vec<PathBuf>,
    /// Annotations for the scene in the same position.
    #[arg(long = "truth", required = true)]
    truths: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Pixels drawn per label (palm, background) and scene.
    #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_CLASS)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 4096)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    scene: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TILE_SIZE)]
    tile_size: usize,
    #[arg(long, default_value_t = DEFAULT_PREDICT_OVERLAP)]
    overlap: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct DetectorArgs {
    /// Foreground cutoff; pixels need p strictly above it.
    #[arg(long, default_value_t = DetectorConfig::default().prob_threshold)]
    prob_threshold: f64,
    #[arg(long, default_value_t = DetectorConfig::default().min_area)]
    min_area: usize,
    /// Larger components are split at probability peaks.
    #[arg(long, default_value_t = DetectorConfig::default().max_area)]
    max_area: usize,
    /// Peaks closer than this merge into one seed.
    #[arg(long, default_value_t = DetectorConfig::default().split_min_distance)]
    split_min_distance: f64,
    /// Live crowns narrower than this are smallish.
    #[arg(long, default_value_t = DetectorConfig::default().smallish_diameter_px)]
    smallish_diameter_px: f64,
    /// Crowns with mean NDVI at or below this are dead.
    #[arg(long, default_value_t = DetectorConfig::default().dead_ndvi_max)]
    dead_ndvi_max: f64,
}

impl DetectorArgs {
    fn config(&self) -> DetectorConfig {
        DetectorConfig {
            prob_threshold: self.prob_threshold,
            min_area: self.min_area,
            max_area: self.max_area,
            split_min_distance: self.split_min_distance,
            smallish_diameter_px: self.smallish_diameter_px,
            dead_ndvi_max: self.dead_ndvi_max,
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    /// Probability map written by `predict`.
    prob: PathBuf,
    /// Scene the map was predicted from; supplies the index bands.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// detections.csv written by `detect`.
    detections: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MATCH_DISTANCE_PX)]
    match_distance: f64,
    /// macro, micro or weighted.
    #[arg(long, default_value_t = Averaging::Macro)]
    averaging: Averaging,
}

#[derive(Args)]
struct PipelineArgs {
    /// Run manifest; when given, the other flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    scene: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_VEGETATION_THRESHOLD)]
    vegetation_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_TILE_SIZE)]
    tile_size: usize,
    #[arg(long, default_value_t = DEFAULT_PREDICT_OVERLAP)]
    overlap: usize,
    #[arg(long, default_value_t = DEFAULT_MATCH_DISTANCE_PX)]
    match_distance: f64,
    #[arg(long, default_value_t = Averaging::Macro)]
    averaging: Averaging,
    /// Worker threads; outputs do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    save_probability_map: bool,
    #[command(flatten)]
    detector: DetectorArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Index(a) => index(a),
        Command::Tile(a) => tile(a),
        Command::Augment(a) => augment(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => eval(a),
        Command::Pipeline(a) => pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn require_file(label: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{label} `{}` does not exist", path.display())))
    }
}

fn index(a: IndexArgs) -> Result<()> {
    if !(-1.0..=1.0).contains(&a.vegetation_threshold) {
        return Err(Error::Config(format!("vegetation threshold {} outside [-1, 1]", a.vegetation_threshold)));
    }
    let raster = load_raster(&a.scene)?;
    let truth = a.truth.as_deref().map(AnnotationSet::load).transpose()?;
    create_dir(&a.out_dir)?;
    let valid = raster.valid_mask();
    let mut stats = Vec::new();
    for name in ["ndvi", "gndvi"] {
        let map = compute_index(&raster, name, &valid)?;
        save_raster(&with_origin(map.to_raster(), raster.origin())?, a.out_dir.join(format!("{name}.rhdr")))?;
        if name == "ndvi" {
            let mask = vegetation_mask(&map, a.vegetation_threshold);
            let samples = mask.bits().iter().map(|&b| f32::from(u8::from(b))).collect();
            let r = Raster::new(raster.width(), raster.height(), vec![Band::new("vegetation", None, samples)], None, raster.origin())?;
            save_raster(&r, a.out_dir.join("vegetation_mask.rhdr"))?;
            println!("vegetation fraction {:.6}", mask.count() as f64 / raster.len() as f64);
        }
        if let Some(t) = &truth {
            stats.extend(index_stats_by_class(&map, t)?);
        }
    }
    if truth.is_some() {
        let text = serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n";
        write_text(&a.out_dir.join("index_stats.json"), &text)?;
    }
    Ok(())
}

fn with_origin(r: Raster, origin: (i64, i64)) -> Result<Raster> {
    let (w, h, nodata) = (r.width(), r.height(), r.nodata());
    Raster::new(w, h, r.into_bands(), nodata, origin)
}

fn tile(a: TileArgs) -> Result<()> {
    if a.tile_size == 0 || a.overlap >= a.tile_size {
        return Err(Error::Config(format!("need 0 <= overlap < tile size, got {} and {}", a.overlap, a.tile_size)));
    }
    let raster = load_raster(&a.scene)?;
    let ann = a.annotations.as_deref().map(AnnotationSet::load).transpose()?;
    let plan = tile_plan(raster.width(), raster.height(), a.tile_size, a.overlap)?;
    create_dir(&a.out_dir)?;
    for win in &plan.windows {
        save_raster(&extract_tile(&raster, win)?, a.out_dir.join(format!("{}.rhdr", win.name())))?;
        if let Some(ann) = &ann {
            let shifted = ann.crowns.iter().map(|c| palmwatch::Crown {
                cx: c.cx - win.x as f64,
                cy: c.cy - win.y as f64,
                ..c.clone()
            });
            let clipped = palmwatch::augment::clip_annotations(shifted, plan.tile_size, plan.tile_size);
            clipped.save(a.out_dir.join(format!("{}.json", win.name())))?;
        }
    }
    println!("{} tiles ({} rows x {} cols)", plan.windows.len(), plan.rows, plan.cols);
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<()> {
    let mut spec: AugmentSpec = read_json(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let entries = fs::read_dir(&a.in_dir).map_err(|source| Error::Io { path: a.in_dir.clone(), source })?;
    let mut headers: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rhdr"))
        .collect();
    headers.sort();
    create_dir(&a.out_dir)?;
    for header in &headers {
        let stem = header.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let tile = load_raster(header)?;
        let ann_path = header.with_extension("json");
        let ann = if ann_path.is_file() { AnnotationSet::load(&ann_path)? } else { AnnotationSet::default() };
        let (out, out_ann) = spec.apply(tile_id(&stem), &tile, &ann).map_err(|e| e.in_stage("augment", header.display().to_string()))?;
        save_raster(&out, a.out_dir.join(format!("{stem}.rhdr")))?;
        out_ann.save(a.out_dir.join(format!("{stem}.json")))?;
    }
    println!("augmented {} tiles", headers.len());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let (raster, truth) = generate_scene(&spec)?;
    create_dir(&a.out_dir)?;
    save_raster(&raster, a.out_dir.join("scene.rhdr"))?;
    truth.save(a.out_dir.join("annotations.json"))?;
    println!("{}x{} scene with {} crowns", raster.width(), raster.height(), truth.len());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    if a.scenes.len() != a.truths.len() {
        return Err(Error::Config(format!("{} scenes but {} annotation files", a.scenes.len(), a.truths.len())));
    }
    let config = TrainConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        l2: a.l2,
    };
    if !(config.learning_rate > 0.0) || config.epochs == 0 || config.batch_size == 0 || !(config.l2 >= 0.0) || a.samples_per_class == 0 {
        return Err(Error::Config("learning rate, epochs, batch size and samples per class must be positive; l2 non-negative".into()));
    }
    for (s, t) in a.scenes.iter().zip(&a.truths) {
        require_file("scene", s)?;
        require_file("annotations", t)?;
    }
    let mut sets = Vec::with_capacity(a.scenes.len());
    for (k, (s, t)) in a.scenes.iter().zip(&a.truths).enumerate() {
        let raster = load_raster(s)?;
        let truth = AnnotationSet::load(t)?;
        let seed = a.seed.wrapping_add(k as u64);
        sets.push(training_rows(&raster, &truth, a.samples_per_class, seed).map_err(|e| e.in_stage("sample", s.display().to_string()))?);
    }
    let set = TrainingSet::concat(sets)?;
    let outcome = train(&set, &config)?;
    outcome.params.save(&a.out)?;
    println!("trained on {} pixels, final loss {:.6}", set.len(), outcome.final_loss().unwrap_or(f64::NAN));
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    if a.tile_size == 0 || a.overlap >= a.tile_size || a.jobs == 0 {
        return Err(Error::Config("need tile size > overlap >= 0 and jobs >= 1".into()));
    }
    require_file("model", &a.model)?;
    let raster = load_raster(&a.scene)?;
    let params = palmwatch::model::ModelParams::load(&a.model)?;
    let prob = predict_scene(&raster, &params, a.tile_size, a.overlap, a.jobs).map_err(|e| e.in_stage("predict", a.scene.display().to_string()))?;
    save_raster(&prob.to_raster(raster.origin()), &a.out)
}

fn write_detections(dir: &Path, dets: &[palmwatch::detect::CrownDetection], origin: (i64, i64)) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join("detections.geojson"), &to_geojson(dets, origin))?;
    write_text(&dir.join("detections.csv"), &to_csv(dets, origin))
}

fn detect(a: DetectArgs) -> Result<()> {
    let cfg = a.detector.config();
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let raster = load_raster(&a.scene)?;
    let prob_raster = load_raster(&a.prob)?;
    if (prob_raster.width(), prob_raster.height()) != (raster.width(), raster.height()) {
        return Err(Error::Shape(format!(
            "probability map is {}x{} but the scene is {}x{}",
            prob_raster.width(),
            prob_raster.height(),
            raster.width(),
            raster.height()
        )));
    }
    let prob = ProbabilityMap::from_raster(&prob_raster)?;
    let dets = detect_and_classify(&prob, &raster, &cfg).map_err(|e| e.in_stage("detect", a.prob.display().to_string()))?;
    write_detections(&a.out_dir, &dets, raster.origin())?;
    println!("{} crowns", dets.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(a.match_distance > 0.0) {
        return Err(Error::Config("match distance must be positive".into()));
    }
    let dets = read_csv(&a.detections)?;
    let truth = AnnotationSet::load(&a.truth)?;
    let ev = evaluate_detections(&dets, &truth, a.match_distance, a.averaging)?;
    create_dir(&a.out_dir)?;
    if let Some(report) = &ev.report {
        write_text(&a.out_dir.join("metrics.csv"), &report.to_csv())?;
    }
    write_text(&a.out_dir.join("evaluation.json"), &ev.to_json())?;
    println!(
        "matched {} / false positives {} / false negatives {}",
        ev.matched, ev.false_positives, ev.false_negatives
    );
    print!("{}", ev.confusion.render());
    if let Some(report) = &ev.report {
        let agg = report.selected();
        println!("{} precision {:.4} recall {:.4} f1 {:.4} accuracy {:.4}", report.averaging, agg.precision, agg.recall, agg.f1, report.accuracy);
    }
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => {
            let mut c = PipelineConfig::new(
                a.scene.clone().expect("required by clap"),
                a.model.clone().expect("required by clap"),
                a.out_dir.clone().expect("required by clap"),
            );
            c.truth = a.truth.clone();
            c.vegetation_threshold = a.vegetation_threshold;
            c.tile_size = a.tile_size;
            c.overlap = a.overlap;
            c.detector = a.detector.config();
            c.match_distance_px = a.match_distance;
            c.averaging = a.averaging;
            c.save_probability_map = a.save_probability_map;
            c
        }
    };
    if let Some(j) = a.jobs {
        config.jobs = j;
    }
    let summary = run_pipeline(&config)?;
    println!("vegetation fraction {:.6}", summary.vegetation_fraction);
    println!("{} crowns", summary.detections.len());
    if let Some(ev) = &summary.evaluation {
        print!("{}", ev.confusion.render());
        if let Some(report) = &ev.report {
            let agg = report.selected();
            println!("{} f1 {:.4} accuracy {:.4}", report.averaging, agg.f1, report.accuracy);
        }
    }
    for p in &summary.outputs {
        println!("wrote {}", p.display());
    }
    Ok(())
}
