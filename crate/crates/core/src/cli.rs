//! Command-line front end. Every subcommand prints a JSON report with a
//! top-level `"version"`; `--out` also stores it (and any artifacts) in a
//! directory. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baseline::{run_baseline, BaselineConfig};
use crate::detection::loss_check_suite;
use crate::error::Error;
use crate::evaluation::{
    accumulated_confusion, agreement_report, average_precision, match_detections,
    mean_average_precision, score_error, ScoreErrorMode,
};
use crate::io::{
    load_annotations, load_annotations_unchecked, load_detections, load_ratings, save_detections,
    save_ratings, SlideSource,
};
use crate::model::{validate_annotation_set, AnnotationSet, Detection, Grade, SlideMeta};
use crate::pipeline::{
    plan_tiles, render_heatmap, run_pipeline, Detector, ExternalDetector, NoiseModel,
    OracleDetector, PipelineConfig, TilePlan,
};
use crate::sampling::{build_quadtree, sample_uniform, SamplerConfig, TwoStageSampler};
use crate::scoring::{grade_counts, ths};
use crate::synth::{
    balanced_rating_study, generate, golden_fixture, RatingStudyConfig, SynthConfig,
};
use crate::REPORT_VERSION;

/// Which detector `run` uses: `oracle`, or `external:<command line>`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DetectorSpec {
    #[default]
    Oracle,
    External(Vec<String>),
}

impl FromStr for DetectorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "oracle" {
            return Ok(DetectorSpec::Oracle);
        }
        match s.strip_prefix("external:") {
            Some(cmd) => {
                let parts: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
                if parts.is_empty() {
                    Err(
                        "external detector needs a command, e.g. external:python3 detector.py"
                            .into(),
                    )
                } else {
                    Ok(DetectorSpec::External(parts))
                }
            }
            None => Err(format!(
                "unknown detector {s:?}; use oracle or external:<command>"
            )),
        }
    }
}

impl TryFrom<String> for DetectorSpec {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<DetectorSpec> for String {
    fn from(d: DetectorSpec) -> String {
        d.to_string()
    }
}

impl fmt::Display for DetectorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectorSpec::Oracle => f.write_str("oracle"),
            DetectorSpec::External(cmd) => write!(f, "external:{}", cmd.join(" ")),
        }
    }
}

/// Contents of `--config`. Command-line flags override these values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub slide: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub detector: DetectorSpec,
    /// Seconds to wait for an external detector per tile.
    pub detector_timeout_s: Option<f64>,
    pub sampler: SamplerConfig,
    pub pipeline: PipelineConfig,
    pub noise: NoiseModel,
    pub synth: SynthConfig,
    pub baseline: BaselineConfig,
    pub ratings: RatingStudyConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Pushes the global seed into every component that draws randomness.
    fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.sampler.seed = seed;
            self.noise.seed = seed;
            self.synth.seed = seed;
            self.ratings.seed = seed;
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "eiph",
    version,
    about = "Hemosiderophage slide quantification toolkit"
)]
pub struct Cli {
    /// JSON run configuration; flags win over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for sampling, detector noise and synthesis
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Detection threads for `run`.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory for reports and artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Uniform,
    TwoStage,
    Quadtree,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic slide (a named fixture or the config's `synth`
    /// section), or a synthetic rating study with --ratings.
    Synth {
        #[arg(long)]
        fixture: Option<String>,
        #[arg(long, conflicts_with = "fixture")]
        ratings: bool,
    },
    /// Check an annotation file for broken invariants.
    Validate {
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Total hemosiderin score of an annotation or detection file.
    Score {
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Draw patch origins with a sampling strategy.
    Sample {
        #[arg(long)]
        slide: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "uniform")]
        strategy: Strategy,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Also write the sampled crops as PPM files (needs --slide and --out).
        #[arg(long)]
        crops: bool,
    },
    /// Detect over the whole slide and write result.json, heatmap and
    /// detections.
    Run {
        /// Slide directory holding manifest.json and tiles
        #[arg(long)]
        slide: Option<PathBuf>,
        /// Ground truth; defaults to annotations.jsonl next to the slide.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// `oracle` or `external:<command line>`.
        #[arg(long)]
        detector: Option<DetectorSpec>,
        /// Oracle: chance of dropping each cell
        #[arg(long)]
        miss_rate: Option<f64>,
        /// Oracle: box jitter in pixels
        #[arg(long)]
        jitter_sigma: Option<f64>,
        /// Oracle: false positives per mm²
        #[arg(long)]
        fp_per_mm2: Option<f64>,
        /// Tile side in pixels
        #[arg(long)]
        tile: Option<u32>,
        /// Tile overlap in pixels
        #[arg(long)]
        overlap: Option<u32>,
    },
    /// Compare predictions with ground truth: mAP and score error.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 1024)]
        tile: u32,
        #[arg(long, default_value_t = 128)]
        overlap: u32,
    },
    /// Rater agreement from a ratings CSV and a reference CSV.
    Agree {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 0)]
        session: u8,
    },
    /// Fit and evaluate the color-histogram kernel regression baseline.
    Baseline {
        #[arg(long)]
        slide: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Check loss gradients against finite differences.
    Losscheck,
}

/// Failure of a subcommand: bad invocation (exit 2) or domain error (exit 1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(Error),
    /// The report was produced but records a failed check.
    Failed(Value),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Domain(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Domain(e.into())
    }
}

type CliResult = Result<Value, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args`, runs the subcommand, prints the report and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(report) => {
            emit(&report);
            0
        }
        Err(CliError::Failed(report)) => {
            emit(&report);
            1
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run with --help for usage");
            2
        }
        Err(CliError::Domain(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Prints a report; a closed stdout (e.g. piped into `head`) is not an error.
fn emit(report: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", pretty(report));
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

fn write_report(dir: &Path, name: &str, report: &Value) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let mut text = pretty(report);
    text.push('\n');
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

pub fn dispatch(cli: Cli) -> CliResult {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("config {}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    cfg.apply_seed();
    if let Some(w) = cfg.workers {
        cfg.pipeline.workers = w;
    }

    let (report, name) = match cli.command {
        Command::Synth { fixture, ratings } => {
            (cmd_synth(&cfg, fixture.as_deref(), ratings)?, "synth.json")
        }
        Command::Validate { annotations } => return cmd_validate(&annotations),
        Command::Score { annotations } => (cmd_score(&annotations)?, "score.json"),
        Command::Sample {
            slide,
            annotations,
            strategy,
            count,
            crops,
        } => {
            let slide = slide.or(cfg.slide.clone());
            let annotations = annotations.or(cfg.annotations.clone());
            (
                cmd_sample(&cfg, slide, annotations, strategy, count, crops)?,
                "samples.json",
            )
        }
        Command::Run {
            slide,
            annotations,
            detector,
            miss_rate,
            jitter_sigma,
            fp_per_mm2,
            tile,
            overlap,
        } => {
            if let Some(s) = slide {
                cfg.slide = Some(s);
            }
            if let Some(a) = annotations {
                cfg.annotations = Some(a);
            }
            if let Some(d) = detector {
                cfg.detector = d;
            }
            if let Some(v) = miss_rate {
                cfg.noise.miss_rate = v;
            }
            if let Some(v) = jitter_sigma {
                cfg.noise.jitter_sigma = v;
            }
            if let Some(v) = fp_per_mm2 {
                cfg.noise.fp_per_mm2 = v;
            }
            if let Some(t) = tile {
                cfg.pipeline.tile_w = t;
                cfg.pipeline.tile_h = t;
            }
            if let Some(o) = overlap {
                cfg.pipeline.overlap = o;
            }
            // run writes its own files
            return cmd_run(&cfg);
        }
        Command::Eval {
            gt,
            pred,
            iou,
            tile,
            overlap,
        } => (cmd_eval(&gt, &pred, iou, tile, overlap)?, "eval.json"),
        Command::Agree {
            ratings,
            reference,
            session,
        } => (
            cmd_agree(&cfg, &ratings, &reference, session)?,
            "agreement.json",
        ),
        Command::Baseline { slide, annotations } => {
            let slide = slide.or(cfg.slide.clone());
            let annotations = annotations.or(cfg.annotations.clone());
            (cmd_baseline(&cfg, slide, annotations)?, "baseline.json")
        }
        Command::Losscheck => {
            let r = loss_check_suite(cfg.seed.unwrap_or(0))?;
            let passed = r.passed;
            let report = json!({ "version": REPORT_VERSION, "losscheck": r });
            if let Some(out) = &cfg.out {
                write_report(out, "losscheck.json", &report)?;
            }
            return if passed {
                Ok(report)
            } else {
                Err(CliError::Failed(report))
            };
        }
    };
    if let Some(out) = &cfg.out {
        write_report(out, name, &report)?;
    }
    Ok(report)
}

fn counts_report(counts: &[u64; 5]) -> Value {
    json!(counts)
}

fn cmd_synth(cfg: &RunConfig, fixture: Option<&str>, ratings: bool) -> CliResult {
    let out = cfg
        .out
        .as_ref()
        .ok_or_else(|| usage("synth needs --out DIR"))?;
    if ratings {
        let table = balanced_rating_study(&cfg.ratings)?;
        std::fs::create_dir_all(out)?;
        save_ratings(&table, &out.join("ratings.csv"), &out.join("reference.csv"))?;
        return Ok(json!({
            "version": REPORT_VERSION,
            "ratings": table.records.len(),
            "reference_counts": table.reference_counts(),
            "raters": table.raters().len(),
        }));
    }
    let (slide, set) = match fixture {
        Some(name) => golden_fixture(name, out)?,
        None => generate(&cfg.synth, out)?,
    };
    let counts = grade_counts(&set.cells);
    Ok(json!({
        "version": REPORT_VERSION,
        "fixture": fixture,
        "slide": slide.meta.id,
        "width": slide.meta.width,
        "height": slide.meta.height,
        "cells": set.cells.len(),
        "counts": counts_report(&counts.0),
        "ths": ths(&counts).ok(),
    }))
}

fn cmd_validate(path: &Path) -> CliResult {
    let set = load_annotations_unchecked(path)?;
    let violations: Vec<String> = validate_annotation_set(&set)
        .iter()
        .map(ToString::to_string)
        .collect();
    let report = json!({
        "version": REPORT_VERSION,
        "slide": set.slide.id,
        "cells": set.cells.len(),
        "valid": violations.is_empty(),
        "violations": violations,
    });
    if violations.is_empty() {
        Ok(report)
    } else {
        Err(CliError::Failed(report))
    }
}

fn cmd_score(path: &Path) -> CliResult {
    let (slide, dets) = load_detections(path)?;
    let counts = grade_counts(&dets);
    let r = ths(&counts)?;
    Ok(json!({
        "version": REPORT_VERSION,
        "slide": slide.id,
        "ths": r.rounded,
        "diagnosis": r.diagnosis_confirmed,
        "score": r.score,
        "n_cells": r.n_cells,
        "counts": counts_report(&counts.0),
    }))
}

fn open_inputs(
    slide: Option<&Path>,
    annotations: Option<&Path>,
) -> Result<(Option<SlideSource>, Option<AnnotationSet>), CliError> {
    let source = slide.map(SlideSource::open).transpose()?;
    let annotations = annotations.map(Path::to_path_buf).or_else(|| {
        let p = slide?.join("annotations.jsonl");
        p.exists().then_some(p)
    });
    let set = annotations.as_deref().map(load_annotations).transpose()?;
    Ok((source, set))
}

fn cmd_sample(
    cfg: &RunConfig,
    slide: Option<PathBuf>,
    annotations: Option<PathBuf>,
    strategy: Strategy,
    count: usize,
    crops: bool,
) -> CliResult {
    let (source, set) = open_inputs(slide.as_deref(), annotations.as_deref())?;
    let meta: SlideMeta = match (&source, &set) {
        (Some(s), _) => s.meta.clone(),
        (None, Some(a)) => a.slide.clone(),
        (None, None) => return Err(usage("sample needs --slide or --annotations")),
    };
    let sampler = &cfg.sampler;
    sampler.validate(&meta)?;
    let mut rng = sampler.rng();
    let mut samples = Vec::with_capacity(count);
    match strategy {
        Strategy::Uniform => {
            for _ in 0..count {
                let (x, y) = sample_uniform(&meta, sampler, &mut rng)?;
                samples.push(json!({ "x": x, "y": y }));
            }
        }
        Strategy::TwoStage => {
            let set = set
                .as_ref()
                .ok_or_else(|| usage("two-stage sampling needs annotations"))?;
            let s = TwoStageSampler::new(set, sampler)?;
            for _ in 0..count {
                let a = s.sample(&mut rng);
                samples.push(json!({ "x": a.origin.0, "y": a.origin.1, "anchor_id": a.anchor_id }));
            }
        }
        Strategy::Quadtree => {
            let set = set
                .as_ref()
                .ok_or_else(|| usage("quadtree sampling needs annotations"))?;
            let tree = build_quadtree(set, sampler)?;
            for _ in 0..count {
                let q = tree.sample(&mut rng);
                samples.push(json!({ "x": q.origin.0, "y": q.origin.1, "anchor_id": q.anchor_id, "leaf": q.leaf }));
            }
        }
    }
    if crops {
        let source = source
            .as_ref()
            .ok_or_else(|| usage("--crops needs --slide"))?;
        let out = cfg
            .out
            .as_ref()
            .ok_or_else(|| usage("--crops needs --out"))?;
        let dir = out.join("crops");
        std::fs::create_dir_all(&dir)?;
        for (i, s) in samples.iter().enumerate() {
            let origin = (s["x"].as_u64().unwrap_or(0), s["y"].as_u64().unwrap_or(0));
            let patch = source.read_region(&sampler.patch_at(origin))?;
            patch.write_ppm(&dir.join(format!("crop_{i:05}.ppm")))?;
        }
    }
    Ok(json!({
        "version": REPORT_VERSION,
        "strategy": format!("{strategy:?}").to_lowercase(),
        "seed": sampler.seed,
        "patch_w": sampler.patch_w,
        "patch_h": sampler.patch_h,
        "samples": samples,
    }))
}

/// mAP and both score errors of `pred` against `gt`.
pub fn evaluation_summary(
    gt: &AnnotationSet,
    pred: &[Detection],
    plan: &TilePlan,
    iou: f64,
) -> Result<Value, Error> {
    let report = match_detections(gt, pred, iou)?;
    let ap: Vec<Option<f64>> = Grade::ALL
        .iter()
        .map(|&g| average_precision(&report, g))
        .collect();
    Ok(json!({
        "map": mean_average_precision(&report).ok(),
        "ap_per_grade": ap,
        "iou_threshold": iou,
        "score_error": {
            "patch": score_error(gt, pred, plan, ScoreErrorMode::Patch).ok(),
            "slide": score_error(gt, pred, plan, ScoreErrorMode::Slide).ok(),
        },
    }))
}

fn cmd_run(cfg: &RunConfig) -> CliResult {
    let slide_path = cfg
        .slide
        .as_ref()
        .ok_or_else(|| usage("run needs --slide"))?;
    let out = cfg
        .out
        .as_ref()
        .ok_or_else(|| usage("run needs --out DIR"))?;
    let (source, gt) = open_inputs(Some(slide_path), cfg.annotations.as_deref())?;
    let source = source.expect("slide given");
    std::fs::create_dir_all(out)?;

    let detector: Box<dyn Detector> = match &cfg.detector {
        DetectorSpec::Oracle => {
            let gt = gt
                .clone()
                .ok_or_else(|| usage("the oracle detector needs --annotations"))?;
            Box::new(OracleDetector::new(gt, cfg.noise.clone())?)
        }
        DetectorSpec::External(cmd) => {
            let timeout = cfg
                .detector_timeout_s
                .map(Duration::from_secs_f64)
                .unwrap_or(crate::pipeline::external::DEFAULT_TIMEOUT);
            let scratch = out.join("scratch");
            Box::new(ExternalDetector::spawn(cmd, &scratch, timeout)?)
        }
    };

    let settings = json!({
        "detector": cfg.detector.to_string(),
        "tile_w": cfg.pipeline.tile_w,
        "tile_h": cfg.pipeline.tile_h,
        "overlap": cfg.pipeline.overlap,
        "nms_iou": cfg.pipeline.nms_iou,
        "noise": matches!(cfg.detector, DetectorSpec::Oracle).then_some(&cfg.noise),
    });
    let result = match run_pipeline(&source, detector.as_ref(), &cfg.pipeline) {
        Ok(r) => r,
        Err(e) => {
            let mut report = json!({
                "version": REPORT_VERSION,
                "slide": source.meta.id,
                "settings": settings,
                "ths": null,
                "error": e.to_string(),
            });
            if let Error::Detector {
                completed, total, ..
            } = &e
            {
                report["completed_tiles"] = json!(completed);
                report["total_tiles"] = json!(total);
            }
            write_report(out, "result.json", &report)?;
            return Err(CliError::Failed(report));
        }
    };
    drop(detector);
    let _ = std::fs::remove_dir(out.join("scratch"));

    render_heatmap(&result.heatmap, out)?;
    save_detections(
        &source.meta,
        &result.detections,
        &out.join("detections.jsonl"),
    )?;
    let plan = plan_tiles(
        &source.meta,
        cfg.pipeline.tile_w,
        cfg.pipeline.tile_h,
        cfg.pipeline.overlap,
    )?;
    let evaluation = gt
        .as_ref()
        .map(|gt| evaluation_summary(gt, &result.detections, &plan, 0.5))
        .transpose()?;
    let report = json!({
        "version": REPORT_VERSION,
        "slide": source.meta.id,
        "width": source.meta.width,
        "height": source.meta.height,
        "settings": settings,
        "tiles": result.tiles,
        "detections": result.detections.len(),
        "counts": counts_report(&result.counts.0),
        "ths": result.ths,
        "heatmap": { "rows": result.heatmap.rows, "cols": result.heatmap.cols },
        "evaluation": evaluation,
    });
    write_report(out, "result.json", &report)?;
    Ok(report)
}

fn cmd_eval(gt: &Path, pred: &Path, iou: f64, tile: u32, overlap: u32) -> CliResult {
    if !(0.0..=1.0).contains(&iou) {
        return Err(usage("--iou must lie in [0, 1]"));
    }
    let gt = load_annotations(gt)?;
    let (_, pred) = load_detections(pred)?;
    let plan = plan_tiles(&gt.slide, tile, tile, overlap)?;
    let mut report = evaluation_summary(&gt, &pred, &plan, iou)?;
    report["version"] = json!(REPORT_VERSION);
    report["gt_cells"] = json!(gt.cells.len());
    report["detections"] = json!(pred.len());
    Ok(report)
}

fn cmd_agree(cfg: &RunConfig, ratings: &Path, reference: &Path, session: u8) -> CliResult {
    let table = load_ratings(ratings, reference)?;
    let report = agreement_report(&table, session)?;
    let confusion = accumulated_confusion(&table, session)?;
    if let Some(out) = &cfg.out {
        std::fs::create_dir_all(out)?;
        confusion.write_csv(std::fs::File::create(out.join("confusion.csv"))?)?;
    }
    Ok(json!({
        "version": REPORT_VERSION,
        "agreement": report,
        "confusion": confusion,
    }))
}

fn cmd_baseline(
    cfg: &RunConfig,
    slide: Option<PathBuf>,
    annotations: Option<PathBuf>,
) -> CliResult {
    let slide = slide.ok_or_else(|| usage("baseline needs --slide"))?;
    let (source, set) = open_inputs(Some(&slide), annotations.as_deref())?;
    let source = source.expect("slide given");
    let set = set.ok_or_else(|| usage("baseline needs --annotations"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
    let r = run_baseline(&source, &set, &cfg.baseline, &mut rng)?;
    Ok(json!({ "version": REPORT_VERSION, "baseline": r }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detector_spec_round_trip() {
        assert_eq!(
            "oracle".parse::<DetectorSpec>().unwrap(),
            DetectorSpec::Oracle
        );
        let d: DetectorSpec = "external:python3 det.py --fast".parse().unwrap();
        assert_eq!(
            d,
            DetectorSpec::External(vec!["python3".into(), "det.py".into(), "--fast".into()])
        );
        assert_eq!(d.to_string().parse::<DetectorSpec>().unwrap(), d);
        assert!("external:".parse::<DetectorSpec>().is_err());
        assert!("magic".parse::<DetectorSpec>().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok: RunConfig =
            serde_json::from_str(r#"{"seed": 3, "pipeline": {"overlap": 64}}"#).unwrap();
        assert_eq!(ok.pipeline.overlap, 64);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn seed_reaches_components() {
        let mut c = RunConfig {
            seed: Some(9),
            ..Default::default()
        };
        c.apply_seed();
        assert_eq!((c.sampler.seed, c.noise.seed, c.synth.seed), (9, 9, 9));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_cli(["eiph", "frobnicate"]), 2);
        assert_eq!(run_cli(["eiph", "score"]), 2);
    }
}
