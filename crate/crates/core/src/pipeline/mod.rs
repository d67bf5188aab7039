//! Whole-slide engine: plan overlapping tiles, detect per tile on a bounded
//! worker pool, merge into slide coordinates, score, and build a heatmap.

mod detector;
pub mod external;
mod heatmap;
mod merge;
mod plan;

pub use detector::{
    clip_to_tile, detect, oracle_detect, pick_from_row, validate_confusion, Detector, NoiseModel,
    OracleDetector, TileRequest, IDENTITY_CONFUSION,
};
pub use external::{ExternalDetector, ProcessTransport, Transport};
pub use heatmap::{render_heatmap, Heatmap, BLOCK_PX};
pub use merge::merge_tiles;
pub use plan::{plan_tiles, TilePlan};

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::SlideSource;
use crate::model::{Detection, GradeCounts};
use crate::scoring::{grade_counts, ths, ThsResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tile_w: u32,
    pub tile_h: u32,
    pub overlap: u32,
    pub nms_iou: f64,
    /// Detection threads. Results do not depend on this.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tile_w: 1024,
            tile_h: 1024,
            overlap: 128,
            nms_iou: 0.5,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlideResult {
    /// Slide coordinates, in rank order (confidence, then position).
    pub detections: Vec<Detection>,
    pub counts: GradeCounts,
    /// `None` when nothing was detected.
    pub ths: Option<ThsResult>,
    pub heatmap: Heatmap,
    pub tiles: usize,
}

impl SlideResult {
    pub fn from_detections(plan: &TilePlan, detections: Vec<Detection>) -> Self {
        let counts = grade_counts(&detections);
        SlideResult {
            ths: ths(&counts).ok(),
            heatmap: Heatmap::from_detections(plan, &detections),
            counts,
            detections,
            tiles: plan.len(),
        }
    }

    /// The slide score, or the reason there is none.
    pub fn ths_result(&self) -> Result<ThsResult> {
        ths(&self.counts)
    }
}

/// Runs `detector` over every tile of `slide` and merges the results.
///
/// The first failing tile aborts the run; the error reports how many tiles
/// had completed. Every tile is read through the slide's pixel accounting,
/// so at most `workers` tile buffers are alive at any time.
pub fn run_pipeline(
    slide: &SlideSource,
    detector: &dyn Detector,
    cfg: &PipelineConfig,
) -> Result<SlideResult> {
    if cfg.workers == 0 {
        return Err(Error::invalid("workers must be at least 1"));
    }
    if !(0.0..=1.0).contains(&cfg.nms_iou) {
        return Err(Error::invalid("nms_iou outside [0, 1]"));
    }
    let plan = plan_tiles(&slide.meta, cfg.tile_w, cfg.tile_h, cfg.overlap)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;

    let failed = AtomicBool::new(false);
    let completed = AtomicUsize::new(0);
    let results: Vec<Option<Result<Vec<Detection>>>> = pool.install(|| {
        plan.tiles
            .par_iter()
            .enumerate()
            .map(|(i, tile)| {
                if failed.load(Ordering::Relaxed) {
                    return None;
                }
                let r = detect(detector, slide, i, tile);
                match r {
                    Ok(_) => {
                        completed.fetch_add(1, Ordering::Relaxed);
                    }
                    Err(_) => failed.store(true, Ordering::Relaxed),
                }
                Some(r)
            })
            .collect()
    });

    let total = plan.len();
    let mut per_tile = Vec::with_capacity(total);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Some(Ok(dets)) => per_tile.push((i, dets)),
            Some(Err(e)) => {
                return Err(Error::Detector {
                    tile: i,
                    completed: completed.load(Ordering::Relaxed),
                    total,
                    message: e.to_string(),
                })
            }
            None => {}
        }
    }
    let merged = merge_tiles(&plan, &per_tile, cfg.nms_iou);
    Ok(SlideResult::from_detections(&plan, merged))
}
