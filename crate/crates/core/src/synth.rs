//! Synthetic slides: graded cells drawn as colored discs on a white
//! background, stored in the regular tiled format with their annotations.
//!
//! Grade colors (RGB), bluer and more saturated with increasing grade:
//!
//! | grade | color           |
//! |-------|-----------------|
//! | 0     | (200, 200, 215) |
//! | 1     | (160, 170, 215) |
//! | 2     | (120, 135, 210) |
//! | 3     | (80, 95, 200)   |
//! | 4     | (40, 50, 180)   |

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{adjacent_spillover_confusion, relabel};
use crate::io::{
    ppm, save_annotations, write_manifest, Manifest, Rating, RatingTable, SlideSource, TileFormat,
};
use crate::io::{DEFAULT_TILE_PATTERN, MANIFEST_MAGIC};
use crate::model::{
    AnnotationSet, BoundingBox, CellAnnotation, Grade, SlideMeta, Staining, NUM_GRADES,
    REFERENCE_MPP,
};
use crate::scoring::{grade_counts, ths};
use crate::REPORT_VERSION;

pub const GRADE_COLORS: [[u8; 3]; NUM_GRADES] = [
    [200, 200, 215],
    [160, 170, 215],
    [120, 135, 210],
    [80, 95, 200],
    [40, 50, 180],
];

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Cells per cluster in clustered mode.
const CLUSTER_SIZE: usize = 100;
/// Noise on the normalized x position when sorting grades left to right.
const GRADIENT_NOISE: f64 = 0.15;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    #[default]
    Uniform,
    /// Grades increase from left to right on average.
    GradientX,
    Clustered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: u64,
    pub height: u64,
    pub cell_count: usize,
    pub grade_mix: [f64; NUM_GRADES],
    /// Exact per-grade counts; must sum to `cell_count` and wins over
    /// `grade_mix`.
    pub exact_counts: Option<[u64; NUM_GRADES]>,
    pub spatial_mode: SpatialMode,
    pub cell_radius_px: u32,
    /// Keeps cell boxes at least this far from the slide border.
    pub margin_px: u32,
    pub tile_size: u32,
    pub staining: Staining,
    pub mpp: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 4096,
            height: 4096,
            cell_count: 200,
            grade_mix: [1.0; NUM_GRADES],
            exact_counts: None,
            spatial_mode: SpatialMode::Uniform,
            cell_radius_px: 35,
            margin_px: 0,
            tile_size: 1024,
            staining: Staining::Prussian,
            mpp: REFERENCE_MPP,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grade_mix.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(
                "grade_mix weights must be finite and non-negative",
            ));
        }
        if self.grade_mix.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("grade_mix must not be all zero"));
        }
        if let Some(c) = self.exact_counts {
            if c.iter().sum::<u64>() != self.cell_count as u64 {
                return Err(Error::invalid(format!(
                    "exact_counts sum to {} but cell_count is {}",
                    c.iter().sum::<u64>(),
                    self.cell_count
                )));
            }
        }
        if self.cell_radius_px == 0 || self.tile_size == 0 {
            return Err(Error::invalid(
                "cell_radius_px and tile_size must be positive",
            ));
        }
        let need = 2 * (self.cell_radius_px as u64 + self.margin_px as u64);
        if self.width < need || self.height < need {
            return Err(Error::invalid(format!(
                "a {}x{} slide cannot hold a cell of radius {} with margin {}",
                self.width, self.height, self.cell_radius_px, self.margin_px
            )));
        }
        if !(self.mpp > 0.0) {
            return Err(Error::invalid("mpp must be positive"));
        }
        Ok(())
    }

    /// Per-grade counts: `exact_counts`, or `grade_mix` apportioned to
    /// `cell_count` by largest remainder (ties to the lower grade).
    pub fn counts(&self) -> [u64; NUM_GRADES] {
        if let Some(c) = self.exact_counts {
            return c;
        }
        apportion(&self.grade_mix, self.cell_count as u64)
    }
}

pub fn apportion(weights: &[f64; NUM_GRADES], total: u64) -> [u64; NUM_GRADES] {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts = [0u64; NUM_GRADES];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as u64;
    }
    let mut order: Vec<usize> = (0..NUM_GRADES).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total - counts.iter().sum::<u64>();
    for g in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        if weights[g] > 0.0 {
            counts[g] += 1;
            left -= 1;
        }
    }
    counts
}

/// Bucket grid over cell centers for the overlap test.
struct Occupancy {
    cell: i64,
    buckets: HashMap<(i64, i64), Vec<(i64, i64)>>,
}

impl Occupancy {
    fn new(side: i64) -> Self {
        Occupancy {
            cell: side,
            buckets: HashMap::new(),
        }
    }

    fn key(&self, x: i64, y: i64) -> (i64, i64) {
        (x.div_euclid(self.cell), y.div_euclid(self.cell))
    }

    /// True if a box of side `cell` centered at (x, y) overlaps none of the
    /// stored boxes.
    fn is_free(&self, x: i64, y: i64) -> bool {
        let (bx, by) = self.key(x, y);
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(v) = self.buckets.get(&(bx + dx, by + dy)) {
                    if v.iter()
                        .any(|&(ox, oy)| (ox - x).abs() < self.cell && (oy - y).abs() < self.cell)
                    {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn insert(&mut self, x: i64, y: i64) {
        let k = self.key(x, y);
        self.buckets.entry(k).or_default().push((x, y));
    }
}

/// Non-overlapping cell centers by rejection sampling.
fn place_centers(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(i64, i64)>> {
    let r = cfg.cell_radius_px as i64;
    let m = cfg.margin_px as i64;
    let (lo_x, hi_x) = (r + m, cfg.width as i64 - r - m);
    let (lo_y, hi_y) = (r + m, cfg.height as i64 - r - m);
    let mut occ = Occupancy::new(2 * r);
    let mut centers = Vec::with_capacity(cfg.cell_count);

    let clusters: Vec<(f64, f64)> = if cfg.spatial_mode == SpatialMode::Clustered {
        let k = cfg.cell_count.div_ceil(CLUSTER_SIZE).max(1);
        (0..k)
            .map(|_| {
                (
                    rng.random_range(lo_x as f64..=hi_x as f64),
                    rng.random_range(lo_y as f64..=hi_y as f64),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let spread = Normal::new(0.0, 12.0 * r as f64).expect("positive spread");

    for i in 0..cfg.cell_count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let (x, y) = if clusters.is_empty() {
                (rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y))
            } else {
                let &(cx, cy) = clusters.choose(rng).expect("at least one cluster");
                (
                    (cx + spread.sample(rng)).round() as i64,
                    (cy + spread.sample(rng)).round() as i64,
                )
            };
            if x < lo_x || x > hi_x || y < lo_y || y > hi_y || !occ.is_free(x, y) {
                continue;
            }
            occ.insert(x, y);
            centers.push((x, y));
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::invalid(format!(
                "could not place cell {} of {} after {MAX_PLACEMENT_ATTEMPTS} attempts; configuration too dense",
                i + 1,
                cfg.cell_count
            )));
        }
    }
    Ok(centers)
}

fn assign_grades(cfg: &SynthConfig, centers: &[(i64, i64)], rng: &mut ChaCha8Rng) -> Vec<Grade> {
    let counts = cfg.counts();
    let mut grades: Vec<Grade> = Grade::ALL
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g, counts[g.index()] as usize))
        .collect();
    match cfg.spatial_mode {
        SpatialMode::GradientX => {
            // grades are already ascending; hand them out by noisy x rank
            let noise = Normal::new(0.0, GRADIENT_NOISE).expect("positive noise");
            let keys: Vec<f64> = centers
                .iter()
                .map(|&(x, _)| x as f64 / cfg.width as f64 + noise.sample(rng))
                .collect();
            let mut order: Vec<usize> = (0..centers.len()).collect();
            order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
            let mut out = vec![Grade::from_index(0); centers.len()];
            for (rank, &i) in order.iter().enumerate() {
                out[i] = grades[rank];
            }
            out
        }
        _ => {
            grades.shuffle(rng);
            grades
        }
    }
}

/// Draws the cells (ids from 1) without writing anything.
pub fn generate_cells(cfg: &SynthConfig, slide: SlideMeta) -> Result<AnnotationSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = place_centers(cfg, &mut rng)?;
    let grades = assign_grades(cfg, &centers, &mut rng);
    let r = cfg.cell_radius_px as f64;
    let cells = centers
        .iter()
        .zip(grades)
        .enumerate()
        .map(|(i, (&(x, y), grade))| CellAnnotation {
            id: i as u64 + 1,
            bbox: BoundingBox::new(x as f64 - r, y as f64 - r, 2.0 * r, 2.0 * r),
            grade,
        })
        .collect();
    Ok(AnnotationSet::new(slide, cells))
}

/// Renders one tile; `None` when no disc touches it.
fn render_tile(bounds: &BoundingBox, cells: &[&CellAnnotation], radius: f64) -> Option<Vec<u8>> {
    let (w, h) = (bounds.w as usize, bounds.h as usize);
    let mut pixels: Option<Vec<u8>> = None;
    for c in cells {
        let Some(clip) = c.bbox.intersection(bounds) else {
            continue;
        };
        let buf = pixels.get_or_insert_with(|| vec![255u8; w * h * 3]);
        let (cx, cy) = c.bbox.center();
        let color = GRADE_COLORS[c.grade.index()];
        for py in clip.y as i64..clip.bottom() as i64 {
            let dy = py as f64 + 0.5 - cy;
            for px in clip.x as i64..clip.right() as i64 {
                let dx = px as f64 + 0.5 - cx;
                if dx * dx + dy * dy <= radius * radius {
                    let off =
                        ((py - bounds.y as i64) as usize * w + (px - bounds.x as i64) as usize) * 3;
                    buf[off..off + 3].copy_from_slice(&color);
                }
            }
        }
    }
    pixels
}

/// Writes the tiled slide (tiles holding no cell are left out) and
/// `annotations.jsonl` into `out_dir`. The slide id is the directory name.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<(SlideSource, AnnotationSet)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let id = out_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "slide".to_string());
    let meta = SlideMeta {
        id,
        width: cfg.width,
        height: cfg.height,
        staining: cfg.staining,
        mpp: cfg.mpp,
    };
    let set = generate_cells(cfg, meta)?;

    let ts = cfg.tile_size as u64;
    let mut by_tile: BTreeMap<(u64, u64), Vec<&CellAnnotation>> = BTreeMap::new();
    for c in &set.cells {
        let c0 = c.bbox.x as u64 / ts;
        let c1 = (c.bbox.right() as u64 - 1) / ts;
        let r0 = c.bbox.y as u64 / ts;
        let r1 = (c.bbox.bottom() as u64 - 1) / ts;
        for row in r0..=r1 {
            for col in c0..=c1 {
                by_tile.entry((col, row)).or_default().push(c);
            }
        }
    }

    let manifest = Manifest {
        magic: MANIFEST_MAGIC.into(),
        width: cfg.width,
        height: cfg.height,
        tile_size: cfg.tile_size,
        mpp: cfg.mpp,
        staining: cfg.staining,
        format: TileFormat::Ppm,
        tile_pattern: DEFAULT_TILE_PATTERN.into(),
    };
    let tiles_dir = out_dir.join("tiles");
    if tiles_dir.exists() {
        std::fs::remove_dir_all(&tiles_dir)?;
    }
    std::fs::create_dir_all(&tiles_dir)?;
    let r = cfg.cell_radius_px as f64;
    for (&(col, row), cells) in &by_tile {
        let x = col * ts;
        let y = row * ts;
        let bounds = BoundingBox::new(
            x as f64,
            y as f64,
            ts.min(cfg.width - x) as f64,
            ts.min(cfg.height - y) as f64,
        );
        if let Some(pixels) = render_tile(&bounds, cells, r) {
            let path = out_dir.join(manifest.tile_path(col, row));
            ppm::write_file(&path, bounds.w as u32, bounds.h as u32, &pixels)?;
        }
    }
    let manifest_path = write_manifest(out_dir, &manifest)?;
    save_annotations(&set, &out_dir.join("annotations.jsonl"))?;
    let slide = SlideSource::open(&manifest_path)?;
    Ok((slide, set))
}

pub const FIXTURES: [&str; 3] = ["mini", "gradient", "sparse-rare"];

/// Configuration of a named fixture.
pub fn fixture_config(name: &str) -> Result<SynthConfig> {
    let cfg = match name {
        "mini" => SynthConfig {
            width: 4096,
            height: 4096,
            cell_count: 200,
            seed: 1,
            ..Default::default()
        },
        "gradient" => SynthConfig {
            width: 8192,
            height: 8192,
            cell_count: 2000,
            spatial_mode: SpatialMode::GradientX,
            seed: 2,
            ..Default::default()
        },
        // one grade-4 cell among 1000 grade-0 cells on a slide of the size
        // used for the rare-cell estimate
        "sparse-rare" => SynthConfig {
            width: 35_999,
            height: 34_118,
            cell_count: 1001,
            exact_counts: Some([1000, 0, 0, 0, 1]),
            spatial_mode: SpatialMode::Clustered,
            margin_px: 1024,
            tile_size: 512,
            seed: 3,
            ..Default::default()
        },
        other => {
            return Err(Error::invalid(format!(
                "unknown fixture {other:?}; known: {}",
                FIXTURES.join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Generates fixture `name` into `out_dir` and writes `expected.json` with
/// its grade counts and score.
pub fn golden_fixture(name: &str, out_dir: &Path) -> Result<(SlideSource, AnnotationSet)> {
    let cfg = fixture_config(name)?;
    let (slide, set) = generate(&cfg, out_dir)?;
    let counts = grade_counts(&set.cells);
    let expected = serde_json::json!({
        "version": REPORT_VERSION,
        "fixture": name,
        "cells": set.cells.len(),
        "counts": counts.0,
        "ths": ths(&counts).ok(),
    });
    let mut text = serde_json::to_string_pretty(&expected)?;
    text.push('\n');
    std::fs::write(out_dir.join("expected.json"), text)?;
    Ok((slide, set))
}

/// Synthetic single-cell rating study: a reference set with `per_grade`
/// cells of every grade (shuffled ids) and `raters` raters per session who
/// keep the reference grade with probability `diagonal` and otherwise pick
/// an adjacent grade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatingStudyConfig {
    pub per_grade: usize,
    pub raters: usize,
    pub sessions: u8,
    pub diagonal: f64,
    pub seed: u64,
}

impl Default for RatingStudyConfig {
    fn default() -> Self {
        RatingStudyConfig {
            per_grade: 200,
            raters: 5,
            sessions: 2,
            diagonal: 0.73,
            seed: 0,
        }
    }
}

pub fn balanced_rating_study(cfg: &RatingStudyConfig) -> Result<RatingTable> {
    let conf = adjacent_spillover_confusion(cfg.diagonal)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grades: Vec<Grade> = Grade::ALL
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g, cfg.per_grade))
        .collect();
    grades.shuffle(&mut rng);
    let width = grades.len().to_string().len().max(4);
    let reference: BTreeMap<String, Grade> = grades
        .iter()
        .enumerate()
        .map(|(i, &g)| (format!("c{:0width$}", i + 1), g))
        .collect();
    let mut records = Vec::with_capacity(reference.len() * cfg.raters * cfg.sessions as usize);
    for session in 0..cfg.sessions {
        for r in 0..cfg.raters {
            let rater_id = format!("r{}", r + 1);
            for (cell_id, &truth) in &reference {
                let (u, w): (f64, f64) = (rng.random(), rng.random());
                records.push(Rating {
                    cell_id: cell_id.clone(),
                    rater_id: rater_id.clone(),
                    session,
                    grade: relabel(&conf[truth.index()], truth, u, w),
                });
            }
        }
    }
    RatingTable::new(records, reference)
}
