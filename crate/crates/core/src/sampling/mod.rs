//! Patch sampling: uniform, two-stage (grade cluster, then cell) and the
//! inverse-grade-frequency quad-tree.

mod quadtree;

pub use quadtree::{
    build_quadtree, sample_quadtree, QuadSample, QuadTree, QuadTreeNode, WeightedCell,
};

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnnotationSet, BoundingBox, Grade, SlideMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub patch_w: u32,
    pub patch_h: u32,
    pub seed: u64,
    /// Probability floor for empty quad-tree nodes.
    pub epsilon: f64,
    pub max_depth: u32,
    pub min_cells_per_node: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_w: 1024,
            patch_h: 1024,
            seed: 0,
            epsilon: 0.01,
            max_depth: 3,
            min_cells_per_node: 300,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, meta: &SlideMeta) -> Result<()> {
        if self.patch_w == 0 || self.patch_h == 0 {
            return Err(Error::invalid("patch dimensions must be positive"));
        }
        if self.patch_w as u64 > meta.width || self.patch_h as u64 > meta.height {
            return Err(Error::invalid(format!(
                "patch {}x{} larger than slide {}x{}",
                self.patch_w, self.patch_h, meta.width, meta.height
            )));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::invalid(format!(
                "epsilon {} outside [0, 1)",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn max_origin(&self, meta: &SlideMeta) -> (u64, u64) {
        (
            meta.width - self.patch_w as u64,
            meta.height - self.patch_h as u64,
        )
    }

    pub fn patch_at(&self, origin: (u64, u64)) -> BoundingBox {
        BoundingBox::new(
            origin.0 as f64,
            origin.1 as f64,
            self.patch_w as f64,
            self.patch_h as f64,
        )
    }
}

/// Whether the patch at `origin` contains the center of `cell`.
pub fn patch_hits(cfg: &SamplerConfig, origin: (u64, u64), cell: &BoundingBox) -> bool {
    let (cx, cy) = cell.center();
    cfg.patch_at(origin).contains_point(cx, cy)
}

pub fn sample_uniform<R: Rng + ?Sized>(
    meta: &SlideMeta,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(u64, u64)> {
    cfg.validate(meta)?;
    let (mx, my) = cfg.max_origin(meta);
    Ok((rng.random_range(0..=mx), rng.random_range(0..=my)))
}

/// Chance that a uniformly placed patch covers a fixed point.
pub fn single_cell_hit_probability(meta: &SlideMeta, cfg: &SamplerConfig) -> Result<f64> {
    cfg.validate(meta)?;
    let (mx, my) = cfg.max_origin(meta);
    let positions = (mx + 1) as f64 * (my + 1) as f64;
    let covering = cfg.patch_w as f64 * cfg.patch_h as f64;
    Ok((covering / positions).min(1.0))
}

/// Cell ids grouped by grade, ids in input order. Empty grades are absent.
pub fn build_clusters(set: &AnnotationSet) -> BTreeMap<Grade, Vec<u64>> {
    let mut out: BTreeMap<Grade, Vec<u64>> = BTreeMap::new();
    for c in &set.cells {
        out.entry(c.grade).or_default().push(c.id);
    }
    out
}

/// Integer range of origins along one axis that keep `[lo, lo + len)` inside
/// the patch, or a clamped centered fallback when the cell is larger than the
/// patch.
fn jitter_axis<R: Rng + ?Sized>(
    start: f64,
    len: f64,
    patch: u32,
    max_origin: u64,
    rng: &mut R,
) -> u64 {
    let patch = patch as f64;
    let lo = (start + len - patch).ceil().max(0.0);
    let hi = start.floor().min(max_origin as f64);
    if lo <= hi {
        rng.random_range(lo as u64..=hi as u64)
    } else {
        (start + 0.5 * len - 0.5 * patch)
            .floor()
            .clamp(0.0, max_origin as f64) as u64
    }
}

/// Uniform origin among the patch positions that fully contain `cell` and
/// stay inside the slide.
pub fn jitter_around<R: Rng + ?Sized>(
    cell: &BoundingBox,
    meta: &SlideMeta,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> (u64, u64) {
    let (mx, my) = cfg.max_origin(meta);
    let x = jitter_axis(cell.x, cell.w, cfg.patch_w, mx, rng);
    let y = jitter_axis(cell.y, cell.h, cfg.patch_h, my, rng);
    (x, y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AnchoredSample {
    pub anchor_id: u64,
    pub origin: (u64, u64),
}

/// Two-stage cluster sampler: a grade uniformly among the non-empty ones,
/// then a cell uniformly within that grade, then a jittered patch around it.
#[derive(Clone, Debug)]
pub struct TwoStageSampler {
    clusters: Vec<(Grade, Vec<u64>)>,
    boxes: HashMap<u64, BoundingBox>,
    meta: SlideMeta,
    cfg: SamplerConfig,
}

impl TwoStageSampler {
    pub fn new(set: &AnnotationSet, cfg: &SamplerConfig) -> Result<Self> {
        cfg.validate(&set.slide)?;
        if set.cells.is_empty() {
            return Err(Error::NoCells);
        }
        Ok(TwoStageSampler {
            clusters: build_clusters(set).into_iter().collect(),
            boxes: set.cells.iter().map(|c| (c.id, c.bbox)).collect(),
            meta: set.slide.clone(),
            cfg: cfg.clone(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AnchoredSample {
        let (_, ids) = self.clusters.choose(rng).expect("non-empty clusters");
        let id = *ids.choose(rng).expect("clusters hold at least one cell");
        let origin = jitter_around(&self.boxes[&id], &self.meta, &self.cfg, rng);
        AnchoredSample {
            anchor_id: id,
            origin,
        }
    }
}

pub fn sample_two_stage<R: Rng + ?Sized>(
    set: &AnnotationSet,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<AnchoredSample> {
    Ok(TwoStageSampler::new(set, cfg)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CellAnnotation, Staining};

    pub(crate) fn meta(w: u64, h: u64) -> SlideMeta {
        SlideMeta {
            id: "t".into(),
            width: w,
            height: h,
            staining: Staining::Prussian,
            mpp: 0.25,
        }
    }

    pub(crate) fn cell(id: u64, x: f64, y: f64, g: u8) -> CellAnnotation {
        CellAnnotation {
            id,
            bbox: BoundingBox::new(x, y, 70.0, 70.0),
            grade: Grade::new(g).unwrap(),
        }
    }

    #[test]
    fn uniform_single_position() {
        let cfg = SamplerConfig::default();
        let mut rng = cfg.rng();
        for _ in 0..10 {
            assert_eq!(
                sample_uniform(&meta(1024, 1024), &cfg, &mut rng).unwrap(),
                (0, 0)
            );
        }
        assert!(sample_uniform(&meta(1000, 2000), &cfg, &mut rng).is_err());
    }

    #[test]
    fn hit_probability_closed_form() {
        let cfg = SamplerConfig::default();
        let p = single_cell_hit_probability(&meta(35_999, 34_118), &cfg).unwrap();
        let expected = 1024.0 * 1024.0 / ((35_999.0 - 1023.0) * (34_118.0 - 1023.0));
        assert_eq!(p, expected);
        assert!((p - 0.000906).abs() < 1e-6);
        assert_eq!(
            single_cell_hit_probability(&meta(1024, 1024), &cfg).unwrap(),
            1.0
        );
    }

    #[test]
    fn hit_probability_matches_monte_carlo_at_half_size() {
        let cfg = SamplerConfig {
            patch_w: 64,
            patch_h: 64,
            ..Default::default()
        };
        let m = meta(128, 128);
        // the closed form holds for points at least a patch away from every edge
        let target = BoundingBox::new(63.0, 63.0, 2.0, 2.0);
        let mut rng = cfg.rng();
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| patch_hits(&cfg, sample_uniform(&m, &cfg, &mut rng).unwrap(), &target))
            .count();
        let p = single_cell_hit_probability(&m, &cfg).unwrap();
        assert!((hits as f64 / n as f64 - p).abs() < 0.01, "{hits} vs {p}");
    }

    #[test]
    fn clusters() {
        let set = AnnotationSet::new(
            meta(2048, 2048),
            vec![
                cell(1, 0.0, 0.0, 0),
                cell(2, 100.0, 0.0, 0),
                cell(3, 200.0, 0.0, 4),
            ],
        );
        let c = build_clusters(&set);
        assert_eq!(c.len(), 2);
        assert_eq!(c[&Grade::new(0).unwrap()], vec![1, 2]);
        assert_eq!(c[&Grade::new(4).unwrap()], vec![3]);
        assert!(build_clusters(&AnnotationSet::new(meta(10, 10), vec![])).is_empty());
    }

    #[test]
    fn single_cell_always_anchors_and_is_contained() {
        let cfg = SamplerConfig::default();
        let set = AnnotationSet::new(meta(4096, 4096), vec![cell(7, 2000.0, 1500.0, 2)]);
        let s = TwoStageSampler::new(&set, &cfg).unwrap();
        let mut rng = cfg.rng();
        for _ in 0..1000 {
            let out = s.sample(&mut rng);
            assert_eq!(out.anchor_id, 7);
            assert!(cfg.patch_at(out.origin).contains_box(&set.cells[0].bbox));
        }
    }

    #[test]
    fn corner_cell_is_clamped() {
        let cfg = SamplerConfig::default();
        let m = meta(3000, 3000);
        let set = AnnotationSet::new(m.clone(), vec![cell(1, 2930.0, 0.0, 1)]);
        let s = TwoStageSampler::new(&set, &cfg).unwrap();
        let mut rng = cfg.rng();
        for _ in 0..500 {
            let out = s.sample(&mut rng);
            let p = cfg.patch_at(out.origin);
            assert!(m.bounds().contains_box(&p));
            assert!(p.contains_box(&set.cells[0].bbox));
        }
    }

    #[test]
    fn empty_set_is_an_error() {
        let cfg = SamplerConfig::default();
        let set = AnnotationSet::new(meta(2048, 2048), vec![]);
        assert!(matches!(
            TwoStageSampler::new(&set, &cfg),
            Err(Error::NoCells)
        ));
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = SamplerConfig {
            seed: 99,
            ..Default::default()
        };
        let m = meta(9000, 7000);
        let draw = || {
            let mut rng = cfg.rng();
            (0..50)
                .map(|_| sample_uniform(&m, &cfg, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn anchored_patch_contains_cell(
                x in 0u32..2930, y in 0u32..1930, seed in any::<u64>(), pw in 80u32..1024
            ) {
                let cfg = SamplerConfig { patch_w: pw, patch_h: pw, seed, ..Default::default() };
                let m = meta(3000, 2000);
                let set = AnnotationSet::new(m.clone(), vec![cell(1, x as f64, y as f64, 3)]);
                let mut rng = cfg.rng();
                let out = sample_two_stage(&set, &cfg, &mut rng).unwrap();
                let p = cfg.patch_at(out.origin);
                prop_assert!(m.bounds().contains_box(&p));
                prop_assert!(p.contains_box(&set.cells[0].bbox));
            }
        }
    }
}
