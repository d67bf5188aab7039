use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Patch, SlideSource};
use crate::model::{
    AnnotationSet, BoundingBox, CellAnnotation, Detection, Grade, SlideMeta, NUM_GRADES,
};

/// What a detector is told about the tile it is looking at.
#[derive(Clone, Copy, Debug)]
pub struct TileRequest<'a> {
    pub index: usize,
    /// Global slide coordinates.
    pub tile: BoundingBox,
    pub slide: &'a SlideMeta,
}

/// Finds cells in one tile. Output boxes are tile-local.
pub trait Detector: Send + Sync {
    fn detect(&self, req: &TileRequest<'_>, patch: &Patch) -> Result<Vec<Detection>>;
}

/// Keeps the part of every box that lies inside a `w`×`h` tile and drops
/// boxes that fall entirely outside it.
pub fn clip_to_tile(dets: Vec<Detection>, w: f64, h: f64) -> Vec<Detection> {
    let bounds = BoundingBox::new(0.0, 0.0, w, h);
    dets.into_iter()
        .filter_map(|mut d| {
            d.bbox = d.bbox.intersection(&bounds)?;
            Some(d)
        })
        .collect()
}

/// Reads the tile's pixels and runs `detector` on them.
pub fn detect(
    detector: &dyn Detector,
    slide: &SlideSource,
    index: usize,
    tile: &BoundingBox,
) -> Result<Vec<Detection>> {
    let patch = slide.read_region(tile)?;
    let req = TileRequest {
        index,
        tile: *tile,
        slide: &slide.meta,
    };
    let dets = detector.detect(&req, &patch)?;
    Ok(clip_to_tile(dets, tile.w, tile.h))
}

/// Corruption applied by the oracle detector to the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub miss_rate: f64,
    /// Row = true grade, column = reported grade.
    pub confusion: [[f64; NUM_GRADES]; NUM_GRADES],
    pub jitter_sigma: f64,
    pub fp_per_mm2: f64,
    pub seed: u64,
}

pub const IDENTITY_CONFUSION: [[f64; NUM_GRADES]; NUM_GRADES] = [
    [1.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 1.0],
];

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            miss_rate: 0.0,
            confusion: IDENTITY_CONFUSION,
            jitter_sigma: 0.0,
            fp_per_mm2: 0.0,
            seed: 0,
        }
    }
}

pub fn validate_confusion(m: &[[f64; NUM_GRADES]; NUM_GRADES]) -> Result<()> {
    for (g, row) in m.iter().enumerate() {
        if row.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid(format!(
                "confusion row {g} has a negative entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "confusion row {g} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Draws a column of `row` using the uniform variate `u`.
pub fn pick_from_row(row: &[f64; NUM_GRADES], u: f64) -> Grade {
    let mut acc = 0.0;
    for (g, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return Grade::from_index(g);
        }
    }
    // rounding left u above the final sum; take the last non-zero column
    let last = row.iter().rposition(|p| *p > 0.0).unwrap_or(NUM_GRADES - 1);
    Grade::from_index(last)
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::invalid(format!(
                "miss_rate {} outside [0, 1]",
                self.miss_rate
            )));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::invalid("jitter_sigma must be >= 0"));
        }
        if !(self.fp_per_mm2 >= 0.0 && self.fp_per_mm2.is_finite()) {
            return Err(Error::invalid("fp_per_mm2 must be >= 0"));
        }
        validate_confusion(&self.confusion)
    }

    /// Independent stream for one tile, so results do not depend on the
    /// order in which tiles are processed.
    pub fn tile_rng(&self, tile_index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(tile_index as u64);
        rng
    }
}

/// Bucket grid over cell boxes for tile queries.
#[derive(Clone, Debug)]
struct CellIndex {
    bucket: f64,
    cols: usize,
    buckets: Vec<Vec<u32>>,
}

impl CellIndex {
    const BUCKET: f64 = 512.0;

    fn new(meta: &SlideMeta, cells: &[CellAnnotation]) -> Self {
        let cols = (meta.width as f64 / Self::BUCKET).ceil().max(1.0) as usize;
        let rows = (meta.height as f64 / Self::BUCKET).ceil().max(1.0) as usize;
        let mut buckets = vec![Vec::new(); cols * rows];
        let mut idx = CellIndex {
            bucket: Self::BUCKET,
            cols,
            buckets: Vec::new(),
        };
        for (i, c) in cells.iter().enumerate() {
            let (c0, c1, r0, r1) = idx.span(&c.bbox, rows);
            for r in r0..=r1 {
                for col in c0..=c1 {
                    buckets[r * cols + col].push(i as u32);
                }
            }
        }
        idx.buckets = buckets;
        idx
    }

    fn span(&self, b: &BoundingBox, rows: usize) -> (usize, usize, usize, usize) {
        let cell = |v: f64, n: usize| ((v / self.bucket).floor().max(0.0) as usize).min(n - 1);
        (
            cell(b.x, self.cols),
            cell(b.right() - 1e-9, self.cols),
            cell(b.y, rows),
            cell(b.bottom() - 1e-9, rows),
        )
    }

    fn query(&self, b: &BoundingBox) -> Vec<u32> {
        let rows = self.buckets.len() / self.cols;
        let (c0, c1, r0, r1) = self.span(b, rows);
        let mut out = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                out.extend_from_slice(&self.buckets[r * self.cols + c]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Detector backed by ground-truth annotations and a [`NoiseModel`].
#[derive(Clone, Debug)]
pub struct OracleDetector {
    set: AnnotationSet,
    noise: NoiseModel,
    index: CellIndex,
    fp_size: (f64, f64),
}

/// False-positive box size when the slide has no annotated cells.
const DEFAULT_FP_SIZE: (f64, f64) = (70.0, 70.0);

impl OracleDetector {
    pub fn new(set: AnnotationSet, noise: NoiseModel) -> Result<Self> {
        noise.validate()?;
        let mut set = set;
        set.cells.sort_by_key(|c| c.id);
        let index = CellIndex::new(&set.slide, &set.cells);
        let fp_size = set.median_cell_size().unwrap_or(DEFAULT_FP_SIZE);
        Ok(OracleDetector {
            set,
            noise,
            index,
            fp_size,
        })
    }

    pub fn annotations(&self) -> &AnnotationSet {
        &self.set
    }

    /// Cells whose box intersects `tile`, in id order.
    pub fn cells_in(&self, tile: &BoundingBox) -> Vec<&CellAnnotation> {
        self.index
            .query(tile)
            .into_iter()
            .map(|i| &self.set.cells[i as usize])
            .filter(|c| c.bbox.intersection(tile).is_some())
            .collect()
    }

    /// Tile-local detections for the tile at `tile` (global coordinates).
    pub fn detect_tile<R: Rng + ?Sized>(&self, tile: &BoundingBox, rng: &mut R) -> Vec<Detection> {
        let noise = &self.noise;
        let jitter = Normal::new(0.0, noise.jitter_sigma).expect("sigma validated");
        let local = BoundingBox::new(0.0, 0.0, tile.w, tile.h);
        let mut out = Vec::new();
        for cell in self.cells_in(tile) {
            // every cell consumes the same variates whatever the noise
            // settings, so nearby settings share their randomness
            let u_miss: f64 = rng.random();
            let u_grade: f64 = rng.random();
            let d: [f64; 4] = std::array::from_fn(|_| jitter.sample(rng));
            let u_conf: f64 = rng.random();
            if u_miss < noise.miss_rate {
                continue;
            }
            let grade = pick_from_row(&noise.confusion[cell.grade.index()], u_grade);
            let b = cell.bbox;
            let jittered = BoundingBox::new(
                (b.x + d[0]).round(),
                (b.y + d[1]).round(),
                (b.w + d[2]).round().max(1.0),
                (b.h + d[3]).round().max(1.0),
            );
            let Some(clipped) = jittered.translate(-tile.x, -tile.y).intersection(&local) else {
                continue;
            };
            out.push(noisy_detection(clipped, grade, 0.5 + 0.5 * u_conf));
        }

        let lambda = noise.fp_per_mm2 * self.set.slide.area_mm2(tile.w, tile.h);
        if lambda > 0.0 {
            let n = Poisson::new(lambda).expect("positive rate").sample(rng) as u64;
            let (fw, fh) = (self.fp_size.0.min(tile.w), self.fp_size.1.min(tile.h));
            for _ in 0..n {
                let x = (rng.random::<f64>() * (tile.w - fw)).floor();
                let y = (rng.random::<f64>() * (tile.h - fh)).floor();
                let grade = Grade::from_index(rng.random_range(0..NUM_GRADES));
                let conf = 0.5 + 0.5 * rng.random::<f64>();
                out.push(noisy_detection(BoundingBox::new(x, y, fw, fh), grade, conf));
            }
        }
        out
    }
}

/// Puts `confidence` on `grade` and spreads half the remainder over the
/// other grades; the rest is background.
fn noisy_detection(bbox: BoundingBox, grade: Grade, confidence: f64) -> Detection {
    let rest = (1.0 - confidence) / 8.0;
    let mut probs = [rest; NUM_GRADES];
    probs[grade.index()] = confidence;
    Detection::new(bbox, probs, confidence, grade.into()).expect("valid by construction")
}

/// Free-function form used by tests and the CLI.
pub fn oracle_detect<R: Rng + ?Sized>(
    set: &AnnotationSet,
    tile: &BoundingBox,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<Vec<Detection>> {
    Ok(OracleDetector::new(set.clone(), noise.clone())?.detect_tile(tile, rng))
}

impl Detector for OracleDetector {
    fn detect(&self, req: &TileRequest<'_>, _patch: &Patch) -> Result<Vec<Detection>> {
        let mut rng = self.noise.tile_rng(req.index);
        Ok(self.detect_tile(&req.tile, &mut rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Staining;

    fn set(cells: Vec<(u64, f64, f64, u8)>) -> AnnotationSet {
        AnnotationSet::new(
            SlideMeta {
                id: "o".into(),
                width: 4096,
                height: 4096,
                staining: Staining::Prussian,
                mpp: 0.25,
            },
            cells
                .into_iter()
                .map(|(id, x, y, g)| CellAnnotation {
                    id,
                    bbox: BoundingBox::new(x, y, 70.0, 70.0),
                    grade: Grade::new(g).unwrap(),
                })
                .collect(),
        )
    }

    fn tile() -> BoundingBox {
        BoundingBox::new(1024.0, 1024.0, 1024.0, 1024.0)
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = set(vec![
            (1, 1100.0, 1100.0, 0),
            (2, 1500.0, 1800.0, 3),
            (3, 1990.0, 1200.0, 4),
            (4, 100.0, 100.0, 2),
        ]);
        let mut rng = NoiseModel::default().tile_rng(0);
        let out = oracle_detect(&s, &tile(), &NoiseModel::default(), &mut rng).unwrap();
        let boxes: Vec<(BoundingBox, u8)> = out.iter().map(|d| (d.bbox, d.grade.value())).collect();
        assert_eq!(
            boxes,
            vec![
                (BoundingBox::new(76.0, 76.0, 70.0, 70.0), 0),
                (BoundingBox::new(476.0, 776.0, 70.0, 70.0), 3),
                // clipped at the tile's right edge
                (BoundingBox::new(966.0, 176.0, 58.0, 70.0), 4),
            ]
        );
        for d in &out {
            assert!((0.5..=1.0).contains(&d.confidence));
            assert_eq!(d.grade, crate::model::argmax_grade(&d.class_probs));
        }
    }

    #[test]
    fn full_miss_is_empty() {
        let s = set(vec![(1, 1100.0, 1100.0, 0)]);
        let noise = NoiseModel {
            miss_rate: 1.0,
            ..Default::default()
        };
        let mut rng = noise.tile_rng(0);
        assert!(oracle_detect(&s, &tile(), &noise, &mut rng)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn survival_rate() {
        let cells = (0..100)
            .map(|i| {
                (
                    i,
                    1030.0 + (i % 10) as f64 * 90.0,
                    1030.0 + (i / 10) as f64 * 90.0,
                    1,
                )
            })
            .collect();
        let noise = NoiseModel {
            miss_rate: 0.5,
            ..Default::default()
        };
        let det = OracleDetector::new(set(cells), noise.clone()).unwrap();
        let mut rng = noise.tile_rng(0);
        let trials = 100;
        let kept: usize = (0..trials)
            .map(|_| det.detect_tile(&tile(), &mut rng).len())
            .sum();
        let rate = kept as f64 / (trials * 100) as f64;
        assert!((rate - 0.5).abs() < 0.01, "{rate}");
    }

    #[test]
    fn false_positive_rate() {
        let noise = NoiseModel {
            fp_per_mm2: 10.0,
            ..Default::default()
        };
        let det = OracleDetector::new(set(vec![]), noise.clone()).unwrap();
        let t = BoundingBox::new(0.0, 0.0, 1024.0, 1024.0);
        let expected: f64 = 10.0 * 1024.0 * 1024.0 * 0.0625e-6;
        assert!((expected - 0.655).abs() < 1e-3);
        let mut rng = noise.tile_rng(3);
        let n = 10_000;
        let total: usize = (0..n).map(|_| det.detect_tile(&t, &mut rng).len()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - expected).abs() < 0.03, "{mean}");
    }

    #[test]
    fn confusion_must_be_stochastic() {
        let mut noise = NoiseModel::default();
        noise.confusion[2][2] = 0.9;
        assert!(noise.validate().is_err());
        assert_eq!(
            pick_from_row(&[0.0, 0.5, 0.5, 0.0, 0.0], 0.9999999999999999),
            Grade::from_index(2)
        );
    }

    #[test]
    fn clip_drops_outside() {
        let inside = Detection::certain(
            BoundingBox::new(10.0, 10.0, 5.0, 5.0),
            Grade::from_index(0),
            1.0,
        );
        let outside = Detection::certain(
            BoundingBox::new(200.0, 10.0, 5.0, 5.0),
            Grade::from_index(0),
            1.0,
        );
        let partial = Detection::certain(
            BoundingBox::new(95.0, 10.0, 10.0, 5.0),
            Grade::from_index(0),
            1.0,
        );
        let out = clip_to_tile(vec![inside.clone(), outside, partial], 100.0, 100.0);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].bbox, BoundingBox::new(95.0, 10.0, 5.0, 5.0));
    }
}
