use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{match_detections, mean_average_precision};
use crate::error::{Error, Result};
use crate::model::{AnnotationSet, Detection, Grade, NUM_GRADES};
use crate::pipeline::validate_confusion;

pub type Confusion = [[f64; NUM_GRADES]; NUM_GRADES];

/// Keeps the grade with probability `diagonal`, otherwise moves to an
/// adjacent grade (split evenly between two neighbours, all of it to the
/// single neighbour of grades 0 and 4).
pub fn adjacent_spillover_confusion(diagonal: f64) -> Result<Confusion> {
    if !(0.0..=1.0).contains(&diagonal) {
        return Err(Error::invalid(format!(
            "diagonal mass {diagonal} outside [0, 1]"
        )));
    }
    let off = 1.0 - diagonal;
    let mut m = [[0.0; NUM_GRADES]; NUM_GRADES];
    for (g, row) in m.iter_mut().enumerate() {
        row[g] = diagonal;
        match g {
            0 => row[1] = off,
            4 => row[3] = off,
            _ => {
                row[g - 1] = off / 2.0;
                row[g + 1] = off / 2.0;
            }
        }
    }
    Ok(m)
}

/// Draws a reported grade for a cell of grade `truth`. `u` decides whether
/// the grade is kept; `w` picks among the other grades in proportion to
/// their row mass. Keeping the two decisions apart means a larger diagonal
/// only ever turns wrong labels into right ones for the same variates.
pub fn relabel(row: &[f64; NUM_GRADES], truth: Grade, u: f64, w: f64) -> Grade {
    let stay = row[truth.index()];
    if u < stay {
        return truth;
    }
    let off = 1.0 - stay;
    if off <= 0.0 {
        return truth;
    }
    let mut acc = 0.0;
    let mut last = truth;
    for (g, p) in row.iter().enumerate() {
        if g == truth.index() || *p <= 0.0 {
            continue;
        }
        acc += p / off;
        last = Grade::from_index(g);
        if w < acc {
            return last;
        }
    }
    last
}

/// Mean mAP@0.5 of pseudo-detections that reproduce every ground-truth box
/// exactly (confidence 1, in gt id order) with grades redrawn from `conf`.
///
/// Trial seeds are drawn from `rng` up front, so calling this with equally
/// seeded generators for different matrices uses common random numbers.
pub fn simulated_map_from_confusion<R: Rng + ?Sized>(
    gt: &AnnotationSet,
    conf: &Confusion,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    validate_confusion(conf)?;
    if trials == 0 {
        return Err(Error::invalid("at least one trial is needed"));
    }
    if gt.cells.is_empty() {
        return Err(Error::NoCells);
    }
    let mut cells: Vec<_> = gt.cells.iter().collect();
    cells.sort_by_key(|c| c.id);
    let seeds: Vec<u64> = (0..trials).map(|_| rng.random()).collect();
    let maps: Vec<Result<f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let dets: Vec<Detection> = cells
                .iter()
                .map(|c| {
                    let (u, w): (f64, f64) = (r.random(), r.random());
                    let g = relabel(&conf[c.grade.index()], c.grade, u, w);
                    Detection::certain(c.bbox, g, 1.0)
                })
                .collect();
            mean_average_precision(&match_detections(gt, &dets, 0.5)?)
        })
        .collect();
    let mut sum = 0.0;
    for m in maps {
        sum += m?;
    }
    Ok(sum / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, CellAnnotation, SlideMeta, Staining};
    use crate::pipeline::IDENTITY_CONFUSION;

    fn balanced(per_grade: usize) -> AnnotationSet {
        let n = per_grade * NUM_GRADES;
        let cells = (0..n)
            .map(|i| CellAnnotation {
                id: i as u64,
                bbox: BoundingBox::new(
                    (i % 40) as f64 * 100.0,
                    (i / 40) as f64 * 100.0,
                    50.0,
                    50.0,
                ),
                // id order interleaves the classes
                grade: Grade::from_index(i % NUM_GRADES),
            })
            .collect();
        AnnotationSet::new(
            SlideMeta {
                id: "b".into(),
                width: 4000,
                height: 4000,
                staining: Staining::Prussian,
                mpp: 0.25,
            },
            cells,
        )
    }

    #[test]
    fn spillover_rows() {
        let m = adjacent_spillover_confusion(0.73).unwrap();
        validate_confusion(&m).unwrap();
        assert!((m[0][1] - 0.27).abs() < 1e-12);
        assert!((m[2][1] - 0.135).abs() < 1e-12);
        assert!(adjacent_spillover_confusion(1.2).is_err());
    }

    #[test]
    fn relabel_distribution() {
        let row = [0.1, 0.2, 0.4, 0.3, 0.0];
        let truth = Grade::from_index(2);
        let n = 200_000;
        let mut counts = [0usize; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..n {
            counts[relabel(&row, truth, rng.random(), rng.random()).index()] += 1;
        }
        for g in 0..5 {
            assert!(
                (counts[g] as f64 / n as f64 - row[g]).abs() < 0.005,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn identity_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m =
            simulated_map_from_confusion(&balanced(20), &IDENTITY_CONFUSION, 3, &mut rng).unwrap();
        assert_eq!(m, 1.0);
    }

    #[test]
    fn uniform_confusion_is_poor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = simulated_map_from_confusion(&balanced(40), &[[0.2; 5]; 5], 20, &mut rng).unwrap();
        assert!(m < 0.3, "{m}");
    }

    #[test]
    fn monotone_in_diagonal() {
        let gt = balanced(30);
        let mut prev = 0.0;
        for k in 0..=10 {
            let d = 0.5 + 0.05 * k as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let m = simulated_map_from_confusion(
                &gt,
                &adjacent_spillover_confusion(d).unwrap(),
                10,
                &mut rng,
            )
            .unwrap();
            assert!(m >= prev, "{d}: {m} < {prev}");
            prev = m;
        }
    }
}
