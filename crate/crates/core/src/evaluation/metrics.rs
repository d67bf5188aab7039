use serde::{Deserialize, Serialize};

use crate::detection::iou;
use crate::error::{Error, Result};
use crate::model::{AnnotationSet, Detection, Grade, NUM_GRADES};
use crate::pipeline::TilePlan;
use crate::scoring::score_of;

/// Ranked predictions of one grade.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ClassMatches {
    /// `(confidence, is_true_positive)` in rank order.
    pub ranked: Vec<(f64, bool)>,
    pub gt_count: usize,
}

impl ClassMatches {
    pub fn true_positives(&self) -> usize {
        self.ranked.iter().filter(|(_, tp)| *tp).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchReport {
    pub classes: [ClassMatches; NUM_GRADES],
    /// Matched gt id per prediction, indexed like the input.
    pub assignment: Vec<Option<u64>>,
    /// Ground-truth ids no prediction claimed, ascending.
    pub unmatched_gt: Vec<u64>,
}

/// Greedy matching in confidence order (stable for ties). Each prediction
/// takes the unmatched gt of its grade with the highest IoU ≥ `iou_thr`,
/// ties to the lowest gt id.
pub fn match_detections(
    gt: &AnnotationSet,
    pred: &[Detection],
    iou_thr: f64,
) -> Result<MatchReport> {
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::invalid(format!(
            "iou threshold {iou_thr} outside (0, 1]"
        )));
    }
    let mut cells: Vec<_> = gt.cells.iter().collect();
    cells.sort_by_key(|c| c.id);
    let mut classes: [ClassMatches; NUM_GRADES] = Default::default();
    for c in &cells {
        classes[c.grade.index()].gt_count += 1;
    }

    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].confidence.total_cmp(&pred[a].confidence));

    let mut taken = vec![false; cells.len()];
    let mut assignment = vec![None; pred.len()];
    for i in order {
        let p = &pred[i];
        let mut best: Option<(f64, usize)> = None;
        for (k, c) in cells.iter().enumerate() {
            if taken[k] || c.grade != p.grade {
                continue;
            }
            let v = iou(&p.bbox, &c.bbox);
            if v >= iou_thr && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, k));
            }
        }
        if let Some((_, k)) = best {
            taken[k] = true;
            assignment[i] = Some(cells[k].id);
        }
        classes[p.grade.index()]
            .ranked
            .push((p.confidence, best.is_some()));
    }
    let unmatched_gt = cells
        .iter()
        .zip(&taken)
        .filter(|(_, t)| !**t)
        .map(|(c, _)| c.id)
        .collect();
    Ok(MatchReport {
        classes,
        assignment,
        unmatched_gt,
    })
}

/// All-point interpolated AP: the precision envelope summed at every true
/// positive, divided by the gt count. `None` when the class has no gt.
pub fn average_precision(report: &MatchReport, grade: Grade) -> Option<f64> {
    let class = &report.classes[grade.index()];
    if class.gt_count == 0 {
        return None;
    }
    let precision: Vec<f64> = class
        .ranked
        .iter()
        .scan(0usize, |tp, &(_, hit)| {
            *tp += hit as usize;
            Some(*tp as f64)
        })
        .enumerate()
        .map(|(k, tp)| tp / (k + 1) as f64)
        .collect();
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut sum = 0.0;
    for (k, &(_, hit)) in class.ranked.iter().enumerate() {
        if hit {
            sum += envelope[k];
        }
    }
    Some(sum / class.gt_count as f64)
}

/// Mean AP over the grades present in the ground truth.
pub fn mean_average_precision(report: &MatchReport) -> Result<f64> {
    let aps: Vec<f64> = Grade::ALL
        .iter()
        .filter_map(|&g| average_precision(report, g))
        .collect();
    if aps.is_empty() {
        return Err(Error::invalid("no ground truth in any class"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreErrorMode {
    Slide,
    #[default]
    Patch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScoreError {
    pub mean: f64,
    /// Population standard deviation.
    pub sigma: f64,
    /// Number of tiles (patch mode) or 1 (slide mode).
    pub n: usize,
}

/// Absolute THS difference between prediction and ground truth, either for
/// the whole slide or per tile of `plan`. A side without cells scores 0;
/// tiles without cells on either side are skipped.
pub fn score_error(
    gt: &AnnotationSet,
    pred: &[Detection],
    plan: &TilePlan,
    mode: ScoreErrorMode,
) -> Result<ScoreError> {
    if gt.cells.is_empty() {
        return Err(Error::NoCells);
    }
    let gt_grades: Vec<(f64, f64, Grade)> = gt
        .cells
        .iter()
        .map(|c| {
            let (x, y) = c.bbox.center();
            (x, y, c.grade)
        })
        .collect();
    let pred_grades: Vec<(f64, f64, Grade)> = pred
        .iter()
        .map(|d| {
            let (x, y) = d.bbox.center();
            (x, y, d.grade)
        })
        .collect();
    let grades = |v: &[(f64, f64, Grade)]| v.iter().map(|t| t.2).collect::<Vec<_>>();

    let diffs: Vec<f64> = match mode {
        ScoreErrorMode::Slide => {
            let a = score_of(&grades(&gt_grades)).unwrap_or(0.0);
            let b = score_of(&grades(&pred_grades)).unwrap_or(0.0);
            vec![(a - b).abs()]
        }
        ScoreErrorMode::Patch => plan
            .tiles
            .iter()
            .filter_map(|t| {
                let inside = |v: &[(f64, f64, Grade)]| -> Vec<Grade> {
                    v.iter()
                        .filter(|(x, y, _)| t.contains_point(*x, *y))
                        .map(|g| g.2)
                        .collect()
                };
                let a = score_of(&inside(&gt_grades));
                let b = score_of(&inside(&pred_grades));
                if a.is_none() && b.is_none() {
                    None
                } else {
                    Some((a.unwrap_or(0.0) - b.unwrap_or(0.0)).abs())
                }
            })
            .collect(),
    };
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    Ok(ScoreError {
        mean,
        sigma: var.sqrt(),
        n: diffs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, CellAnnotation, SlideMeta, Staining};
    use crate::pipeline::plan_tiles;

    fn slide() -> SlideMeta {
        SlideMeta {
            id: "e".into(),
            width: 2048,
            height: 2048,
            staining: Staining::Prussian,
            mpp: 0.25,
        }
    }

    fn gt(cells: &[(u64, f64, f64, u8)]) -> AnnotationSet {
        AnnotationSet::new(
            slide(),
            cells
                .iter()
                .map(|&(id, x, y, g)| CellAnnotation {
                    id,
                    bbox: BoundingBox::new(x, y, 50.0, 50.0),
                    grade: Grade::new(g).unwrap(),
                })
                .collect(),
        )
    }

    fn pred(x: f64, y: f64, g: u8, conf: f64) -> Detection {
        Detection::certain(
            BoundingBox::new(x, y, 50.0, 50.0),
            Grade::new(g).unwrap(),
            conf,
        )
    }

    #[test]
    fn perfect_predictions() {
        let g = gt(&[(1, 0.0, 0.0, 0), (2, 100.0, 0.0, 1), (3, 300.0, 300.0, 4)]);
        let p: Vec<Detection> = g
            .cells
            .iter()
            .map(|c| Detection::certain(c.bbox, c.grade, 1.0))
            .collect();
        let r = match_detections(&g, &p, 0.5).unwrap();
        assert!(r.unmatched_gt.is_empty());
        assert_eq!(mean_average_precision(&r).unwrap(), 1.0);
        assert_eq!(average_precision(&r, Grade::new(2).unwrap()), None);
    }

    #[test]
    fn one_match_per_gt() {
        let g = gt(&[(1, 0.0, 0.0, 2)]);
        let r =
            match_detections(&g, &[pred(0.0, 0.0, 2, 0.9), pred(2.0, 0.0, 2, 0.8)], 0.5).unwrap();
        assert_eq!(r.classes[2].ranked, vec![(0.9, true), (0.8, false)]);
        assert_eq!(r.assignment, vec![Some(1), None]);
    }

    #[test]
    fn hand_ranked_ap() {
        let g = gt(&[(1, 0.0, 0.0, 1), (2, 500.0, 0.0, 1)]);
        let p = [
            pred(0.0, 0.0, 1, 0.9),
            pred(900.0, 900.0, 1, 0.8),
            pred(500.0, 0.0, 1, 0.7),
        ];
        let r = match_detections(&g, &p, 0.5).unwrap();
        let ap = average_precision(&r, Grade::new(1).unwrap()).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_tp() {
        let g = gt(&[(1, 0.0, 0.0, 1)]);
        let r = match_detections(&g, &[pred(600.0, 600.0, 1, 0.9)], 0.5).unwrap();
        assert_eq!(average_precision(&r, Grade::new(1).unwrap()), Some(0.0));
        let empty = AnnotationSet::new(slide(), vec![]);
        assert!(mean_average_precision(&match_detections(&empty, &[], 0.5).unwrap()).is_err());
    }

    #[test]
    fn score_errors() {
        let g = gt(&[
            (1, 10.0, 10.0, 0),
            (2, 1500.0, 10.0, 2),
            (3, 10.0, 1500.0, 3),
        ]);
        let plan = plan_tiles(&g.slide, 1024, 1024, 0).unwrap();
        let same: Vec<Detection> = g
            .cells
            .iter()
            .map(|c| Detection::certain(c.bbox, c.grade, 1.0))
            .collect();
        for mode in [ScoreErrorMode::Slide, ScoreErrorMode::Patch] {
            let e = score_error(&g, &same, &plan, mode).unwrap();
            assert_eq!((e.mean, e.sigma), (0.0, 0.0));
        }
        let shifted: Vec<Detection> = g
            .cells
            .iter()
            .map(|c| Detection::certain(c.bbox, Grade::new(c.grade.value() + 1).unwrap(), 1.0))
            .collect();
        let e = score_error(&g, &shifted, &plan, ScoreErrorMode::Slide).unwrap();
        assert!((e.mean - 100.0).abs() < 1e-9);
        // tiles (0,0), (0,1), (1,0) each off by 100; (1,1) empty on both sides
        let e = score_error(&g, &shifted, &plan, ScoreErrorMode::Patch).unwrap();
        assert_eq!(e.n, 3);
        assert!((e.mean - 100.0).abs() < 1e-9 && e.sigma < 1e-9);
        // missing predictions: that tile counts its gt score against 0
        let e = score_error(&g, &same[..2], &plan, ScoreErrorMode::Patch).unwrap();
        assert!((e.mean - 100.0).abs() < 1e-9, "{e:?}");
    }

    #[test]
    fn single_tile_modes_agree() {
        let g = gt(&[(1, 10.0, 10.0, 0), (2, 900.0, 10.0, 2), (3, 10.0, 500.0, 3)]);
        let mut small = g.clone();
        small.slide.width = 1000;
        small.slide.height = 1000;
        let plan = plan_tiles(&small.slide, 1024, 1024, 128).unwrap();
        let p = [pred(10.0, 10.0, 4, 1.0), pred(900.0, 10.0, 1, 1.0)];
        let a = score_error(&small, &p, &plan, ScoreErrorMode::Slide).unwrap();
        let b = score_error(&small, &p, &plan, ScoreErrorMode::Patch).unwrap();
        assert_eq!(a.mean, b.mean);
    }
}
