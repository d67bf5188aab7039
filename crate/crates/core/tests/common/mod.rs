#![allow(dead_code)]

use std::path::Path;

use eiph::io::{write_manifest, Manifest, TileFormat, DEFAULT_TILE_PATTERN, MANIFEST_MAGIC};
use eiph::model::{AnnotationSet, BoundingBox, CellAnnotation, Grade, SlideMeta, Staining};

pub fn meta(id: &str, w: u64, h: u64) -> SlideMeta {
    SlideMeta {
        id: id.into(),
        width: w,
        height: h,
        staining: Staining::Prussian,
        mpp: 0.25,
    }
}

/// Writes a manifest with no tiles: an all-white slide.
pub fn blank_slide(dir: &Path, w: u64, h: u64, tile: u32) {
    std::fs::create_dir_all(dir).unwrap();
    write_manifest(
        dir,
        &Manifest {
            magic: MANIFEST_MAGIC.into(),
            width: w,
            height: h,
            tile_size: tile,
            mpp: 0.25,
            staining: Staining::Prussian,
            format: TileFormat::Ppm,
            tile_pattern: DEFAULT_TILE_PATTERN.into(),
        },
    )
    .unwrap();
}

pub fn cell(id: u64, x: f64, y: f64, w: f64, h: f64, g: usize) -> CellAnnotation {
    CellAnnotation {
        id,
        bbox: BoundingBox::new(x, y, w, h),
        grade: Grade::from_index(g),
    }
}

/// Cells placed across every tile boundary and overlap band of a
/// 1024/128 plan on a 4096² slide, including boxes centered exactly on the
/// midpoints between neighbouring tile origins.
pub fn straddling_set() -> AnnotationSet {
    let mut cells = Vec::new();
    let mut id = 1;
    // tile origins 0, 896, 1792, 2688, 3072; overlaps [896,1024), [1792,1920), ...
    let marks = [
        860.0, 900.0, 925.0, 960.0, 990.0, 1020.0, 1800.0, 1856.0, 1900.0, 2700.0, 2752.0, 3050.0,
        3100.0,
    ];
    for (i, &mx) in marks.iter().enumerate() {
        for (j, &my) in marks.iter().enumerate() {
            if (i + j) % 3 != 0 {
                continue;
            }
            let (w, h) = (40.0 + (i % 4) as f64 * 10.0, 40.0 + (j % 3) as f64 * 15.0);
            cells.push(cell(id, mx - w / 2.0, my - h / 2.0, w, h, (i + 2 * j) % 5));
            id += 1;
        }
    }
    AnnotationSet::new(meta("straddle", 4096, 4096), cells)
}

/// Spearman rank correlation of two equally long samples (average ranks
/// for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut e = k;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
                e += 1;
            }
            let avg = (k + e) as f64 / 2.0 + 1.0;
            for &i in &idx[k..=e] {
                r[i] = avg;
            }
            k = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Independent matcher: confidence order (stable), same-class unmatched gt
/// with the largest IoU at or above the threshold, ties to the lower id.
/// Returns per-class `(is_tp in rank order, gt count)`.
pub fn oracle_match(
    gt: &[CellAnnotation],
    pred: &[eiph::model::Detection],
    thr: f64,
) -> Vec<(Vec<bool>, usize)> {
    fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
        let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (a.w * a.h + b.w * b.h - inter)
    }
    let mut gt: Vec<&CellAnnotation> = gt.iter().collect();
    gt.sort_by_key(|c| c.id);
    let mut out: Vec<(Vec<bool>, usize)> = (0..5).map(|_| (Vec::new(), 0)).collect();
    for c in &gt {
        out[c.grade.index()].1 += 1;
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    // insertion sort keeps equal confidences in input order
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && pred[order[j - 1]].confidence < pred[order[j]].confidence {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used = vec![false; gt.len()];
    for i in order {
        let p = &pred[i];
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for (k, c) in gt.iter().enumerate() {
            if used[k] || c.grade != p.grade {
                continue;
            }
            let v = iou(&p.bbox, &c.bbox);
            if v >= thr && v > best_iou {
                best_iou = v;
                best = Some(k);
            }
        }
        if let Some(k) = best {
            used[k] = true;
        }
        out[p.grade.index()].0.push(best.is_some());
    }
    out
}

/// Brute-force all-point AP from the precision-recall curve: for each
/// recall level j/G, the best precision at any rank reaching it.
pub fn oracle_ap(hits: &[bool], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let total_tp = hits.iter().filter(|h| **h).count();
    let mut sum = 0.0;
    for j in 1..=total_tp {
        let mut best = 0.0f64;
        for k in 1..=hits.len() {
            let tp = hits[..k].iter().filter(|h| **h).count();
            if tp >= j {
                best = best.max(tp as f64 / k as f64);
            }
        }
        sum += best;
    }
    Some(sum / gt_count as f64)
}
