use serde::{Deserialize, Serialize};

use super::iou;
use crate::error::{Error, Result};
use crate::model::{BoundingBox, CellAnnotation};

/// Anchors on a single feature level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub stride: u32,
    pub base_size: f64,
    pub scales: Vec<f64>,
    /// Width over height.
    pub ratios: Vec<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            stride: 32,
            base_size: 32.0,
            scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            ratios: vec![0.5, 1.0, 2.0],
            pos_iou: 0.5,
            neg_iou: 0.4,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || !(self.base_size > 0.0) {
            return Err(Error::invalid(
                "anchor stride and base size must be positive",
            ));
        }
        if self.scales.iter().chain(&self.ratios).any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("anchor scales and ratios must be positive"));
        }
        if !(0.0 <= self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::invalid(
                "anchor thresholds need 0 <= neg_iou <= pos_iou <= 1",
            ));
        }
        Ok(())
    }

    pub fn per_position(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// One anchor per (grid cell, scale, ratio), centered on its grid cell.
/// Order is row-major over the grid, then scale, then ratio. A partial grid
/// cell at the right or bottom edge is dropped.
pub fn generate_anchors(patch_w: u32, patch_h: u32, cfg: &AnchorConfig) -> Vec<BoundingBox> {
    let stride = cfg.stride.max(1);
    let (cols, rows) = (patch_w / stride, patch_h / stride);
    let mut shapes = Vec::with_capacity(cfg.per_position());
    for &scale in &cfg.scales {
        let side = cfg.base_size * scale;
        for &ratio in &cfg.ratios {
            let r = ratio.sqrt();
            shapes.push((side * r, side / r));
        }
    }
    let s = stride as f64;
    let mut out = Vec::with_capacity((cols * rows) as usize * shapes.len());
    for row in 0..rows {
        let cy = (row as f64 + 0.5) * s;
        for col in 0..cols {
            let cx = (col as f64 + 0.5) * s;
            for &(w, h) in &shapes {
                out.push(BoundingBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorTarget {
    /// Matched to the ground-truth cell with this id.
    Positive(u64),
    Background,
    Ignore,
}

/// Assigns each anchor a training target by IoU against the ground truth.
///
/// Positive at `>= pos_iou` (best cell, ties to the lowest id), background
/// below `neg_iou`, ignored in between. Afterwards every cell that has no
/// positive anchor claims its best-overlapping anchor, provided that overlap
/// is non-zero and the anchor is not already positive for another cell.
pub fn match_anchors(
    anchors: &[BoundingBox],
    gt: &[CellAnnotation],
    cfg: &AnchorConfig,
) -> Vec<AnchorTarget> {
    let mut cells: Vec<&CellAnnotation> = gt.iter().collect();
    cells.sort_by_key(|c| c.id);

    let mut targets = Vec::with_capacity(anchors.len());
    // per cell: (best iou, anchor index)
    let mut best_anchor: Vec<(f64, usize)> = vec![(0.0, usize::MAX); cells.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let mut best: Option<(f64, u64)> = None;
        for (ci, c) in cells.iter().enumerate() {
            let v = iou(a, &c.bbox);
            if v > best_anchor[ci].0 {
                best_anchor[ci] = (v, ai);
            }
            if best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, c.id));
            }
        }
        targets.push(match best {
            Some((v, id)) if v >= cfg.pos_iou => AnchorTarget::Positive(id),
            Some((v, _)) if v >= cfg.neg_iou => AnchorTarget::Ignore,
            _ => AnchorTarget::Background,
        });
    }

    for (ci, c) in cells.iter().enumerate() {
        let has_positive = targets.contains(&AnchorTarget::Positive(c.id));
        let (v, ai) = best_anchor[ci];
        if !has_positive && v > 0.0 && !matches!(targets[ai], AnchorTarget::Positive(_)) {
            targets[ai] = AnchorTarget::Positive(c.id);
        }
    }
    targets
}
