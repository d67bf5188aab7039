//! Single-level RetinaNet-style detection numerics: anchors on the stride-32
//! grid, IoU matching, class-wise NMS, the four-term training loss and a
//! finite-difference gradient checker.

mod anchors;
pub mod gradcheck;
pub mod loss;
pub mod losscheck;

pub use anchors::{generate_anchors, match_anchors, AnchorConfig, AnchorTarget};
pub use gradcheck::{grad_check, grad_check_with, DiffScheme};
pub use loss::{
    focal_loss, focal_loss_grad, inverse_scaled_sigmoid, mse, mse_grad, scaled_sigmoid,
    scaled_sigmoid_grad, smooth_l1, smooth_l1_grad, total_loss, total_loss_grad, AnchorLabel,
    FocalParams, LossBatch, LossBreakdown, LossGradient,
};
pub use losscheck::{loss_check_suite, perfect_batch, random_batch, LossCheckReport, TermCheck};

use std::cmp::Ordering;

use crate::model::{BoundingBox, Detection};

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.right().min(b.right()) - a.x.max(b.x);
    let ih = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Detection ranking: confidence descending, then smaller x, then smaller y.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
}

/// Greedy class-wise non-maximum suppression. A detection survives when its
/// IoU with every already kept detection of the same grade is below
/// `iou_thr`. Output is in rank order.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.grade == d.grade && iou(&k.bbox, &d.bbox) >= iou_thr);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

/// Order-fixed pairwise summation; the result does not depend on thread
/// scheduling when partial sums are reduced through this.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n if n <= 8 => xs.iter().sum(),
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}
