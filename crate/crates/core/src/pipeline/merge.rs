use super::TilePlan;
use crate::detection::nms;
use crate::model::Detection;

/// Combines per-tile detections into one slide-wide list.
///
/// Detections are moved to slide coordinates, then each is kept only by the
/// tile whose core (the tile minus half of every overlap with a neighbour)
/// contains its center. Class-wise NMS at `nms_thr` removes any remaining
/// duplicates. Input may arrive in any order; it is processed by tile index.
pub fn merge_tiles(
    plan: &TilePlan,
    per_tile: &[(usize, Vec<Detection>)],
    nms_thr: f64,
) -> Vec<Detection> {
    let mut order: Vec<&(usize, Vec<Detection>)> = per_tile.iter().collect();
    order.sort_by_key(|(i, _)| *i);
    let mut owned = Vec::new();
    for (index, dets) in order {
        let tile = &plan.tiles[*index];
        for d in dets {
            let mut g = d.clone();
            g.bbox = d.bbox.translate(tile.x, tile.y);
            let (cx, cy) = g.bbox.center();
            if plan.owns(*index, cx, cy) {
                owned.push(g);
            }
        }
    }
    nms(&owned, nms_thr)
}
