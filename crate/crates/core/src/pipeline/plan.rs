use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{BoundingBox, SlideMeta};

/// Overlapping tiling of a slide, row-major.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TilePlan {
    pub tile_w: u32,
    pub tile_h: u32,
    pub overlap: u32,
    pub tiles: Vec<BoundingBox>,
    #[serde(skip)]
    xs: Vec<u64>,
    #[serde(skip)]
    ys: Vec<u64>,
    /// Core boundaries: tile `i` along an axis owns `[cuts[i-1], cuts[i])`,
    /// open-ended at the first and last tile.
    #[serde(skip)]
    x_cuts: Vec<f64>,
    #[serde(skip)]
    y_cuts: Vec<f64>,
}

/// Tile start positions along one axis: stride `tile - overlap`, the last
/// one clamped to the edge.
fn axis_starts(len: u64, tile: u64, overlap: u64) -> Vec<u64> {
    if len <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let last = len - tile;
    let mut out: Vec<u64> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s < last)
        .collect();
    out.push(last);
    out
}

/// Midpoints of each pair of neighbouring tiles' actual overlap.
fn axis_cuts(starts: &[u64], tile: u64, len: u64) -> Vec<f64> {
    starts
        .windows(2)
        .map(|w| {
            let end = (w[0] + tile).min(len);
            (w[1] as f64 + end as f64) / 2.0
        })
        .collect()
}

pub fn plan_tiles(meta: &SlideMeta, tile_w: u32, tile_h: u32, overlap: u32) -> Result<TilePlan> {
    if tile_w == 0 || tile_h == 0 {
        return Err(Error::invalid("tile dimensions must be positive"));
    }
    if overlap >= tile_w.min(tile_h) {
        return Err(Error::invalid(format!(
            "overlap {overlap} must be smaller than the tile size {}",
            tile_w.min(tile_h)
        )));
    }
    if meta.width == 0 || meta.height == 0 {
        return Err(Error::invalid("slide has zero size"));
    }
    let (tw, th, ov) = (tile_w as u64, tile_h as u64, overlap as u64);
    let xs = axis_starts(meta.width, tw, ov);
    let ys = axis_starts(meta.height, th, ov);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            tiles.push(BoundingBox::new(
                x as f64,
                y as f64,
                tw.min(meta.width - x) as f64,
                th.min(meta.height - y) as f64,
            ));
        }
    }
    Ok(TilePlan {
        tile_w,
        tile_h,
        overlap,
        tiles,
        x_cuts: axis_cuts(&xs, tw, meta.width),
        y_cuts: axis_cuts(&ys, th, meta.height),
        xs,
        ys,
    })
}

fn in_core(cuts: &[f64], i: usize, v: f64) -> bool {
    let lo = if i == 0 {
        f64::NEG_INFINITY
    } else {
        cuts[i - 1]
    };
    let hi = cuts.get(i).copied().unwrap_or(f64::INFINITY);
    lo <= v && v < hi
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.ys.len(), self.xs.len())
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.xs.len(), index % self.xs.len())
    }

    /// Whether tile `index` owns the global point `(x, y)`. The cores of all
    /// tiles partition the plane, so every point has exactly one owner.
    pub fn owns(&self, index: usize, x: f64, y: f64) -> bool {
        let (r, c) = self.row_col(index);
        in_core(&self.x_cuts, c, x) && in_core(&self.y_cuts, r, y)
    }

    /// Index of the tile owning `(x, y)`.
    pub fn owner(&self, x: f64, y: f64) -> usize {
        let c = self.x_cuts.partition_point(|&cut| cut <= x);
        let r = self.y_cuts.partition_point(|&cut| cut <= y);
        r * self.xs.len() + c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Staining;

    fn meta(w: u64, h: u64) -> SlideMeta {
        SlideMeta {
            id: "p".into(),
            width: w,
            height: h,
            staining: Staining::Prussian,
            mpp: 0.25,
        }
    }

    #[test]
    fn four_tiles() {
        let p = plan_tiles(&meta(2048, 2048), 1024, 1024, 0).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.grid(), (2, 2));
        assert_eq!(p.tiles[3], BoundingBox::new(1024.0, 1024.0, 1024.0, 1024.0));
    }

    #[test]
    fn clamped_second_tile() {
        let p = plan_tiles(&meta(1500, 1024), 1024, 1024, 128).unwrap();
        let xs: Vec<f64> = p.tiles.iter().map(|t| t.x).collect();
        assert_eq!(xs, vec![0.0, 476.0]);
    }

    #[test]
    fn small_slide_single_tile() {
        let p = plan_tiles(&meta(600, 300), 1024, 1024, 128).unwrap();
        assert_eq!(p.tiles, vec![BoundingBox::new(0.0, 0.0, 600.0, 300.0)]);
    }

    #[test]
    fn stride_and_overlap() {
        let p = plan_tiles(&meta(4096, 1024), 1024, 1024, 128).unwrap();
        let xs: Vec<f64> = p.tiles.iter().map(|t| t.x).collect();
        assert_eq!(xs, vec![0.0, 896.0, 1792.0, 2688.0, 3072.0]);
        assert!(plan_tiles(&meta(4096, 1024), 1024, 1024, 1024).is_err());
    }

    #[test]
    fn cores_partition() {
        let p = plan_tiles(&meta(3000, 2100), 1024, 1024, 128).unwrap();
        for &(x, y) in &[
            (0.0, 0.0),
            (959.5, 960.0),
            (960.0, 5.0),
            (2999.0, 2099.0),
            (1500.0, 1000.0),
        ] {
            let owners: Vec<usize> = (0..p.len()).filter(|&i| p.owns(i, x, y)).collect();
            assert_eq!(owners, vec![p.owner(x, y)], "({x}, {y})");
            assert!(p.tiles[owners[0]].contains_point(x, y));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn covers_slide(w in 1u64..6000, h in 1u64..6000, tile in 64u32..1500, ov in 0u32..64) {
                let m = meta(w, h);
                let p = plan_tiles(&m, tile, tile, ov).unwrap();
                // every slide pixel corner lies in some tile and in exactly one core
                for &(x, y) in &[(0.0, 0.0), (w as f64 - 0.5, h as f64 - 0.5), (w as f64 / 3.0, h as f64 / 2.0)] {
                    prop_assert!(p.tiles.iter().any(|t| t.contains_point(x, y)));
                    let o = p.owner(x, y);
                    prop_assert!(p.tiles[o].contains_point(x, y));
                    prop_assert_eq!((0..p.len()).filter(|&i| p.owns(i, x, y)).count(), 1);
                }
                for t in &p.tiles {
                    prop_assert!(m.bounds().contains_box(t));
                }
                // neighbours overlap by exactly `ov` except where clamped
                let (_, cols) = p.grid();
                for c in 0..cols.saturating_sub(2) {
                    let (a, b) = (&p.tiles[c], &p.tiles[c + 1]);
                    prop_assert_eq!(a.right() - b.x, ov as f64);
                }
            }
        }
    }
}
