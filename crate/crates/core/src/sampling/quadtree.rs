use rand::Rng;
use serde::Serialize;

use super::{jitter_around, SamplerConfig};
use crate::detection::pairwise_sum;
use crate::error::Result;
use crate::model::{AnnotationSet, BoundingBox, Grade, SlideMeta, NUM_GRADES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WeightedCell {
    pub id: u64,
    pub grade: Grade,
    /// `1 / (number of cells of this grade on the slide)`.
    pub weight: f64,
    #[serde(skip)]
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuadTreeNode {
    pub bounds: BoundingBox,
    pub depth: u32,
    /// Arena indices, ordered NW, NE, SE, SW. Empty for leaves.
    pub children: Vec<usize>,
    /// Only populated on leaves.
    pub cells: Vec<WeightedCell>,
    pub raw_weight: f64,
    pub sibling_prob: f64,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl QuadTreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Arena-backed quad-tree; node 0 is the root.
#[derive(Clone, Debug, Serialize)]
pub struct QuadTree {
    pub nodes: Vec<QuadTreeNode>,
    #[serde(skip)]
    meta: SlideMeta,
    #[serde(skip)]
    cfg: SamplerConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct QuadSample {
    pub leaf: usize,
    pub origin: (u64, u64),
    pub anchor_id: Option<u64>,
}

/// NW, NE, SE, SW quadrants of `b`, split at the floored midpoint.
fn quadrants(b: &BoundingBox) -> [BoundingBox; 4] {
    let hw = (b.w / 2.0).floor();
    let hh = (b.h / 2.0).floor();
    [
        BoundingBox::new(b.x, b.y, hw, hh),
        BoundingBox::new(b.x + hw, b.y, b.w - hw, hh),
        BoundingBox::new(b.x + hw, b.y + hh, b.w - hw, b.h - hh),
        BoundingBox::new(b.x, b.y + hh, hw, b.h - hh),
    ]
}

fn quadrant_of(b: &BoundingBox, cell: &BoundingBox) -> usize {
    let (cx, cy) = cell.center();
    let east = cx >= b.x + (b.w / 2.0).floor();
    let south = cy >= b.y + (b.h / 2.0).floor();
    match (east, south) {
        (false, false) => 0,
        (true, false) => 1,
        (true, true) => 2,
        (false, true) => 3,
    }
}

pub fn build_quadtree(set: &AnnotationSet, cfg: &SamplerConfig) -> Result<QuadTree> {
    cfg.validate(&set.slide)?;
    let mut per_grade = [0u64; NUM_GRADES];
    for c in &set.cells {
        per_grade[c.grade.index()] += 1;
    }
    let cells: Vec<WeightedCell> = set
        .cells
        .iter()
        .map(|c| WeightedCell {
            id: c.id,
            grade: c.grade,
            weight: 1.0 / per_grade[c.grade.index()] as f64,
            bbox: c.bbox,
        })
        .collect();

    let mut tree = QuadTree {
        nodes: Vec::new(),
        meta: set.slide.clone(),
        cfg: cfg.clone(),
    };
    tree.grow(set.slide.bounds(), 0, cells, 1.0);
    Ok(tree)
}

impl QuadTree {
    pub fn root(&self) -> &QuadTreeNode {
        &self.nodes[0]
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn grow(
        &mut self,
        bounds: BoundingBox,
        depth: u32,
        cells: Vec<WeightedCell>,
        prob: f64,
    ) -> usize {
        let weights: Vec<f64> = cells.iter().map(|c| c.weight).collect();
        let raw_weight = pairwise_sum(&weights);
        let idx = self.nodes.len();
        self.nodes.push(QuadTreeNode {
            bounds,
            depth,
            children: Vec::new(),
            cells: Vec::new(),
            raw_weight,
            sibling_prob: prob,
            cumulative: Vec::new(),
        });

        let mut parts: [Vec<WeightedCell>; 4] = Default::default();
        for c in &cells {
            parts[quadrant_of(&bounds, &c.bbox)].push(*c);
        }
        let splittable = depth < self.cfg.max_depth
            && bounds.w >= 2.0
            && bounds.h >= 2.0
            && parts.iter().all(|p| p.len() >= self.cfg.min_cells_per_node);
        if !splittable {
            let mut acc = 0.0;
            let node = &mut self.nodes[idx];
            node.cumulative = cells
                .iter()
                .map(|c| {
                    acc += c.weight;
                    acc
                })
                .collect();
            node.cells = cells;
            return idx;
        }

        let raws: Vec<f64> = parts
            .iter()
            .map(|p| pairwise_sum(&p.iter().map(|c| c.weight).collect::<Vec<_>>()))
            .collect();
        let probs = sibling_probabilities(&raws, self.cfg.epsilon);
        let mut children = Vec::with_capacity(4);
        for ((b, part), p) in quadrants(&bounds).into_iter().zip(parts).zip(probs) {
            children.push(self.grow(b, depth + 1, part, p));
        }
        self.nodes[idx].children = children;
        idx
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_leaf())
    }

    /// Probability of reaching each leaf: the product of sibling
    /// probabilities along its path.
    pub fn leaf_probabilities(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, 1.0f64)];
        while let Some((i, p)) = stack.pop() {
            let n = &self.nodes[i];
            if n.is_leaf() {
                out.push((i, p));
            } else {
                for &c in n.children.iter().rev() {
                    stack.push((c, p * self.nodes[c].sibling_prob));
                }
            }
        }
        out.sort_by_key(|&(i, _)| i);
        out
    }

    /// Summed cell weight per grade over all leaves.
    pub fn grade_weight_totals(&self) -> [f64; NUM_GRADES] {
        let mut per: [Vec<f64>; NUM_GRADES] = Default::default();
        for i in self.leaves() {
            for c in &self.nodes[i].cells {
                per[c.grade.index()].push(c.weight);
            }
        }
        per.map(|v| pairwise_sum(&v))
    }

    /// Leaf holding the cell with `id`.
    pub fn leaf_of(&self, id: u64) -> Option<usize> {
        self.leaves()
            .find(|&i| self.nodes[i].cells.iter().any(|c| c.id == id))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> QuadSample {
        let mut i = 0;
        while !self.nodes[i].is_leaf() {
            let children = &self.nodes[i].children;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = *children.last().expect("internal node has children");
            for &c in children {
                acc += self.nodes[c].sibling_prob;
                if u < acc {
                    pick = c;
                    break;
                }
            }
            i = pick;
        }
        let leaf = &self.nodes[i];
        match leaf.cumulative.last() {
            Some(&total) => {
                let u = rng.random::<f64>() * total;
                let k = leaf
                    .cumulative
                    .partition_point(|&c| c <= u)
                    .min(leaf.cells.len() - 1);
                let cell = &leaf.cells[k];
                QuadSample {
                    leaf: i,
                    origin: jitter_around(&cell.bbox, &self.meta, &self.cfg, rng),
                    anchor_id: Some(cell.id),
                }
            }
            None => QuadSample {
                leaf: i,
                origin: self.origin_in(&leaf.bounds, rng),
                anchor_id: None,
            },
        }
    }

    /// Uniform origin inside `b` among the origins that keep the patch on the
    /// slide; clamped when they do not intersect.
    fn origin_in<R: Rng + ?Sized>(&self, b: &BoundingBox, rng: &mut R) -> (u64, u64) {
        let axis = |start: f64, len: f64, max: u64, rng: &mut R| -> u64 {
            let lo = start.ceil().max(0.0) as u64;
            let hi = ((start + len).ceil() as u64).saturating_sub(1);
            let hi = hi.min(max);
            if lo <= hi {
                rng.random_range(lo..=hi)
            } else {
                lo.min(max)
            }
        };
        let mx = self.meta.width - self.cfg.patch_w as u64;
        let my = self.meta.height - self.cfg.patch_h as u64;
        let x = axis(b.x, b.w, mx, rng);
        let y = axis(b.y, b.h, my, rng);
        (x, y)
    }
}

/// `normalize(raw_i + eps * (sum(raw) + delta))`, with `delta = 1` when every
/// sibling is empty so that empty nodes keep a positive share.
pub fn sibling_probabilities(raw: &[f64], epsilon: f64) -> Vec<f64> {
    let sum = pairwise_sum(raw);
    let delta = if sum == 0.0 { 1.0 } else { 0.0 };
    let floor = epsilon * (sum + delta);
    let vals: Vec<f64> = raw.iter().map(|r| r + floor).collect();
    let total = pairwise_sum(&vals);
    if total > 0.0 {
        vals.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

pub fn sample_quadtree<R: Rng + ?Sized>(tree: &QuadTree, rng: &mut R) -> QuadSample {
    tree.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{cell, meta};
    use super::*;
    use crate::model::CellAnnotation;

    /// `per` grade-0 cells in each quadrant of a 4096² slide, plus one grade-4
    /// cell in the NE quadrant.
    fn four_quadrants(per: usize, with_rare: bool) -> AnnotationSet {
        let mut cells = Vec::new();
        let mut id = 0;
        for (qx, qy) in [(0.0, 0.0), (2048.0, 0.0), (2048.0, 2048.0), (0.0, 2048.0)] {
            for k in 0..per {
                let x = qx + 100.0 + (k % 10) as f64 * 150.0;
                let y = qy + 100.0 + (k / 10) as f64 * 150.0;
                cells.push(cell(id, x, y, 0));
                id += 1;
            }
        }
        if with_rare {
            cells.push(cell(id, 3500.0, 1900.0, 4));
        }
        AnnotationSet::new(meta(4096, 4096), cells)
    }

    fn cfg(eps: f64, min_cells: usize, depth: u32) -> SamplerConfig {
        SamplerConfig {
            epsilon: eps,
            min_cells_per_node: min_cells,
            max_depth: depth,
            ..Default::default()
        }
    }

    #[test]
    fn hand_evaluated_sibling_probs() {
        let t = build_quadtree(&four_quadrants(10, true), &cfg(0.0, 1, 1)).unwrap();
        let probs: Vec<f64> = t
            .root()
            .children
            .iter()
            .map(|&c| t.nodes[c].sibling_prob)
            .collect();
        let expected = [0.125, 0.625, 0.125, 0.125];
        for (p, e) in probs.iter().zip(expected) {
            assert!((p - e).abs() < 1e-12, "{probs:?}");
        }
    }

    #[test]
    fn uniform_grade_gives_equal_probs() {
        let t = build_quadtree(&four_quadrants(10, false), &cfg(0.01, 1, 1)).unwrap();
        for &c in &t.root().children {
            assert!((t.nodes[c].sibling_prob - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn split_guard_and_depth() {
        // 10 cells per quadrant cannot satisfy min 11
        let t = build_quadtree(&four_quadrants(10, false), &cfg(0.01, 11, 3)).unwrap();
        assert_eq!(t.nodes.len(), 1);
        let t = build_quadtree(&four_quadrants(10, false), &cfg(0.01, 0, 2)).unwrap();
        assert_eq!(t.nodes.len(), 1 + 4 + 16);
        assert!(t.nodes.iter().all(|n| n.depth <= 2));
    }

    #[test]
    fn weights_sum_to_one_per_grade() {
        let t = build_quadtree(&four_quadrants(10, true), &cfg(0.01, 1, 3)).unwrap();
        let totals = t.grade_weight_totals();
        assert!((totals[0] - 1.0).abs() < 1e-12);
        assert!((totals[4] - 1.0).abs() < 1e-12);
        assert_eq!(totals[1], 0.0);
    }

    #[test]
    fn probabilities_sum_to_one_and_positive() {
        let t = build_quadtree(&four_quadrants(10, true), &cfg(0.01, 0, 3)).unwrap();
        for n in &t.nodes {
            if !n.is_leaf() {
                let s: f64 = n.children.iter().map(|&c| t.nodes[c].sibling_prob).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(n.children.iter().all(|&c| t.nodes[c].sibling_prob > 0.0));
            }
        }
        let total: f64 = t.leaf_probabilities().iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_quadrant_is_sampled_rarely() {
        // NE quadrant left empty
        let mut set = four_quadrants(10, false);
        set.cells
            .retain(|c| !(c.bbox.x >= 2048.0 && c.bbox.y < 2048.0));
        let t = build_quadtree(&set, &cfg(0.01, 0, 1)).unwrap();
        let ne = t.root().children[1];
        let p = t.nodes[ne].sibling_prob;
        assert!(p > 0.0 && p < 0.02, "{p}");
        let mut rng = t.config().rng();
        let n = 100_000;
        let hits = (0..n).filter(|_| t.sample(&mut rng).leaf == ne).count();
        assert!(hits > 0);
        assert!((hits as f64 / n as f64 - p).abs() < 0.005);
    }

    #[test]
    fn degenerate_tree_is_weighted_cell_sampling() {
        let set = AnnotationSet::new(
            meta(4096, 4096),
            vec![
                cell(0, 100.0, 100.0, 0),
                cell(1, 900.0, 100.0, 0),
                cell(2, 3000.0, 3000.0, 4),
            ],
        );
        let t = build_quadtree(&set, &cfg(0.01, 300, 3)).unwrap();
        assert_eq!(t.nodes.len(), 1);
        let mut rng = t.config().rng();
        let n = 100_000;
        let rare = (0..n)
            .filter(|_| t.sample(&mut rng).anchor_id == Some(2))
            .count();
        // weights 1/2, 1/2, 1 → rare share 0.5
        assert!((rare as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn samples_stay_in_bounds_and_contain_anchor() {
        let set = four_quadrants(10, true);
        let t = build_quadtree(&set, &cfg(0.01, 1, 3)).unwrap();
        let by_id = set.by_id();
        let mut rng = t.config().rng();
        for _ in 0..2000 {
            let s = t.sample(&mut rng);
            let p = t.config().patch_at(s.origin);
            assert!(set.slide.bounds().contains_box(&p));
            if let Some(id) = s.anchor_id {
                let c: &CellAnnotation = by_id[&id];
                assert!(p.contains_box(&c.bbox));
            }
        }
    }
}
