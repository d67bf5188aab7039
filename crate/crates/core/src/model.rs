//! Domain types shared by every module: grades, boxes, annotations, detections.
//!
//! Boxes are always top-left + width/height in slide pixel coordinates. The
//! only place that converts to center form is the anchor code in
//! [`crate::detection`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_GRADES: usize = 5;

/// Golde grade of a single macrophage, 0 (no pigment) to 4 (filled).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Grade(u8);

impl Grade {
    pub const ALL: [Grade; NUM_GRADES] = [Grade(0), Grade(1), Grade(2), Grade(3), Grade(4)];

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < NUM_GRADES {
            Ok(Grade(value))
        } else {
            Err(Error::invalid(format!("grade out of range: {value}")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Panics if `index >= 5`.
    pub fn from_index(index: usize) -> Self {
        assert!(index < NUM_GRADES, "grade index {index} out of range");
        Grade(index as u8)
    }
}

impl TryFrom<u8> for Grade {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Grade::new(v)
    }
}

impl From<Grade> for u8 {
    fn from(g: Grade) -> u8 {
        g.0
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Real-valued grade produced by a scaled-sigmoid regression head.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ContinuousGrade(f64);

impl ContinuousGrade {
    pub const MIN: f64 = -0.5;
    pub const MAX: f64 = 4.5;

    pub fn new(value: f64) -> Result<Self> {
        if (Self::MIN..=Self::MAX).contains(&value) {
            Ok(ContinuousGrade(value))
        } else {
            Err(Error::invalid(format!(
                "continuous grade {value} outside [-0.5, 4.5]"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<Grade> for ContinuousGrade {
    fn from(g: Grade) -> Self {
        ContinuousGrade(g.0 as f64)
    }
}

impl TryFrom<f64> for ContinuousGrade {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        ContinuousGrade::new(v)
    }
}

impl From<ContinuousGrade> for f64 {
    fn from(g: ContinuousGrade) -> f64 {
        g.0
    }
}

/// Axis-aligned box, top-left origin, pixels.
///
/// Construction through struct literals is unchecked so that anchors may hang
/// over the patch edge; use [`BoundingBox::try_new`] for external input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox { x, y, w, h }
    }

    pub fn try_new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::invalid(format!("invalid box ({x}, {y}, {w}, {h})")))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x >= 0.0 && self.y >= 0.0 && self.is_finite()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BoundingBox {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    /// Half-open containment of a point.
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// Positive-area intersection, if any.
    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| BoundingBox::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// One graded hemosiderophage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAnnotation {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub grade: Grade,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Staining {
    #[default]
    Prussian,
    Turnbull,
}

impl fmt::Display for Staining {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Staining::Prussian => "prussian",
            Staining::Turnbull => "turnbull",
        })
    }
}

/// Reference scanner resolution, micrometers per pixel.
pub const REFERENCE_MPP: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub id: String,
    pub width: u64,
    pub height: u64,
    pub staining: Staining,
    /// Micrometers per pixel.
    pub mpp: f64,
}

impl SlideMeta {
    pub fn bounds(&self) -> BoundingBox {
        BoundingBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }

    /// Area of a `w`×`h` pixel region in mm².
    pub fn area_mm2(&self, w: f64, h: f64) -> f64 {
        w * h * self.mpp * self.mpp * 1e-6
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub slide: SlideMeta,
    pub cells: Vec<CellAnnotation>,
}

impl AnnotationSet {
    pub fn new(slide: SlideMeta, cells: Vec<CellAnnotation>) -> Self {
        AnnotationSet { slide, cells }
    }

    pub fn by_id(&self) -> BTreeMap<u64, &CellAnnotation> {
        self.cells.iter().map(|c| (c.id, c)).collect()
    }

    /// Median cell width and height, used as the false-positive box size.
    pub fn median_cell_size(&self) -> Option<(f64, f64)> {
        if self.cells.is_empty() {
            return None;
        }
        let median = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        Some((
            median(self.cells.iter().map(|c| c.bbox.w).collect()),
            median(self.cells.iter().map(|c| c.bbox.h).collect()),
        ))
    }
}

/// Per-grade cell counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GradeCounts(pub [u64; NUM_GRADES]);

impl GradeCounts {
    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn get(&self, g: Grade) -> u64 {
        self.0[g.index()]
    }

    pub fn add(&mut self, g: Grade) {
        self.0[g.index()] += 1;
    }
}

/// Anything that carries a single grade.
pub trait Graded {
    fn grade(&self) -> Grade;
}

impl Graded for CellAnnotation {
    fn grade(&self) -> Grade {
        self.grade
    }
}

impl Graded for Detection {
    fn grade(&self) -> Grade {
        self.grade
    }
}

impl Graded for Grade {
    fn grade(&self) -> Grade {
        *self
    }
}

/// A predicted cell. `class_probs` covers the five grades; the remainder up to
/// one is background mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub grade: Grade,
    pub class_probs: [f64; NUM_GRADES],
    pub confidence: f64,
    pub score: ContinuousGrade,
}

impl Detection {
    /// Builds a detection whose grade is the argmax of `class_probs`
    /// (ties resolve to the lower grade).
    pub fn new(
        bbox: BoundingBox,
        class_probs: [f64; NUM_GRADES],
        confidence: f64,
        score: ContinuousGrade,
    ) -> Result<Self> {
        if class_probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("class probabilities must be non-negative"));
        }
        let mass: f64 = class_probs.iter().sum();
        if mass > 1.0 + 1e-9 {
            return Err(Error::invalid(format!(
                "class probabilities sum to {mass} > 1"
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Detection {
            bbox,
            grade: argmax_grade(&class_probs),
            class_probs,
            confidence,
            score,
        })
    }

    /// A detection that puts all its class mass on `grade`.
    pub fn certain(bbox: BoundingBox, grade: Grade, confidence: f64) -> Self {
        let mut class_probs = [0.0; NUM_GRADES];
        class_probs[grade.index()] = 1.0;
        Detection {
            bbox,
            grade,
            class_probs,
            confidence,
            score: grade.into(),
        }
    }
}

pub fn argmax_grade(probs: &[f64; NUM_GRADES]) -> Grade {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate().skip(1) {
        if *p > probs[best] {
            best = i;
        }
    }
    Grade::from_index(best)
}

/// A single broken invariant found by [`validate_annotation_set`].
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Violation {
    SlideDimensions,
    SlideResolution,
    DuplicateId(u64),
    BoxSize(u64),
    BoxOrigin(u64),
    OutOfBounds(u64),
}

impl Violation {
    pub fn cell_id(&self) -> Option<u64> {
        match *self {
            Violation::SlideDimensions | Violation::SlideResolution => None,
            Violation::DuplicateId(id)
            | Violation::BoxSize(id)
            | Violation::BoxOrigin(id)
            | Violation::OutOfBounds(id) => Some(id),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SlideDimensions => f.write_str("slide: dimensions must be positive"),
            Violation::SlideResolution => f.write_str("slide: resolution must be positive"),
            Violation::DuplicateId(id) => write!(f, "duplicate id {id}"),
            Violation::BoxSize(id) => write!(f, "cell {id}: box has non-positive size"),
            Violation::BoxOrigin(id) => write!(f, "cell {id}: box has negative origin"),
            Violation::OutOfBounds(id) => write!(f, "cell {id}: box out of bounds"),
        }
    }
}

/// Lists every invariant violation in `set`. The result is sorted, so it does
/// not depend on cell order.
pub fn validate_annotation_set(set: &AnnotationSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let slide = &set.slide;
    if slide.width == 0 || slide.height == 0 {
        out.push(Violation::SlideDimensions);
    }
    if !(slide.mpp > 0.0) {
        out.push(Violation::SlideResolution);
    }

    let mut seen: BTreeMap<u64, usize> = BTreeMap::new();
    let bounds = slide.bounds();
    for cell in &set.cells {
        *seen.entry(cell.id).or_default() += 1;
        let b = &cell.bbox;
        if !(b.w > 0.0 && b.h > 0.0) {
            out.push(Violation::BoxSize(cell.id));
        }
        if !(b.x >= 0.0 && b.y >= 0.0) {
            out.push(Violation::BoxOrigin(cell.id));
        } else if !bounds.contains_box(b) {
            out.push(Violation::OutOfBounds(cell.id));
        }
    }
    out.extend(
        seen.into_iter()
            .filter(|(_, n)| *n > 1)
            .map(|(id, _)| Violation::DuplicateId(id)),
    );
    out.sort();
    out.dedup();
    out
}
