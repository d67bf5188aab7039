//! Total Hemosiderin Score.
//!
//! The clinical recipe grades 300 macrophages, divides each grade count by
//! three and multiplies by the grade. For any number of cells this is
//! 100 × mean grade, which is what [`ths`] computes. Scores above 75 confirm
//! pulmonary hemorrhage.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{GradeCounts, Graded, Staining, NUM_GRADES};

pub const DIAGNOSIS_THRESHOLD: i64 = 75;
pub const MAX_SCORE: f64 = 400.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThsResult {
    pub score: f64,
    pub rounded: i64,
    pub n_cells: u64,
    pub diagnosis_confirmed: bool,
}

pub fn grade_counts<T: Graded>(items: &[T]) -> GradeCounts {
    let mut counts = GradeCounts::default();
    for it in items {
        counts.add(it.grade());
    }
    counts
}

/// Rounds `100 * weighted / n` half away from zero using integer arithmetic,
/// so ties are exact.
fn rounded_percent(weighted: u64, n: u64) -> i64 {
    ((200 * weighted as u128 + n as u128) / (2 * n as u128)) as i64
}

pub fn ths(counts: &GradeCounts) -> Result<ThsResult> {
    let n = counts.total();
    if n == 0 {
        return Err(Error::NoCells);
    }
    let weighted: u64 = counts.0.iter().enumerate().map(|(g, c)| g as u64 * c).sum();
    let rounded = rounded_percent(weighted, n);
    Ok(ThsResult {
        score: 100.0 * weighted as f64 / n as f64,
        rounded,
        n_cells: n,
        diagnosis_confirmed: rounded > DIAGNOSIS_THRESHOLD,
    })
}

/// THS of a single tile or patch, `None` when it holds no cells.
pub fn score_of<T: Graded>(items: &[T]) -> Option<f64> {
    ths(&grade_counts(items)).ok().map(|r| r.score)
}

pub fn diagnose(score: f64) -> Result<bool> {
    if !(0.0..=MAX_SCORE).contains(&score) {
        return Err(Error::invalid(format!("score {score} outside [0, 400]")));
    }
    Ok(score.round() as i64 > DIAGNOSIS_THRESHOLD)
}

/// One fully annotated reference slide: printed score and per-grade counts.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceSlide {
    pub name: &'static str,
    pub staining: Staining,
    pub score: i64,
    pub counts: [u64; NUM_GRADES],
}

impl ReferenceSlide {
    pub fn grade_counts(&self) -> GradeCounts {
        GradeCounts(self.counts)
    }
}

const fn slide(
    name: &'static str,
    staining: Staining,
    score: i64,
    counts: [u64; 5],
) -> ReferenceSlide {
    ReferenceSlide {
        name,
        staining,
        score,
        counts,
    }
}

use Staining::{Prussian as P, Turnbull as T};

/// The seventeen fully annotated EIPH slides (78,047 cells).
pub const REFERENCE_SLIDES: [ReferenceSlide; 17] = [
    slide("01_EIPH", P, 126, [1013, 1782, 1218, 348, 85]),
    slide("02_EIPH", P, 72, [5084, 6203, 1450, 64, 11]),
    slide("03_EIPH", P, 37, [4295, 1697, 330, 3, 0]),
    slide("04_EIPH", P, 63, [2551, 2379, 508, 10, 0]),
    slide("05_EIPH", P, 34, [1754, 634, 99, 2, 0]),
    slide("06_EIPH", T, 41, [1908, 933, 148, 3, 0]),
    slide("07_EIPH", T, 235, [48, 127, 352, 495, 51]),
    slide("08_EIPH", T, 67, [471, 290, 160, 3, 0]),
    slide("09_EIPH", T, 216, [568, 1053, 932, 1446, 753]),
    slide("10_EIPH", P, 208, [592, 2131, 4037, 3098, 527]),
    slide("12_EIPH", P, 59, [2839, 2452, 435, 25, 0]),
    slide("13_EIPH", T, 35, [767, 302, 43, 0, 0]),
    slide("14_EIPH", T, 43, [637, 252, 70, 8, 1]),
    slide("15_EIPH", P, 39, [1995, 1062, 81, 5, 0]),
    slide("11_EIPH", P, 148, [283, 553, 859, 131, 15]),
    slide("16_EIPH", P, 87, [2611, 2509, 984, 363, 24]),
    slide("17_EIPH", T, 133, [1639, 2566, 1818, 1066, 6]),
];

pub fn reference_slide(name: &str) -> Option<&'static ReferenceSlide> {
    REFERENCE_SLIDES.iter().find(|s| s.name == name)
}
