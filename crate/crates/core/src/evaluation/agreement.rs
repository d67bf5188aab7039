use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::RatingTable;
use crate::model::{Grade, NUM_GRADES};

/// Rows = reference grade, columns = assigned grade.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ConfusionMatrix(pub [[u64; NUM_GRADES]; NUM_GRADES]);

impl ConfusionMatrix {
    pub fn add(&mut self, reference: Grade, assigned: Grade) {
        self.0[reference.index()][assigned.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..NUM_GRADES).map(|g| self.0[g][g]).sum()
    }

    /// Row-stochastic version; empty rows become the identity row.
    pub fn row_normalized(&self) -> [[f64; NUM_GRADES]; NUM_GRADES] {
        let mut out = [[0.0; NUM_GRADES]; NUM_GRADES];
        for (g, row) in self.0.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n == 0 {
                out[g][g] = 1.0;
            } else {
                for (c, v) in row.iter().enumerate() {
                    out[g][c] = *v as f64 / n as f64;
                }
            }
        }
        out
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "reference,0,1,2,3,4")?;
        for (g, row) in self.0.iter().enumerate() {
            writeln!(
                out,
                "{g},{},{},{},{},{}",
                row[0], row[1], row[2], row[3], row[4]
            )?;
        }
        Ok(())
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(mut self, rhs: ConfusionMatrix) -> ConfusionMatrix {
        for r in 0..NUM_GRADES {
            for c in 0..NUM_GRADES {
                self.0[r][c] += rhs.0[r][c];
            }
        }
        self
    }
}

/// `(reference, assigned)` pairs for one rater and session, by cell id.
fn paired(table: &RatingTable, rater: &str, session: u8) -> Result<Vec<(Grade, Grade)>> {
    Ok(table
        .gradings(rater, session)?
        .into_iter()
        .map(|(cell, g)| (table.reference[cell], g))
        .collect())
}

pub fn confusion(table: &RatingTable, rater: &str, session: u8) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::default();
    for (r, a) in paired(table, rater, session)? {
        m.add(r, a);
    }
    Ok(m)
}

/// Sum of the per-rater matrices of `session`.
pub fn accumulated_confusion(table: &RatingTable, session: u8) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::default();
    for rater in table.raters() {
        if let Ok(c) = confusion(table, rater, session) {
            m = m + c;
        }
    }
    if m.total() == 0 {
        return Err(Error::invalid(format!("no ratings in session {session}")));
    }
    Ok(m)
}

pub fn cohen_kappa(a: &[Grade], b: &[Grade]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "gradings differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("no gradings to compare"));
    }
    let n = a.len() as f64;
    let mut ma = [0u64; NUM_GRADES];
    let mut mb = [0u64; NUM_GRADES];
    let mut agree = 0u64;
    for (x, y) in a.iter().zip(b) {
        ma[x.index()] += 1;
        mb[y.index()] += 1;
        agree += (x == y) as u64;
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = ma
        .iter()
        .zip(&mb)
        .map(|(x, y)| (*x as f64 / n) * (*y as f64 / n))
        .sum();
    if p_e >= 1.0 {
        // both raters used one and the same grade throughout
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Fleiss' kappa over per-cell category counts. Every cell must have been
/// rated by the same number of raters, at least two.
pub fn fleiss_kappa(table: &[[u64; NUM_GRADES]]) -> Result<f64> {
    let Some(first) = table.first() else {
        return Err(Error::invalid("fleiss kappa needs at least one cell"));
    };
    let n: u64 = first.iter().sum();
    if n < 2 {
        return Err(Error::invalid(
            "fleiss kappa needs at least two raters per cell",
        ));
    }
    if let Some(i) = table.iter().position(|row| row.iter().sum::<u64>() != n) {
        return Err(Error::invalid(format!(
            "cell {i} has {} ratings, expected {n}",
            table[i].iter().sum::<u64>()
        )));
    }
    let cells = table.len() as f64;
    let nf = n as f64;
    let p_bar = table
        .iter()
        .map(|row| {
            let sq: u64 = row.iter().map(|c| c * c).sum();
            (sq - n) as f64 / (nf * (nf - 1.0))
        })
        .sum::<f64>()
        / cells;
    let p_e: f64 = (0..NUM_GRADES)
        .map(|j| {
            let pj = table.iter().map(|row| row[j]).sum::<u64>() as f64 / (cells * nf);
            pj * pj
        })
        .sum();
    if p_e >= 1.0 {
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Per-cell category counts over all raters of `session`, for cells rated
/// by every rater of that session.
pub fn rating_counts(table: &RatingTable, session: u8) -> Result<Vec<[u64; NUM_GRADES]>> {
    let mut per_cell: std::collections::BTreeMap<&str, [u64; NUM_GRADES]> = Default::default();
    for r in table.records.iter().filter(|r| r.session == session) {
        per_cell.entry(r.cell_id.as_str()).or_default()[r.grade.index()] += 1;
    }
    if per_cell.is_empty() {
        return Err(Error::invalid(format!("no ratings in session {session}")));
    }
    Ok(per_cell.into_values().collect())
}

/// Fraction of cells graded like the reference, and per-grade F1
/// (`None` for grades absent from the reference, 0 when undefined).
pub fn concordance_and_f1(
    table: &RatingTable,
    rater: &str,
    session: u8,
) -> Result<(f64, [Option<f64>; NUM_GRADES])> {
    let m = confusion(table, rater, session)?;
    Ok(concordance_f1_from(&m))
}

pub fn concordance_f1_from(m: &ConfusionMatrix) -> (f64, [Option<f64>; NUM_GRADES]) {
    let concordance = m.diagonal() as f64 / m.total() as f64;
    let f1 = std::array::from_fn(|g| {
        let tp = m.0[g][g] as f64;
        let reference: u64 = m.0[g].iter().sum();
        let assigned: u64 = (0..NUM_GRADES).map(|r| m.0[r][g]).sum();
        if reference == 0 {
            return None;
        }
        if assigned == 0 || tp == 0.0 {
            return Some(0.0);
        }
        let p = tp / assigned as f64;
        let r = tp / reference as f64;
        Some(2.0 * p * r / (p + r))
    });
    (concordance, f1)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RaterAgreement {
    pub rater: String,
    pub concordance: f64,
    pub cohen_kappa: f64,
    pub f1_per_grade: [Option<f64>; NUM_GRADES],
    pub score_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgreementReport {
    pub session: u8,
    /// Means over raters.
    pub concordance: f64,
    pub cohen_kappa: f64,
    pub fleiss_kappa: Option<f64>,
    pub f1_per_grade: [Option<f64>; NUM_GRADES],
    pub mean_score_error: f64,
    pub raters: Vec<RaterAgreement>,
    /// Cohen's kappa between a rater's two sessions, where both exist.
    pub intra_rater_kappa: Vec<(String, f64)>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Each rater against the reference for one session, Fleiss' kappa across
/// raters, and intra-rater consistency across sessions.
pub fn agreement_report(table: &RatingTable, session: u8) -> Result<AgreementReport> {
    let mut raters = Vec::new();
    for rater in table.raters() {
        let Ok(pairs) = paired(table, rater, session) else {
            continue;
        };
        let (reference, assigned): (Vec<Grade>, Vec<Grade>) = pairs.iter().copied().unzip();
        let m = confusion(table, rater, session)?;
        let (concordance, f1) = concordance_f1_from(&m);
        let ths =
            |g: &[Grade]| 100.0 * g.iter().map(|x| x.value() as f64).sum::<f64>() / g.len() as f64;
        raters.push(RaterAgreement {
            rater: rater.to_string(),
            concordance,
            cohen_kappa: cohen_kappa(&reference, &assigned)?,
            f1_per_grade: f1,
            score_error: (ths(&assigned) - ths(&reference)).abs(),
        });
    }
    if raters.is_empty() {
        return Err(Error::invalid(format!("no ratings in session {session}")));
    }
    let f1_per_grade = std::array::from_fn(|g| {
        let vals: Vec<f64> = raters.iter().filter_map(|r| r.f1_per_grade[g]).collect();
        (!vals.is_empty()).then(|| mean(vals.into_iter()))
    });
    let fleiss_kappa = if raters.len() >= 2 {
        Some(fleiss_kappa(&rating_counts(table, session)?)?)
    } else {
        None
    };
    let mut intra_rater_kappa = Vec::new();
    for rater in table.raters() {
        if let (Ok(a), Ok(b)) = (table.gradings(rater, 0), table.gradings(rater, 1)) {
            let common: Vec<(Grade, Grade)> = a
                .iter()
                .filter_map(|(cell, ga)| b.get(cell).map(|gb| (*ga, *gb)))
                .collect();
            if !common.is_empty() {
                let (x, y): (Vec<Grade>, Vec<Grade>) = common.into_iter().unzip();
                intra_rater_kappa.push((rater.to_string(), cohen_kappa(&x, &y)?));
            }
        }
    }
    Ok(AgreementReport {
        session,
        concordance: mean(raters.iter().map(|r| r.concordance)),
        cohen_kappa: mean(raters.iter().map(|r| r.cohen_kappa)),
        fleiss_kappa,
        f1_per_grade,
        mean_score_error: mean(raters.iter().map(|r| r.score_error)),
        raters,
        intra_rater_kappa,
    })
}
