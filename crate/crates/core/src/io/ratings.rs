//! Observer rating tables: `cell_id,rater_id,session,grade` records plus a
//! `cell_id,grade` reference file.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Grade;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub cell_id: String,
    pub rater_id: String,
    pub session: u8,
    pub grade: Grade,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RatingTable {
    pub records: Vec<Rating>,
    pub reference: BTreeMap<String, Grade>,
}

impl RatingTable {
    /// Enforces `(cell, rater, session)` uniqueness, sessions in {0, 1} and
    /// that every rated cell has a reference grade.
    pub fn new(records: Vec<Rating>, reference: BTreeMap<String, Grade>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.session > 1 {
                return Err(Error::invalid(format!(
                    "session {} for ({}, {}) must be 0 or 1",
                    r.session, r.cell_id, r.rater_id
                )));
            }
            if !seen.insert((r.cell_id.as_str(), r.rater_id.as_str(), r.session)) {
                return Err(Error::invalid(format!(
                    "duplicate rating ({}, {}, {})",
                    r.cell_id, r.rater_id, r.session
                )));
            }
            if !reference.contains_key(&r.cell_id) {
                return Err(Error::invalid(format!(
                    "cell {} has no reference grade",
                    r.cell_id
                )));
            }
        }
        Ok(RatingTable { records, reference })
    }

    pub fn raters(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.rater_id.as_str()).collect()
    }

    pub fn sessions(&self) -> BTreeSet<u8> {
        self.records.iter().map(|r| r.session).collect()
    }

    /// Grades given by `rater` in `session`, keyed by cell id.
    pub fn gradings(&self, rater: &str, session: u8) -> Result<BTreeMap<&str, Grade>> {
        let out: BTreeMap<&str, Grade> = self
            .records
            .iter()
            .filter(|r| r.rater_id == rater && r.session == session)
            .map(|r| (r.cell_id.as_str(), r.grade))
            .collect();
        if out.is_empty() {
            return Err(Error::invalid(format!(
                "no ratings for rater {rater} in session {session}"
            )));
        }
        Ok(out)
    }

    /// Reference-grade marginals over the cells that were rated.
    pub fn reference_counts(&self) -> [u64; 5] {
        let mut counts = [0u64; 5];
        for g in self.reference.values() {
            counts[g.index()] += 1;
        }
        counts
    }
}

#[derive(Deserialize)]
struct RatingRow {
    cell_id: String,
    rater_id: String,
    session: i64,
    grade: i64,
}

#[derive(Serialize, Deserialize)]
struct ReferenceRow {
    cell_id: String,
    grade: i64,
}

fn grade_at(raw: i64, line: usize) -> Result<Grade> {
    u8::try_from(raw)
        .ok()
        .and_then(|g| Grade::new(g).ok())
        .ok_or_else(|| Error::parse(line, "grade out of range"))
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

pub fn parse_reference<R: Read>(reader: R) -> Result<BTreeMap<String, Grade>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let row: ReferenceRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| Error::parse(line, e.to_string()))?;
        let grade = grade_at(row.grade, line)?;
        if out.insert(row.cell_id.clone(), grade).is_some() {
            return Err(Error::parse(
                line,
                format!("duplicate reference cell {}", row.cell_id),
            ));
        }
    }
    Ok(out)
}

pub fn parse_ratings<R: Read, S: Read>(ratings: R, reference: S) -> Result<RatingTable> {
    let reference = parse_reference(reference)?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(ratings);
    let headers = rdr.headers()?.clone();
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let row: RatingRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| Error::parse(line, e.to_string()))?;
        let session = u8::try_from(row.session)
            .ok()
            .filter(|s| *s <= 1)
            .ok_or_else(|| Error::parse(line, "session must be 0 or 1"))?;
        records.push(Rating {
            cell_id: row.cell_id,
            rater_id: row.rater_id,
            session,
            grade: grade_at(row.grade, line)?,
        });
    }
    RatingTable::new(records, reference)
}

pub fn load_ratings(ratings: &Path, reference: &Path) -> Result<RatingTable> {
    parse_ratings(
        std::fs::File::open(ratings)?,
        std::fs::File::open(reference)?,
    )
}

pub fn write_ratings<W: Write, V: Write>(
    table: &RatingTable,
    ratings: W,
    reference: V,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(ratings);
    w.write_record(["cell_id", "rater_id", "session", "grade"])?;
    for r in &table.records {
        w.write_record([
            r.cell_id.as_str(),
            r.rater_id.as_str(),
            &r.session.to_string(),
            &r.grade.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(reference);
    for (cell_id, g) in &table.reference {
        w.serialize(ReferenceRow {
            cell_id: cell_id.clone(),
            grade: g.value() as i64,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_ratings(table: &RatingTable, ratings: &Path, reference: &Path) -> Result<()> {
    write_ratings(
        table,
        std::fs::File::create(ratings)?,
        std::fs::File::create(reference)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const REF: &str = "cell_id,grade\nc1,0\nc2,3\n";

    #[test]
    fn two_raters_two_cells() {
        let ratings =
            "cell_id,rater_id,session,grade\nc1,r1,0,0\nc2,r1,0,3\nc1,r2,0,1\nc2,r2,0,3\n";
        let t = parse_ratings(ratings.as_bytes(), REF.as_bytes()).unwrap();
        assert_eq!(t.records.len(), 4);
        assert_eq!(t.raters().len(), 2);
        assert_eq!(t.gradings("r2", 0).unwrap()["c1"].value(), 1);
    }

    #[test]
    fn duplicate_triple_is_named() {
        let ratings = "cell_id,rater_id,session,grade\nc1,r1,0,0\nc1,r1,0,2\n";
        let err = parse_ratings(ratings.as_bytes(), REF.as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "duplicate rating (c1, r1, 0)");
    }

    #[test]
    fn unknown_cell_is_rejected() {
        let ratings = "cell_id,rater_id,session,grade\nc9,r1,0,0\n";
        let err = parse_ratings(ratings.as_bytes(), REF.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("c9"), "{err}");
    }

    #[test]
    fn bad_grade_and_session_carry_line_numbers() {
        let ratings = "cell_id,rater_id,session,grade\nc1,r1,0,0\nc2,r1,0,7\n";
        let err = parse_ratings(ratings.as_bytes(), REF.as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "grade out of range, line 3");
        let ratings = "cell_id,rater_id,session,grade\nc1,r1,2,0\n";
        assert!(parse_ratings(ratings.as_bytes(), REF.as_bytes()).is_err());
    }

    #[test]
    fn write_then_parse() {
        let ratings = "cell_id,rater_id,session,grade\nc1,r1,0,0\nc2,r1,1,3\n";
        let t = parse_ratings(ratings.as_bytes(), REF.as_bytes()).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_ratings(&t, &mut a, &mut b).unwrap();
        assert_eq!(parse_ratings(&a[..], &b[..]).unwrap(), t);
    }
}
