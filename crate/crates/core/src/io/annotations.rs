//! JSON-lines annotation and detection files.
//!
//! The first line is a slide header,
//! `{"slide":{"id":..,"width":..,"height":..,"staining":"prussian","mpp":0.25}}`,
//! followed by one cell per line: `{"id":1,"x":0,"y":0,"w":70,"h":70,"grade":2}`.
//! Detection files use the same shape plus `probs`, `score` and `confidence`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{
    validate_annotation_set, AnnotationSet, BoundingBox, CellAnnotation, ContinuousGrade,
    Detection, Grade, SlideMeta, Staining, NUM_GRADES, REFERENCE_MPP,
};

#[derive(Serialize, Deserialize)]
struct Header {
    slide: SlideMeta,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CellRecord {
    id: u64,
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    grade: i64,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    id: u64,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    grade: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<[f64; NUM_GRADES]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
}

fn parse_grade(raw: i64, line: usize) -> Result<Grade> {
    u8::try_from(raw)
        .ok()
        .and_then(|g| Grade::new(g).ok())
        .ok_or_else(|| Error::parse(line, "grade out of range"))
}

/// Optional header plus `(line number, value)` records.
type RawLines = (Option<SlideMeta>, Vec<(usize, Value)>);

/// Splits a JSONL stream into an optional header and numbered record values.
fn read_lines<R: BufRead>(reader: R) -> Result<RawLines> {
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| Error::parse(lineno, format!("invalid json ({e})")))?;
        if value.get("slide").is_some() {
            if header.is_some() || !records.is_empty() {
                return Err(Error::parse(lineno, "slide header must be the first line"));
            }
            let h: Header = serde_json::from_value(value)
                .map_err(|e| Error::parse(lineno, format!("invalid slide header ({e})")))?;
            header = Some(h.slide);
        } else {
            records.push((lineno, value));
        }
    }
    Ok((header, records))
}

/// Header-less files get a slide just large enough to hold their boxes.
fn inferred_meta(name: &str, boxes: impl Iterator<Item = BoundingBox>) -> SlideMeta {
    let (mut w, mut h) = (1u64, 1u64);
    for b in boxes {
        w = w.max(b.right().ceil() as u64);
        h = h.max(b.bottom().ceil() as u64);
    }
    SlideMeta {
        id: name.to_string(),
        width: w,
        height: h,
        staining: Staining::Prussian,
        mpp: REFERENCE_MPP,
    }
}

/// Parses an annotation stream and checks every set invariant; the first
/// violation is returned as the error.
pub fn parse_annotations<R: BufRead>(reader: R, name: &str) -> Result<AnnotationSet> {
    let set = parse_annotations_unchecked(reader, name)?;
    if let Some(v) = validate_annotation_set(&set).into_iter().next() {
        return Err(Error::Invalid(v.to_string()));
    }
    Ok(set)
}

/// Parses records and grades but leaves set invariants (bounds, unique ids)
/// to the caller; for linting.
pub fn parse_annotations_unchecked<R: BufRead>(reader: R, name: &str) -> Result<AnnotationSet> {
    let (header, records) = read_lines(reader)?;
    let mut cells = Vec::with_capacity(records.len());
    for (line, value) in records {
        let r: CellRecord = serde_json::from_value(value)
            .map_err(|e| Error::parse(line, format!("invalid cell record ({e})")))?;
        let grade = parse_grade(r.grade, line)?;
        cells.push(CellAnnotation {
            id: r.id,
            bbox: BoundingBox::new(r.x as f64, r.y as f64, r.w as f64, r.h as f64),
            grade,
        });
    }
    let slide = header.unwrap_or_else(|| inferred_meta(name, cells.iter().map(|c| c.bbox)));
    Ok(AnnotationSet::new(slide, cells))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "slide".into())
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    parse_annotations(BufReader::new(File::open(path)?), &file_stem(path))
}

pub fn load_annotations_unchecked(path: &Path) -> Result<AnnotationSet> {
    parse_annotations_unchecked(BufReader::new(File::open(path)?), &file_stem(path))
}

/// Writes `set` as JSONL. Box coordinates are rounded to whole pixels.
pub fn write_annotations<W: Write>(set: &AnnotationSet, mut out: W) -> Result<()> {
    serde_json::to_writer(
        &mut out,
        &Header {
            slide: set.slide.clone(),
        },
    )?;
    out.write_all(b"\n")?;
    for c in &set.cells {
        let rec = serde_json::json!({
            "id": c.id,
            "x": c.bbox.x.round() as i64,
            "y": c.bbox.y.round() as i64,
            "w": c.bbox.w.round() as i64,
            "h": c.bbox.h.round() as i64,
            "grade": c.grade.value(),
        });
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_annotations(set, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes detections with sequential ids starting at 1.
pub fn write_detections<W: Write>(slide: &SlideMeta, dets: &[Detection], mut out: W) -> Result<()> {
    serde_json::to_writer(
        &mut out,
        &Header {
            slide: slide.clone(),
        },
    )?;
    out.write_all(b"\n")?;
    for (i, d) in dets.iter().enumerate() {
        let rec = DetectionRecord {
            id: i as u64 + 1,
            x: d.bbox.x,
            y: d.bbox.y,
            w: d.bbox.w,
            h: d.bbox.h,
            grade: d.grade.value() as i64,
            probs: Some(d.class_probs),
            score: Some(d.score.value()),
            confidence: Some(d.confidence),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_detections(slide: &SlideMeta, dets: &[Detection], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_detections(slide, dets, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a detection file. Plain annotation records are accepted too and
/// become certain detections with confidence 1.
pub fn parse_detections<R: BufRead>(reader: R, name: &str) -> Result<(SlideMeta, Vec<Detection>)> {
    let (header, records) = read_lines(reader)?;
    let mut dets = Vec::with_capacity(records.len());
    for (line, value) in records {
        let r: DetectionRecord = serde_json::from_value(value)
            .map_err(|e| Error::parse(line, format!("invalid detection record ({e})")))?;
        let grade = parse_grade(r.grade, line)?;
        let bbox = BoundingBox::new(r.x, r.y, r.w, r.h);
        let confidence = r.confidence.unwrap_or(1.0);
        let det = match r.probs {
            Some(probs) => {
                let score = ContinuousGrade::new(r.score.unwrap_or(grade.value() as f64))
                    .map_err(|e| Error::parse(line, e.to_string()))?;
                let d = Detection::new(bbox, probs, confidence, score)
                    .map_err(|e| Error::parse(line, e.to_string()))?;
                if d.grade != grade {
                    return Err(Error::parse(line, "grade is not the argmax of probs"));
                }
                d
            }
            None => {
                let mut d = Detection::certain(bbox, grade, confidence);
                if let Some(s) = r.score {
                    d.score =
                        ContinuousGrade::new(s).map_err(|e| Error::parse(line, e.to_string()))?;
                }
                d
            }
        };
        dets.push(det);
    }
    let slide = header.unwrap_or_else(|| inferred_meta(name, dets.iter().map(|d| d.bbox)));
    Ok((slide, dets))
}

pub fn load_detections(path: &Path) -> Result<(SlideMeta, Vec<Detection>)> {
    parse_detections(BufReader::new(File::open(path)?), &file_stem(path))
}
