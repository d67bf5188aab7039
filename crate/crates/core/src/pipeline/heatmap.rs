use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::TilePlan;
use crate::error::{Error, Result};
use crate::io::ppm;
use crate::model::Detection;
use crate::scoring::{score_of, MAX_SCORE};

/// Side of the square pixel block drawn per tile in `heatmap.ppm`.
pub const BLOCK_PX: u32 = 16;

/// Per-tile score grid, row-major. `None` marks tiles without detections.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Option<f64>>,
}

impl Heatmap {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Heatmap {
            rows,
            cols,
            values: vec![None; rows * cols],
        }
    }

    /// Score of every tile: 100 × mean grade of the detections whose center
    /// lies inside the tile. Tiles overlap, so a cell may count for several.
    pub fn from_detections(plan: &TilePlan, dets: &[Detection]) -> Self {
        let (rows, cols) = plan.grid();
        let mut per_tile: Vec<Vec<&Detection>> = vec![Vec::new(); plan.len()];
        for d in dets {
            let (cx, cy) = d.bbox.center();
            for (i, t) in plan.tiles.iter().enumerate() {
                if t.contains_point(cx, cy) {
                    per_tile[i].push(d);
                }
            }
        }
        let values = per_tile
            .iter()
            .map(|v| score_of(&v.iter().map(|d| d.grade).collect::<Vec<_>>()))
            .collect();
        Heatmap { rows, cols, values }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.cols + col]
    }

    pub fn is_all_empty(&self) -> bool {
        self.values.iter().all(Option::is_none)
    }

    /// Mean over the non-empty tiles of each column.
    pub fn column_means(&self) -> Vec<Option<f64>> {
        (0..self.cols)
            .map(|c| {
                let vals: Vec<f64> = (0..self.rows).filter_map(|r| self.get(r, c)).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "row,col,score")?;
        for r in 0..self.rows {
            for c in 0..self.cols {
                match self.get(r, c) {
                    Some(v) => writeln!(out, "{r},{c},{v}")?,
                    None => writeln!(out, "{r},{c},")?,
                }
            }
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut cells = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let field = |k: usize| {
                rec.get(k)
                    .ok_or_else(|| Error::parse(line, "missing column"))
            };
            let r: usize = field(0)?
                .parse()
                .map_err(|_| Error::parse(line, "bad row"))?;
            let c: usize = field(1)?
                .parse()
                .map_err(|_| Error::parse(line, "bad col"))?;
            let s = field(2)?;
            let v = if s.is_empty() {
                None
            } else {
                Some(
                    s.parse::<f64>()
                        .map_err(|_| Error::parse(line, "bad score"))?,
                )
            };
            cells.push((r, c, v));
        }
        let rows = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let cols = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let mut map = Heatmap::empty(rows, cols);
        for (r, c, v) in cells {
            map.values[r * cols + c] = v;
        }
        Ok(map)
    }

    /// Blue (score 0) to red (score 400); white where empty.
    pub fn color(value: Option<f64>) -> [u8; 3] {
        match value {
            None => [255, 255, 255],
            Some(v) => {
                let t = (v / MAX_SCORE).clamp(0.0, 1.0);
                [
                    (255.0 * t).round() as u8,
                    0,
                    (255.0 * (1.0 - t)).round() as u8,
                ]
            }
        }
    }

    pub fn to_rgb(&self) -> (u32, u32, Vec<u8>) {
        let (w, h) = (self.cols as u32 * BLOCK_PX, self.rows as u32 * BLOCK_PX);
        let mut px = Vec::with_capacity(w as usize * h as usize * 3);
        for y in 0..h {
            for x in 0..w {
                let v = self.get((y / BLOCK_PX) as usize, (x / BLOCK_PX) as usize);
                px.extend_from_slice(&Self::color(v));
            }
        }
        (w, h, px)
    }
}

/// Writes `heatmap.csv` and `heatmap.ppm` into `out_dir`.
pub fn render_heatmap(map: &Heatmap, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("heatmap.csv");
    let mut w = BufWriter::new(File::create(&csv_path)?);
    map.write_csv(&mut w)?;
    w.flush()?;
    let ppm_path = out_dir.join("heatmap.ppm");
    let (width, height, px) = map.to_rgb();
    ppm::write_file(&ppm_path, width, height, &px)?;
    Ok((csv_path, ppm_path))
}
