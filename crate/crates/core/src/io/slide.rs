//! Tiled slide storage: a `manifest.json` next to a directory of PPM tiles.
//!
//! Tiles that are absent on disk are uniform white background. Regions are
//! read row segment by row segment directly into the output patch, so no
//! full tile or full slide buffer is ever materialized.

use std::fmt;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ppm;
use crate::error::{Error, Result};
use crate::model::{BoundingBox, SlideMeta, Staining};

pub const MANIFEST_MAGIC: &str = "eiph-tiles/1";
pub const DEFAULT_TILE_PATTERN: &str = "tiles/{col}_{row}.ppm";
pub const BACKGROUND: [u8; 3] = [255, 255, 255];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileFormat {
    Ppm,
    Png,
}

/// On-disk `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub magic: String,
    pub width: u64,
    pub height: u64,
    pub tile_size: u32,
    pub mpp: f64,
    pub staining: Staining,
    pub format: TileFormat,
    pub tile_pattern: String,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.magic != MANIFEST_MAGIC {
            return Err(Error::invalid(format!(
                "manifest magic {:?}, expected {MANIFEST_MAGIC:?}",
                self.magic
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(
                "manifest: slide dimensions must be positive",
            ));
        }
        if self.tile_size == 0 {
            return Err(Error::invalid("manifest: tile_size must be positive"));
        }
        if !(self.mpp > 0.0) {
            return Err(Error::invalid("manifest: mpp must be positive"));
        }
        if !self.tile_pattern.contains("{col}") || !self.tile_pattern.contains("{row}") {
            return Err(Error::invalid(
                "manifest: tile_pattern needs {col} and {row}",
            ));
        }
        Ok(())
    }

    pub fn tile_path(&self, col: u64, row: u64) -> String {
        self.tile_pattern
            .replace("{col}", &col.to_string())
            .replace("{row}", &row.to_string())
    }
}

/// Live and peak byte counts of pixel buffers handed out by a slide.
#[derive(Clone, Default)]
pub struct PixelAccounting {
    inner: Arc<AccountingInner>,
}

#[derive(Default)]
struct AccountingInner {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl PixelAccounting {
    pub fn current(&self) -> usize {
        self.inner.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.inner.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.inner.peak.store(self.current(), Ordering::SeqCst);
    }

    fn charge(&self, bytes: usize) -> Ticket {
        let now = self.inner.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.inner.peak.fetch_max(now, Ordering::SeqCst);
        Ticket {
            owner: self.inner.clone(),
            bytes,
        }
    }
}

impl fmt::Debug for PixelAccounting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PixelAccounting")
            .field("current", &self.current())
            .field("peak", &self.peak())
            .finish()
    }
}

struct Ticket {
    owner: Arc<AccountingInner>,
    bytes: usize,
}

impl Drop for Ticket {
    fn drop(&mut self) {
        self.owner.current.fetch_sub(self.bytes, Ordering::SeqCst);
    }
}

/// An RGB raster cut from a slide; `origin` is in slide pixels and may be
/// negative when the requested rect hangs over the slide edge.
pub struct Patch {
    pub origin: (i64, i64),
    pub width: u32,
    pub height: u32,
    /// Row-major RGB, `width * height * 3` bytes.
    pub pixels: Vec<u8>,
    _ticket: Option<Ticket>,
}

impl Patch {
    pub fn new(origin: (i64, i64), width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(Error::invalid(format!(
                "patch buffer has {} bytes, expected {}",
                pixels.len(),
                width as usize * height as usize * 3
            )));
        }
        Ok(Patch {
            origin,
            width,
            height,
            pixels,
            _ticket: None,
        })
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        ppm::write_file(path, self.width, self.height, &self.pixels)
    }
}

impl PartialEq for Patch {
    fn eq(&self, other: &Self) -> bool {
        self.origin == other.origin
            && self.width == other.width
            && self.height == other.height
            && self.pixels == other.pixels
    }
}

impl fmt::Debug for Patch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Patch")
            .field("origin", &self.origin)
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

/// Read-only handle to a tiled slide. Safe to share between threads.
#[derive(Debug, Clone)]
pub struct SlideSource {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub meta: SlideMeta,
    /// Directory that `tile_pattern` is relative to.
    pub tile_dir: PathBuf,
    accounting: PixelAccounting,
}

impl SlideSource {
    /// Opens `path`, which may be a manifest file or the directory holding
    /// `manifest.json`. The slide id is the directory name.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.to_path_buf()
        };
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
        manifest.validate()?;
        if manifest.format == TileFormat::Png {
            return Err(Error::invalid(
                "manifest: png tiles are not supported by this build, use ppm",
            ));
        }
        let tile_dir = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let id = tile_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "slide".to_string());
        let meta = SlideMeta {
            id,
            width: manifest.width,
            height: manifest.height,
            staining: manifest.staining,
            mpp: manifest.mpp,
        };
        Ok(SlideSource {
            manifest_path,
            manifest,
            meta,
            tile_dir,
            accounting: PixelAccounting::default(),
        })
    }

    pub fn tile_size(&self) -> u32 {
        self.manifest.tile_size
    }

    pub fn tile_format(&self) -> TileFormat {
        self.manifest.format
    }

    pub fn grid(&self) -> (u64, u64) {
        let ts = self.tile_size() as u64;
        (self.meta.width.div_ceil(ts), self.meta.height.div_ceil(ts))
    }

    pub fn tile_file(&self, col: u64, row: u64) -> PathBuf {
        self.tile_dir.join(self.manifest.tile_path(col, row))
    }

    /// Expected pixel dimensions of tile `(col, row)`; edge tiles are clipped.
    pub fn tile_dims(&self, col: u64, row: u64) -> (u32, u32) {
        let ts = self.tile_size() as u64;
        let w = ts.min(self.meta.width - col * ts);
        let h = ts.min(self.meta.height - row * ts);
        (w as u32, h as u32)
    }

    /// Byte accounting for every patch this slide has produced.
    pub fn accounting(&self) -> &PixelAccounting {
        &self.accounting
    }

    /// Reads the pixel-aligned hull of `rect`. Area outside the slide or
    /// covered by absent tiles is white.
    pub fn read_region(&self, rect: &BoundingBox) -> Result<Patch> {
        let x0 = rect.x.floor() as i64;
        let y0 = rect.y.floor() as i64;
        let x1 = rect.right().ceil() as i64;
        let y1 = rect.bottom().ceil() as i64;
        if !(x1 > x0 && y1 > y0) || !rect.is_finite() {
            return Err(Error::invalid("read_region: empty rect"));
        }
        let (sw, sh) = (self.meta.width as i64, self.meta.height as i64);
        let (cx0, cy0, cx1, cy1) = (x0.max(0), y0.max(0), x1.min(sw), y1.min(sh));
        if cx1 <= cx0 || cy1 <= cy0 {
            return Err(Error::invalid(format!(
                "read_region: rect ({}, {}, {}, {}) lies outside the slide",
                rect.x, rect.y, rect.w, rect.h
            )));
        }
        let (pw, ph) = ((x1 - x0) as u32, (y1 - y0) as u32);
        let bytes = pw as usize * ph as usize * 3;
        let ticket = self.accounting.charge(bytes);
        let mut pixels = vec![255u8; bytes];

        let ts = self.tile_size() as i64;
        let patch_stride = pw as usize * 3;
        for row in (cy0 / ts)..=((cy1 - 1) / ts) {
            for col in (cx0 / ts)..=((cx1 - 1) / ts) {
                let path = self.tile_file(col as u64, row as u64);
                let mut file = match File::open(&path) {
                    Ok(f) => f,
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                    Err(e) => return Err(e.into()),
                };
                let tile_err = |message: String| Error::Tile {
                    path: path.clone(),
                    message,
                };
                let header = ppm::read_header(&mut file).map_err(|e| tile_err(e.to_string()))?;
                let expected = self.tile_dims(col as u64, row as u64);
                if (header.width, header.height) != expected {
                    return Err(tile_err(format!(
                        "is {}x{}, expected {}x{}",
                        header.width, header.height, expected.0, expected.1
                    )));
                }
                let (tx0, ty0) = (col * ts, row * ts);
                let ix0 = cx0.max(tx0);
                let ix1 = cx1.min(tx0 + header.width as i64);
                let iy0 = cy0.max(ty0);
                let iy1 = cy1.min(ty0 + header.height as i64);
                let seg = (ix1 - ix0) as usize * 3;
                let full_rows = ix0 == tx0 && ix1 == tx0 + header.width as i64;
                for y in iy0..iy1 {
                    let src = header.data_offset
                        + (((y - ty0) * header.width as i64 + (ix0 - tx0)) * 3) as u64;
                    let dst = (y - y0) as usize * patch_stride + (ix0 - x0) as usize * 3;
                    // contiguous rows need only one seek
                    if !full_rows || y == iy0 {
                        file.seek(SeekFrom::Start(src))?;
                    }
                    file.read_exact(&mut pixels[dst..dst + seg])
                        .map_err(|e| tile_err(e.to_string()))?;
                }
            }
        }
        Ok(Patch {
            origin: (x0, y0),
            width: pw,
            height: ph,
            pixels,
            _ticket: Some(ticket),
        })
    }
}

/// Writes `manifest.json` into `dir`.
pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<PathBuf> {
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Slide of 5x3 pixels in 2x2 tiles where pixel (x, y) = (x, y, 7); the
    /// tile at (1, 0) is left absent.
    fn tiny(dir: &Path) -> SlideSource {
        let manifest = Manifest {
            magic: MANIFEST_MAGIC.into(),
            width: 5,
            height: 3,
            tile_size: 2,
            mpp: 0.25,
            staining: Staining::Prussian,
            format: TileFormat::Ppm,
            tile_pattern: DEFAULT_TILE_PATTERN.into(),
        };
        std::fs::create_dir_all(dir.join("tiles")).unwrap();
        write_manifest(dir, &manifest).unwrap();
        for row in 0..2u64 {
            for col in 0..3u64 {
                if (col, row) == (1, 0) {
                    continue;
                }
                let w = 2.min(5 - col * 2) as u32;
                let h = 2.min(3 - row * 2) as u32;
                let mut px = Vec::new();
                for y in 0..h {
                    for x in 0..w {
                        px.extend_from_slice(&[
                            (col * 2) as u8 + x as u8,
                            (row * 2) as u8 + y as u8,
                            7,
                        ]);
                    }
                }
                ppm::write_file(&dir.join(manifest.tile_path(col, row)), w, h, &px).unwrap();
            }
        }
        SlideSource::open(dir).unwrap()
    }

    #[test]
    fn reads_inside_single_tile() {
        let dir = tempfile::tempdir().unwrap();
        let slide = tiny(dir.path());
        let p = slide
            .read_region(&BoundingBox::new(4.0, 0.0, 1.0, 2.0))
            .unwrap();
        assert_eq!(p.pixels, vec![4, 0, 7, 4, 1, 7]);
    }

    #[test]
    fn absent_tile_and_outside_area_are_white() {
        let dir = tempfile::tempdir().unwrap();
        let slide = tiny(dir.path());
        let p = slide
            .read_region(&BoundingBox::new(2.0, 0.0, 2.0, 2.0))
            .unwrap();
        assert!(p.pixels.iter().all(|&b| b == 255));
        let p = slide
            .read_region(&BoundingBox::new(4.0, 2.0, 2.0, 2.0))
            .unwrap();
        assert_eq!(p.pixel(0, 0), [4, 2, 7]);
        assert_eq!(p.pixel(1, 0), BACKGROUND);
        assert_eq!(p.pixel(0, 1), BACKGROUND);
    }

    #[test]
    fn rect_outside_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let slide = tiny(dir.path());
        assert!(slide
            .read_region(&BoundingBox::new(5.0, 0.0, 2.0, 2.0))
            .is_err());
    }

    #[test]
    fn wrong_tile_dims_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let slide = tiny(dir.path());
        ppm::write_file(&slide.tile_file(0, 0), 1, 1, &[0, 0, 0]).unwrap();
        let err = slide
            .read_region(&BoundingBox::new(0.0, 0.0, 1.0, 1.0))
            .unwrap_err();
        assert!(err.to_string().contains("expected 2x2"), "{err}");
    }

    #[test]
    fn accounting_tracks_live_patches() {
        let dir = tempfile::tempdir().unwrap();
        let slide = tiny(dir.path());
        let a = slide
            .read_region(&BoundingBox::new(0.0, 0.0, 2.0, 2.0))
            .unwrap();
        let b = slide
            .read_region(&BoundingBox::new(0.0, 0.0, 1.0, 1.0))
            .unwrap();
        assert_eq!(slide.accounting().current(), 12 + 3);
        drop(a);
        drop(b);
        assert_eq!(slide.accounting().current(), 0);
        assert_eq!(slide.accounting().peak(), 15);
    }

    #[test]
    fn manifest_field_names() {
        let m = Manifest {
            magic: MANIFEST_MAGIC.into(),
            width: 10,
            height: 20,
            tile_size: 4,
            mpp: 0.25,
            staining: Staining::Turnbull,
            format: TileFormat::Ppm,
            tile_pattern: DEFAULT_TILE_PATTERN.into(),
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "format",
                "height",
                "magic",
                "mpp",
                "staining",
                "tile_pattern",
                "tile_size",
                "width"
            ]
        );
        assert_eq!(v["staining"], "turnbull");
        assert_eq!(v["format"], "ppm");
    }
}
