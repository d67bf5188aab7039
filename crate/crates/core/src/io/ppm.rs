//! Binary PPM (P6, maxval 255) codec.
//!
//! The header is parsed separately from the raster so that tiles can be read
//! row segment by row segment straight from disk without decoding the whole
//! file.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PpmHeader {
    pub width: u32,
    pub height: u32,
    /// Byte offset of the first pixel.
    pub data_offset: u64,
}

impl PpmHeader {
    pub fn data_len(&self) -> u64 {
        self.width as u64 * self.height as u64 * 3
    }
}

fn bad(msg: &str) -> Error {
    Error::invalid(format!("ppm: {msg}"))
}

/// Parses a P6 header from the start of `bytes`.
///
/// `bytes` only needs to cover the header; 512 bytes is always enough for
/// files this crate writes.
pub fn parse_header(bytes: &[u8]) -> Result<PpmHeader> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if !b.is_ascii_digit() {
                break;
            }
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a decimal number"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| bad("number too large"))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("truncated header")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if width == 0 || height == 0 || width > u32::MAX as u64 || height > u32::MAX as u64 {
        return Err(bad("invalid dimensions"));
    }
    Ok(PpmHeader {
        width: width as u32,
        height: height as u32,
        data_offset: pos as u64,
    })
}

/// Reads and validates the header of an open file, including the raster length.
pub fn read_header(file: &mut File) -> Result<PpmHeader> {
    let mut buf = [0u8; 512];
    file.seek(SeekFrom::Start(0))?;
    let mut filled = 0;
    while filled < buf.len() {
        let n = file.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    let header = parse_header(&buf[..filled])?;
    let len = file.metadata()?.len();
    if len < header.data_offset + header.data_len() {
        return Err(bad("truncated raster"));
    }
    Ok(header)
}

pub fn encode(width: u32, height: u32, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width as usize * height as usize * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Decodes a whole P6 image into `(width, height, rgb)`.
pub fn decode(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>)> {
    let h = parse_header(bytes)?;
    let start = h.data_offset as usize;
    let end = start + h.data_len() as usize;
    if bytes.len() < end {
        return Err(bad("truncated raster"));
    }
    Ok((h.width, h.height, bytes[start..end].to_vec()))
}

pub fn write_file(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width as usize * height as usize * 3);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    w.flush()?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    decode(&std::fs::read(path)?)
}
