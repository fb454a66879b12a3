//! Binary netpbm image I/O: P6 (RGB) and P5 (grayscale), maxval 255.
//!
//! Readers accept arbitrary whitespace and `#` comments in the header, as
//! the format allows; writers emit a fixed single-spaced header so output
//! is byte-reproducible.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn parse_header<'a>(buf: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    if buf.len() < 2 || &buf[..2] != magic.as_bytes() {
        return Err(Error::format(path, format!("expected {magic} header")));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comment lines.
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && buf[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed header field"));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .expect("digits are ASCII")
            .parse()
            .map_err(|_| Error::format(path, "header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::format(path, format!("degenerate dimensions {w}x{h}")));
    }
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}, need 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing raster separator"));
    }
    pos += 1;
    Ok((w, h, &buf[pos..]))
}

fn read(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, raster) = parse_header(&buf, magic, path)?;
    let need = w * h * channels;
    if raster.len() != need {
        return Err(Error::format(
            path,
            format!("raster has {} bytes, expected {need} for {w}x{h}", raster.len()),
        ));
    }
    Ok((w, h, raster.to_vec()))
}

fn write(path: &Path, magic: &str, w: usize, h: usize, data: &[u8], channels: usize) -> Result<()> {
    if data.len() != w * h * channels {
        return Err(Error::internal(format!(
            "raster has {} bytes, expected {} for {w}x{h}",
            data.len(),
            w * h * channels
        )));
    }
    let mut buf = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(data);
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Interleaved RGB, row-major.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read(path, "P6", 3)
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    write(path, "P6", w, h, rgb, 3)
}

/// Single channel, row-major.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read(path, "P5", 1)
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    write(path, "P5", w, h, gray, 1)
}
