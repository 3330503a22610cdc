//! Binary point-grid files.
//!
//! Layout, all integers and floats little-endian:
//!
//! | offset | size      | field                         |
//! |--------|-----------|-------------------------------|
//! | 0      | 8         | magic `C3DPGRID`              |
//! | 8      | 4         | `u32` height `H`              |
//! | 12     | 4         | `u32` width `W`               |
//! | 16     | `12·H·W`  | `H·W` row-major `(x, y, z)` f32 |
//!
//! A point with `z == 0` is a hole. MVTec-3D style organized TIFFs can be
//! exported by reading the `H×W×3` float array (e.g. with `tifffile`) and writing
//! the header followed by `array.astype('<f4').tobytes()`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloudGrid;

pub const POINT_GRID_MAGIC: &[u8; 8] = b"C3DPGRID";
const HEADER_LEN: usize = 16;

pub fn encode_point_grid(cloud: &PointCloudGrid) -> Vec<u8> {
    let (h, w) = (cloud.height(), cloud.width());
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * 12);
    out.extend_from_slice(POINT_GRID_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for (p, &ok) in cloud.points().iter().zip(cloud.valid()) {
        let p = if ok { *p } else { [0.0; 3] };
        for v in p {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// `path` is only used in error messages.
pub fn decode_point_grid(bytes: &[u8], path: &Path) -> Result<PointCloudGrid> {
    if bytes.len() < 8 {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            "file ends inside the magic bytes",
        ));
    }
    if &bytes[..8] != POINT_GRID_MAGIC {
        return Err(Error::format(path, 0, "bad magic, not a point-grid file"));
    }
    let read_u32 = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::format(path, offset as u64, "file ends inside the header"))
    };
    let h = read_u32(8)? as usize;
    let w = read_u32(12)? as usize;
    if h == 0 || w == 0 {
        return Err(Error::format(
            path,
            if h == 0 { 8 } else { 12 },
            format!("empty grid {h}x{w}"),
        ));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(12))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(path, 8, format!("grid {h}x{w} is too large")))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes for a {h}x{w} grid, found {}", bytes.len()),
        ));
    }
    let mut points = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(12).enumerate() {
        let f = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
        let p = [f(0), f(1), f(2)];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                path,
                (HEADER_LEN + 12 * i) as u64,
                "non-finite coordinate",
            ));
        }
        valid.push(p[2] != 0.0);
        points.push(p);
    }
    PointCloudGrid::new(h, w, points, valid)
}

pub fn write_point_grid(path: &Path, cloud: &PointCloudGrid) -> Result<()> {
    fs::write(path, encode_point_grid(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_point_grid(path: &Path) -> Result<PointCloudGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_point_grid(&bytes, path)
}

/// Resamples to `height×width`. Each target cell takes the source cell under its
/// centre when that is valid, otherwise the nearest valid cell within the
/// target cell's footprint; cells with none stay holes.
pub fn resize_point_grid(cloud: &PointCloudGrid, height: usize, width: usize) -> Result<PointCloudGrid> {
    let (sh, sw) = (cloud.height(), cloud.width());
    if (sh, sw) == (height, width) {
        return Ok(cloud.clone());
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("target grid must be non-empty"));
    }
    let (fy, fx) = (sh as f64 / height as f64, sw as f64 / width as f64);
    let (ry, rx) = ((fy / 2.0).ceil() as isize, (fx / 2.0).ceil() as isize);
    let mut points = Vec::with_capacity(height * width);
    let mut valid = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let y = (r as f64 + 0.5) * fy - 0.5;
            let x = (c as f64 + 0.5) * fx - 0.5;
            let (cy, cx) = (
                y.round().clamp(0.0, (sh - 1) as f64) as isize,
                x.round().clamp(0.0, (sw - 1) as f64) as isize,
            );
            let mut best: Option<(f64, [f64; 3])> = None;
            for dy in -ry..=ry {
                for dx in -rx..=rx {
                    let (yy, xx) = (cy + dy, cx + dx);
                    if yy < 0 || xx < 0 || yy >= sh as isize || xx >= sw as isize {
                        continue;
                    }
                    if let Some(p) = cloud.point(yy as usize, xx as usize) {
                        let d = (yy as f64 - y).powi(2) + (xx as f64 - x).powi(2);
                        // strict comparison keeps the first cell in scan order on ties
                        if best.is_none_or(|(bd, _)| d < bd) {
                            best = Some((d, p));
                        }
                    }
                }
            }
            match best {
                Some((_, p)) => {
                    points.push(p);
                    valid.push(true);
                }
                None => {
                    points.push([0.0; 3]);
                    valid.push(false);
                }
            }
        }
    }
    PointCloudGrid::new(height, width, points, valid)
}
