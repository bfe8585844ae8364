//! PFM (portable float map) writer/reader for exact linear-image regression
//! tests. Color variant, little-endian (negative scale), rows bottom-up.

use std::path::Path;

use crate::error::{Error, Result};
use crate::real::{lit, Real};

/// Write an H×W×3 linear image.
pub fn write<T: Real>(image: &[T], width: usize, height: usize, path: &Path) -> Result<()> {
    if image.len() != width * height * 3 {
        return Err(Error::contract("pfm", "image length mismatch"));
    }
    let mut buf = Vec::with_capacity(32 + image.len() * 4);
    buf.extend_from_slice(format!("PF\n{width} {height}\n-1.0\n").as_bytes());
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..3 {
                let v = image[(y * width + x) * 3 + c].to_f64() as f32;
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    super::atomic_write(path, &buf)?;
    Ok(())
}

/// Read an H×W×3 image written by [`write`].
pub fn read<T: Real>(path: &Path) -> Result<(Vec<T>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::format(path.display(), msg);
    // three newline-terminated header tokens
    let mut pos = 0usize;
    let mut lines = Vec::new();
    for _ in 0..3 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        lines.push(
            std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| bad("non-utf8 header"))?
                .to_string(),
        );
        pos += end + 1;
    }
    if lines[0] != "PF" {
        return Err(bad("not a color PFM"));
    }
    let dims: Vec<usize> = lines[1]
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad("bad dimensions")))
        .collect::<Result<_>>()?;
    let (width, height) = (dims[0], dims[1]);
    let scale: f64 = lines[2].parse().map_err(|_| bad("bad scale"))?;
    if scale >= 0.0 {
        return Err(bad("big-endian PFM unsupported"));
    }
    let need = width * height * 3 * 4;
    if bytes.len() - pos < need {
        return Err(bad("truncated pixel data"));
    }
    let mut image = vec![T::ZERO; width * height * 3];
    let mut off = pos;
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..3 {
                let v = f32::from_le_bytes([
                    bytes[off],
                    bytes[off + 1],
                    bytes[off + 2],
                    bytes[off + 3],
                ]);
                image[(y * width + x) * 3 + c] = lit(v as f64);
                off += 4;
            }
        }
    }
    Ok((image, width, height))
}
