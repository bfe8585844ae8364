//! On-disk formats: community PLY splat layout, the proxy archive with its
//! JSON sidecar, PFM float images, and sRGB conversion.

pub mod pfm;
pub mod ply;
pub mod proxy_archive;

/// sRGB encode a linear value in [0,1] to an 8-bit code.
pub fn linear_to_srgb8(x: f64) -> u8 {
    let x = x.clamp(0.0, 1.0);
    let s = if x <= 0.003_130_8 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    };
    (s * 255.0).round() as u8
}

/// Decode an 8-bit sRGB code to linear.
pub fn srgb8_to_linear(b: u8) -> f64 {
    let s = b as f64 / 255.0;
    if s <= 0.040_45 {
        s / 12.92
    } else {
        ((s + 0.055) / 1.055).powf(2.4)
    }
}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
