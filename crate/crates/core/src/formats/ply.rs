//! Gaussian splat PLY export/import in the community viewer layout:
//! binary little-endian, per-vertex float properties
//! `x, y, z, f_dc_0..2, opacity, scale_0..2, rot_0..3`,
//! where `f_dc` holds the zeroth SH coefficient ((c − 0.5)/C0), `opacity`
//! the pre-activation logit, and `scale` the log of the metric scale.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::avatar::math::quat_identity;
use crate::avatar::GaussianSet;
use crate::error::{Error, Result};
use crate::real::{lit, Real};

/// Zeroth spherical-harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const PROPS: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

/// Export a canonical Gaussian set. Positions are the effective
/// anchor + offset coordinates; conversions run in f64 so a template-aware
/// import reproduces the attributes exactly.
pub fn export<T: Real>(g: &GaussianSet<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(128 + g.len() * 14 * 4);
    write!(
        buf,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        g.len()
    )?;
    for p in PROPS {
        writeln!(buf, "property float {p}")?;
    }
    writeln!(buf, "end_header")?;
    for i in 0..g.len() {
        let pos = g.position(i);
        let mut row = [0f32; 14];
        for a in 0..3 {
            row[a] = pos[a].to_f64() as f32;
            row[3 + a] = ((g.colors[i][a].to_f64() - 0.5) / SH_C0) as f32;
            row[7 + a] = g.scales[i][a].to_f64().ln() as f32;
        }
        let o = g.opacities[i].to_f64();
        row[6] = (o / (1.0 - o)).ln() as f32;
        for a in 0..4 {
            row[10 + a] = g.rotations[i][a].to_f64() as f32;
        }
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    super::atomic_write(path, &buf)?;
    Ok(())
}

/// Import a splat PLY. With `template` anchors the canonical
/// anchor/offset split is reconstructed (offset = position − anchor for
/// point i at vertex i mod V); without, positions become anchors with zero
/// offsets (view-only).
pub fn import<T: Real>(path: &Path, template: Option<&[[T; 3]]>) -> Result<GaussianSet<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |msg: String| Error::format(path.display(), msg);

    // header
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    while !header.ends_with(b"end_header\n") {
        r.read_exact(&mut byte)
            .map_err(|_| bad("truncated header".into()))?;
        header.push(byte[0]);
        if header.len() > 16384 {
            return Err(bad("oversized header".into()));
        }
    }
    let header = String::from_utf8(header).map_err(|_| bad("non-utf8 header".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic".into()));
    }
    if lines.next() != Some("format binary_little_endian 1.0") {
        return Err(bad("unsupported format".into()));
    }
    let mut count = 0usize;
    let mut props: Vec<String> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = rest
                .trim()
                .parse()
                .map_err(|_| bad("bad vertex count".into()))?;
        } else if let Some(rest) = line.strip_prefix("property float ") {
            props.push(rest.trim().to_string());
        } else if line.starts_with("element ") {
            return Err(bad(format!("unsupported element: {line}")));
        }
    }
    // locate our fields; extra properties are skipped
    let idx: Vec<usize> = PROPS
        .iter()
        .map(|want| {
            props
                .iter()
                .position(|p| p == want)
                .ok_or_else(|| bad(format!("missing property {want}")))
        })
        .collect::<Result<_>>()?;

    let stride = props.len();
    let mut data = vec![0u8; count * stride * 4];
    r.read_exact(&mut data)
        .map_err(|_| bad("truncated vertex data".into()))?;

    let get = |row: usize, p: usize| -> f64 {
        let off = (row * stride + idx[p]) * 4;
        f32::from_le_bytes([data[off], data[off + 1], data[off + 2], data[off + 3]]) as f64
    };

    let mut out = GaussianSet {
        anchors: Vec::with_capacity(count),
        offsets: Vec::with_capacity(count),
        colors: Vec::with_capacity(count),
        opacities: Vec::with_capacity(count),
        scales: Vec::with_capacity(count),
        rotations: vec![quat_identity(); count],
    };
    for i in 0..count {
        let pos = [get(i, 0), get(i, 1), get(i, 2)];
        match template {
            Some(t) if !t.is_empty() => {
                let a = t[i % t.len()];
                out.anchors.push(a);
                out.offsets.push([
                    lit(pos[0] - a[0].to_f64()),
                    lit(pos[1] - a[1].to_f64()),
                    lit(pos[2] - a[2].to_f64()),
                ]);
            }
            _ => {
                out.anchors.push([lit(pos[0]), lit(pos[1]), lit(pos[2])]);
                out.offsets.push([T::ZERO; 3]);
            }
        }
        out.colors.push([
            lit(get(i, 3) * SH_C0 + 0.5),
            lit(get(i, 4) * SH_C0 + 0.5),
            lit(get(i, 5) * SH_C0 + 0.5),
        ]);
        let logit = get(i, 6);
        out.opacities.push(lit(1.0 / (1.0 + (-logit).exp())));
        out.scales.push([
            lit(get(i, 7).exp()),
            lit(get(i, 8).exp()),
            lit(get(i, 9).exp()),
        ]);
        out.rotations[i] = [
            lit(get(i, 10)),
            lit(get(i, 11)),
            lit(get(i, 12)),
            lit(get(i, 13)),
        ];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_set(n: usize, seed: u64) -> GaussianSet<f32> {
        let mut rng = crate::rng::stream(seed, "ply-test");
        let mut anchors = Vec::new();
        let mut offsets = Vec::new();
        let mut colors = Vec::new();
        let mut opacities = Vec::new();
        let mut scales = Vec::new();
        let mut rotations = Vec::new();
        for _ in 0..n {
            anchors.push([
                rng.gen_range(-0.1..0.1f32),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            ]);
            offsets.push([
                rng.gen_range(-0.01..0.01f32),
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
            ]);
            colors.push([rng.gen_range(0.05..0.95f32), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]);
            opacities.push(rng.gen_range(0.05..0.95f32));
            scales.push([
                rng.gen_range(0.002..0.05f32),
                rng.gen_range(0.002..0.05),
                rng.gen_range(0.002..0.05),
            ]);
            let q = [
                rng.gen_range(-1.0..1.0f32),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            rotations.push(crate::avatar::math::quat_normalize(&q));
        }
        GaussianSet {
            anchors,
            offsets,
            colors,
            opacities,
            scales,
            rotations,
        }
    }

    #[test]
    fn header_carries_exact_field_names() {
        let g = random_set(3, 1);
        let dir = std::env::temp_dir().join("gsaf-ply-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("header.ply");
        export(&g, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let end = bytes
            .windows(11)
            .position(|w| w == b"end_header\n")
            .unwrap()
            + 11;
        let head = String::from_utf8_lossy(&bytes[..end]).to_string();
        for p in PROPS {
            assert!(head.contains(&format!("property float {p}")), "{p} missing");
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn roundtrip_with_template_recovers_attributes() {
        // Positions and rotations are stored raw → bit-exact. Colors,
        // opacities and scales pass through a transformed f32 field
        // (SH/logit/log), which costs at most a few ulps.
        let g = random_set(40, 2);
        let dir = std::env::temp_dir().join("gsaf-ply-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ply");
        export(&g, &path).unwrap();
        let anchors = g.anchors.clone();
        let back = import::<f32>(&path, Some(&anchors)).unwrap();
        assert_eq!(back.rotations, g.rotations);
        for i in 0..g.len() {
            assert_eq!(g.position(i), back.position(i), "position {i}");
            for a in 0..3 {
                let rel = (back.colors[i][a] - g.colors[i][a]).abs() / g.colors[i][a].max(1e-3);
                assert!(rel < 1e-6, "color {i}.{a}");
                let rel = (back.scales[i][a] - g.scales[i][a]).abs() / g.scales[i][a];
                assert!(rel < 1e-6, "scale {i}.{a}");
            }
            let rel = (back.opacities[i] - g.opacities[i]).abs() / g.opacities[i];
            assert!(rel < 1e-6, "opacity {i}");
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn import_without_template_is_view_only() {
        let g = random_set(5, 3);
        let dir = std::env::temp_dir().join("gsaf-ply-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("viewonly.ply");
        export(&g, &path).unwrap();
        let back = import::<f32>(&path, None).unwrap();
        for i in 0..g.len() {
            assert_eq!(back.offsets[i], [0.0; 3]);
            let p0 = g.position(i);
            assert_eq!(back.anchors[i], p0);
        }
        std::fs::remove_file(&path).ok();
    }
}
