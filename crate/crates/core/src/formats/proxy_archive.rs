//! Head-proxy archive: a 16-byte magic header (`GSAFPROXY\0` zero-padded),
//! version, then the raw arrays back to back. A JSON sidecar (same path +
//! `.json`) carries the dimensions needed to slice the arrays.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use crate::avatar::HeadProxy;
use crate::error::{Error, Result};
use crate::real::{lit, Real};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 10] = b"GSAFPROXY\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    vertex_count: usize,
    expression_count: usize,
    joint_count: usize,
    landmark_count: usize,
    /// Array order in the archive body.
    arrays: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save<T: Real>(proxy: &HeadProxy<T>, path: &Path) -> Result<()> {
    proxy.validate()?;
    let mut buf = Vec::new();
    let mut header = [0u8; 16];
    header[..MAGIC.len()].copy_from_slice(MAGIC);
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let push_f32 = |buf: &mut Vec<u8>, v: f64| buf.extend_from_slice(&(v as f32).to_le_bytes());
    for v in &proxy.template {
        for a in 0..3 {
            push_f32(&mut buf, v[a].to_f64());
        }
    }
    for bs in &proxy.blendshapes {
        for v in bs {
            for a in 0..3 {
                push_f32(&mut buf, v[a].to_f64());
            }
        }
    }
    for j in &proxy.joint_rest {
        for a in 0..3 {
            push_f32(&mut buf, j[a].to_f64());
        }
    }
    for p in &proxy.joint_parent {
        let v: i32 = match p {
            None => -1,
            Some(i) => *i as i32,
        };
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &w in &proxy.weights {
        push_f32(&mut buf, w.to_f64());
    }
    for &l in &proxy.landmarks {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    super::atomic_write(path, &buf)?;

    let sidecar = Sidecar {
        version: VERSION,
        vertex_count: proxy.vertex_count(),
        expression_count: proxy.expression_count(),
        joint_count: proxy.joint_count(),
        landmark_count: proxy.landmark_count(),
        arrays: [
            "template",
            "blendshapes",
            "joint_rest",
            "joint_parent",
            "weights",
            "landmarks",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    };
    super::atomic_write(
        &sidecar_path(path),
        &serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<HeadProxy<T>> {
    let bad = |msg: String| Error::format(path.display(), msg);
    let sidecar: Sidecar = serde_json::from_slice(
        &std::fs::read(sidecar_path(path))
            .map_err(|e| bad(format!("missing sidecar: {e}")))?,
    )
    .map_err(|e| bad(format!("sidecar: {e}")))?;
    if sidecar.version != VERSION {
        return Err(bad(format!("unsupported version {}", sidecar.version)));
    }

    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..MAGIC.len()] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    if u32::from_le_bytes(vbuf) != VERSION {
        return Err(bad("version mismatch with sidecar".into()));
    }
    let (v, k, j, m) = (
        sidecar.vertex_count,
        sidecar.expression_count,
        sidecar.joint_count,
        sidecar.landmark_count,
    );
    let read_f32 = |r: &mut BufReader<File>| -> Result<T> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(lit(f32::from_le_bytes(b) as f64))
    };
    let vec3s = |r: &mut BufReader<File>, n: usize| -> Result<Vec<[T; 3]>> {
        (0..n)
            .map(|_| Ok([read_f32(r)?, read_f32(r)?, read_f32(r)?]))
            .collect()
    };
    let template = vec3s(&mut r, v)?;
    let blendshapes = (0..k)
        .map(|_| vec3s(&mut r, v))
        .collect::<Result<Vec<_>>>()?;
    let joint_rest = vec3s(&mut r, j)?;
    let mut joint_parent = Vec::with_capacity(j);
    for _ in 0..j {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        let p = i32::from_le_bytes(b);
        joint_parent.push(if p < 0 { None } else { Some(p as usize) });
    }
    let mut weights = Vec::with_capacity(v * j);
    for _ in 0..v * j {
        weights.push(read_f32(&mut r)?);
    }
    let mut landmarks = Vec::with_capacity(m);
    for _ in 0..m {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        landmarks.push(u32::from_le_bytes(b) as usize);
    }
    let proxy = HeadProxy {
        template,
        blendshapes,
        joint_rest,
        joint_parent,
        weights,
        landmarks,
    };
    proxy.validate()?;
    Ok(proxy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::base_proxy;

    #[test]
    fn archive_roundtrip_is_exact_for_f32() {
        let proxy: HeadProxy<f32> = base_proxy(1);
        let dir = std::env::temp_dir().join("gsaf-proxy-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("head.gsafproxy");
        save(&proxy, &path).unwrap();
        let back = load::<f32>(&path).unwrap();
        assert_eq!(back, proxy);
        // 16-byte magic header
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..10], MAGIC);
        assert_eq!(&bytes[10..16], &[0u8; 6]);
        std::fs::remove_file(&path).ok();
        std::fs::remove_file(sidecar_path(&path)).ok();
    }
}
