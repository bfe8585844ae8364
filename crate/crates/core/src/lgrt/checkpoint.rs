//! Checkpoint container: magic `GSAFCKPT\0`, version, config record (JSON),
//! then raw parameter buffers in declaration order, each with a name+shape
//! header. Values are stored as little-endian f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LgrtConfig, LgrtModel, Param};
use crate::error::{Error, Result};
use crate::real::Real;

pub const MAGIC: &[u8; 9] = b"GSAFCKPT\0";
pub const VERSION: u32 = 1;

pub fn save<T: Real>(model: &LgrtModel<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&model.config).expect("config serializes");
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        let total = model.params.len() + model.constants.len();
        w.write_all(&(total as u32).to_le_bytes())?;
        for p in model.params.iter().chain(&model.constants) {
            write_buffer(&mut w, p)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_buffer<T: Real>(w: &mut impl Write, p: &Param<T>) -> Result<()> {
    let name = p.name.as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
    for &d in &p.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in &p.value {
        w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<LgrtModel<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |msg: &str| Error::format(path.display(), msg);
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let config: LgrtConfig =
        serde_json::from_slice(&cfg_buf).map_err(|e| bad(&format!("config: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut params = Vec::new();
    let mut constants = Vec::new();
    for _ in 0..count {
        let p = read_buffer::<T>(&mut r)?;
        if p.name.starts_with("const.") {
            constants.push(p);
        } else {
            params.push(p);
        }
    }
    LgrtModel::from_parts(config, params, constants)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_buffer<T: Real>(r: &mut impl Read) -> Result<Param<T>> {
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::format("checkpoint", "non-utf8 buffer name"))?;
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let value = bytes
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok(Param { name, shape, value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgrt::testutil::toy_proxy;

    #[test]
    fn checkpoint_roundtrip_is_exact_for_f32() {
        let proxy32: crate::avatar::HeadProxy<f32> = toy_proxy(6);
        let mut cfg = crate::lgrt::LgrtConfig::desk(&proxy32);
        cfg.dim = 32;
        cfg.pairs = 1;
        let model = LgrtModel::<f32>::new(cfg, &proxy32, 7).unwrap();
        let dir = std::env::temp_dir().join("gsaf-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.gsafckpt");
        save(&model, &path).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params.len(), model.params.len());
        for (a, b) in model.params.iter().zip(&loaded.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.value, b.value);
        }
        for (a, b) in model.constants.iter().zip(&loaded.constants) {
            assert_eq!(a.value, b.value);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = std::env::temp_dir().join("gsaf-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.gsafckpt");
        std::fs::write(&path, b"NOTACKPT\0rest").unwrap();
        assert!(load::<f32>(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
