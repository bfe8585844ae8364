//! Avatar on disk: the splat PLY plus a JSON sidecar carrying the proxy
//! reference, group bookkeeping and fusion provenance.

use std::path::{Path, PathBuf};

use gsaf_core::avatar::GaussianSet;
use gsaf_core::formats::{atomic_write, ply};
use gsaf_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AvatarMeta {
    /// Path of the proxy archive this avatar is anchored on.
    pub proxy: Option<String>,
    /// Checkpoint that produced the groups.
    pub checkpoint: String,
    /// Points per group (proxy vertex count).
    pub vertex_count: usize,
    pub groups: usize,
    /// One entry per reconstruct/fuse invocation.
    pub history: Vec<ProvenanceEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub source_frames: Vec<String>,
    pub groups_added: usize,
    pub model_forward_s: f64,
    pub io_s: f64,
}

pub fn meta_path(avatar: &Path) -> PathBuf {
    let mut s = avatar.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save(avatar: &GaussianSet<f32>, meta: &AvatarMeta, path: &Path) -> Result<()> {
    ply::export(avatar, path)?;
    atomic_write(
        &meta_path(path),
        &serde_json::to_vec_pretty(meta).expect("avatar meta serializes"),
    )?;
    Ok(())
}

pub fn load_meta(path: &Path) -> Result<AvatarMeta> {
    let mp = meta_path(path);
    serde_json::from_slice(&std::fs::read(&mp)?)
        .map_err(|e| Error::format(mp.display(), format!("avatar meta: {e}")))
}

/// Import the avatar with the canonical anchor split recovered from the
/// template.
pub fn load(path: &Path, template: &[[f32; 3]]) -> Result<(GaussianSet<f32>, AvatarMeta)> {
    let meta = load_meta(path)?;
    let set = ply::import(path, Some(template))?;
    if meta.vertex_count != template.len() {
        return Err(Error::contract(
            "avatar",
            format!(
                "proxy mismatch: avatar anchored on {} vertices, template has {}",
                meta.vertex_count,
                template.len()
            ),
        ));
    }
    if set.len() % meta.vertex_count != 0 {
        return Err(Error::format(
            path.display(),
            "point count is not a multiple of the proxy vertex count",
        ));
    }
    Ok((set, meta))
}
