//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/proxy.gsafproxy (+ .json sidecar)
//! <root>/identities/id_NNN/gt.ply
//! <root>/identities/id_NNN/frames/{pool,eval_in,eval_tgt}_KKK.png/.json
//! ```
//!
//! Images are 8-bit sRGB PNG; all float data lives in the JSON metadata.

use std::fs;
use std::path::{Path, PathBuf};

use crate::meta::FrameMeta;
use gsaf_core::avatar::HeadProxy;
use gsaf_core::formats::{self, linear_to_srgb8, ply, proxy_archive, srgb8_to_linear};
use gsaf_core::lgrt::FrameObservation;
use gsaf_core::losses::hwc_to_chw;
use gsaf_core::synth::{self, Dataset, IdentityData};
use gsaf_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub resolution: usize,
    pub proxy: String,
    pub identities: Vec<ManifestIdentity>,
}

#[derive(Serialize, Deserialize)]
pub struct ManifestIdentity {
    pub id: String,
    pub seed: u64,
    pub dir: String,
    pub split: String,
    pub modes: Vec<String>,
    pub frame_counts: FrameCounts,
    /// sha256 of every frame PNG, keyed by file name.
    pub checksums: std::collections::BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
pub struct FrameCounts {
    pub pool: usize,
    pub eval_in: usize,
    pub eval_tgt: usize,
}

/// Write one linear [3,H,W] frame as sRGB PNG + metadata JSON.
fn write_frame(dir: &Path, stem: &str, f: &FrameObservation<f32>) -> Result<String> {
    let (w, h) = (f.camera.width, f.camera.height);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                linear_to_srgb8(f.image[y * w + x] as f64),
                linear_to_srgb8(f.image[w * h + y * w + x] as f64),
                linear_to_srgb8(f.image[2 * w * h + y * w + x] as f64),
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let png = dir.join(format!("{stem}.png"));
    img.save(&png)
        .map_err(|e| Error::format(png.display(), format!("png encode: {e}")))?;
    let meta = FrameMeta::from_core(&f.camera, &f.ep, f.landmarks.as_deref());
    meta.save(&dir.join(format!("{stem}.json")))?;
    let digest = Sha256::digest(fs::read(&png)?);
    Ok(format!("{digest:x}"))
}

/// Load a frame (PNG + JSON) back into a linear observation.
pub fn load_frame(png: &Path) -> Result<FrameObservation<f32>> {
    let meta_path = png.with_extension("json");
    if !meta_path.exists() {
        return Err(Error::contract(
            "load_frame",
            format!(
                "frame {} is missing its metadata file {}",
                png.display(),
                meta_path.display()
            ),
        ));
    }
    let meta = FrameMeta::load(&meta_path)?;
    let img = image::open(png)
        .map_err(|e| Error::format(png.display(), format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != meta.camera.width || h != meta.camera.height {
        return Err(Error::format(
            png.display(),
            format!("image {w}x{h} disagrees with metadata"),
        ));
    }
    let mut hwc = vec![0f32; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                hwc[(y * w + x) * 3 + c] = srgb8_to_linear(p[c]) as f32;
            }
        }
    }
    Ok(FrameObservation {
        image: hwc_to_chw(&hwc, w, h),
        camera: meta.camera(),
        ep: meta.expression_pose(),
        landmarks: meta
            .landmarks
            .map(|l| l.into_iter().map(|p| [p[0], p[1]]).collect()),
    })
}

/// Sorted list of frame PNGs with a given stem prefix.
pub fn frame_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|e| e == "png")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with(prefix))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Generate and write a dataset; identities beyond `train` count form the
/// held-out split.
pub fn generate(
    out: &Path,
    seed: u64,
    train: usize,
    holdout: usize,
    res: usize,
    subdiv: usize,
) -> Result<Manifest> {
    let proxy: HeadProxy<f32> = synth::base_proxy(subdiv);
    fs::create_dir_all(out)?;
    proxy_archive::save(&proxy, &out.join("proxy.gsafproxy"))?;

    let ds = synth::build_dataset(&proxy, seed, train + holdout, res)?;
    let mut identities = Vec::new();
    for (i, data) in ds.identities.iter().enumerate() {
        let id = format!("id_{i:03}");
        let dir_rel = format!("identities/{id}");
        let dir = out.join(&dir_rel);
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir)?;
        ply::export(&data.identity.gaussians, &dir.join("gt.ply"))?;

        let mut checksums = std::collections::BTreeMap::new();
        for (k, f) in data.pool.iter().enumerate() {
            let stem = format!("pool_{k:03}");
            checksums.insert(format!("{stem}.png"), write_frame(&frames_dir, &stem, f)?);
        }
        for (k, f) in data.eval_inputs.iter().enumerate() {
            let stem = format!("eval_in_{k:03}");
            checksums.insert(format!("{stem}.png"), write_frame(&frames_dir, &stem, f)?);
        }
        for (k, f) in data.eval_targets.iter().enumerate() {
            let stem = format!("eval_tgt_{k:03}");
            checksums.insert(format!("{stem}.png"), write_frame(&frames_dir, &stem, f)?);
        }
        identities.push(ManifestIdentity {
            id,
            seed: data.identity.seed,
            dir: dir_rel,
            split: if i < train { "train" } else { "holdout" }.into(),
            modes: vec!["monocular".into(), "multiview".into()],
            frame_counts: FrameCounts {
                pool: data.pool.len(),
                eval_in: data.eval_inputs.len(),
                eval_tgt: data.eval_targets.len(),
            },
            checksums,
        });
    }
    let manifest = Manifest {
        seed,
        resolution: res,
        proxy: "proxy.gsafproxy".into(),
        identities,
    };
    formats::atomic_write(
        &out.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    serde_json::from_slice(&fs::read(&path)?)
        .map_err(|e| Error::format(path.display(), format!("manifest: {e}")))
}

/// Load the given split back into an in-memory dataset. Images come from the
/// 8-bit PNGs, so training targets carry quantization — intended behavior
/// for the disk pipeline.
pub fn load_split(root: &Path, split: &str) -> Result<Dataset<f32>> {
    let manifest = load_manifest(root)?;
    let proxy: HeadProxy<f32> = proxy_archive::load(&root.join(&manifest.proxy))?;
    let mut identities = Vec::new();
    for mi in manifest.identities.iter().filter(|m| m.split == split) {
        let dir = root.join(&mi.dir).join("frames");
        let load_all = |prefix: &str| -> Result<Vec<FrameObservation<f32>>> {
            frame_files(&dir, prefix)?.iter().map(|p| load_frame(p)).collect()
        };
        let pool = load_all("pool_")?;
        let eval_inputs = load_all("eval_in_")?;
        let eval_targets = load_all("eval_tgt_")?;
        let identity = gsaf_core::synth::generate_identity(&proxy, mi.seed);
        identities.push(IdentityData {
            identity,
            pool,
            eval_inputs,
            eval_targets,
        });
    }
    if identities.is_empty() {
        return Err(Error::contract(
            "load_split",
            format!("no identities in split '{split}'"),
        ));
    }
    Ok(Dataset {
        proxy,
        identities,
        resolution: manifest.resolution,
    })
}
