//! Subcommand implementations.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::avatar_file::{self, AvatarMeta, ProvenanceEntry};
use crate::config::TrainOverrides;
use crate::dataset;
use crate::meta;
use gsaf_core::avatar::{deform, ExpressionPose, GaussianSet, HeadProxy};
use gsaf_core::formats::{linear_to_srgb8, pfm, ply, proxy_archive};
use gsaf_core::lgrt::{checkpoint, FrameObservation, LgrtConfig, LgrtModel};
use gsaf_core::train::{self, Trainer};
use gsaf_core::{raster, Error, Result};

pub fn gen_data(
    out: &Path,
    identities: usize,
    holdout: usize,
    res: usize,
    seed: u64,
    subdiv: usize,
) -> Result<()> {
    println!("resolved config:");
    println!("  out = {}", out.display());
    println!("  identities = {identities}");
    println!("  holdout = {holdout}");
    println!("  res = {res}");
    println!("  seed = {seed}");
    println!("  subdiv = {subdiv}");
    let t0 = Instant::now();
    let manifest = dataset::generate(out, seed, identities, holdout, res, subdiv)?;
    println!(
        "wrote {} identities ({} train / {} holdout) in {:.1}s",
        manifest.identities.len(),
        identities,
        holdout,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn train(
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    overrides: &TrainOverrides,
) -> Result<()> {
    let resolved = overrides.resolve()?;
    resolved.print();
    let ds = dataset::load_split(data, "train")?;
    let model = match resume {
        Some(path) => {
            println!("resuming from {}", path.display());
            checkpoint::load::<f32>(path)?
        }
        None => {
            let m = &resolved.model;
            let mut cfg = LgrtConfig::desk(&ds.proxy);
            cfg.dim = m.dim;
            cfg.pairs = m.pairs;
            cfg.heads = m.heads;
            cfg.patch = m.patch;
            cfg.mlp_ratio = m.mlp_ratio;
            cfg.prompt_freqs = m.prompt_freqs;
            cfg.max_frames = m.max_frames;
            LgrtModel::new(cfg, &ds.proxy, resolved.train.seed)?
        }
    };
    println!(
        "model: {} parameters, proxy V = {}",
        model.param_count(),
        ds.proxy.vertex_count()
    );
    std::fs::create_dir_all(out)?;
    let steps = resolved.train.steps;
    let mut trainer = Trainer::new(&ds, model, resolved.train)?;
    trainer.checkpoint_dir = Some(out.to_path_buf());

    let log_path = out.join("metrics.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let t0 = Instant::now();
    let mut result = Ok(());
    for step in 0..steps {
        match trainer.step() {
            Ok(outcome) => {
                let r = &outcome.report;
                writeln!(
                    log,
                    "{}",
                    serde_json::json!({
                        "step": step + 1,
                        "total": r.total,
                        "rgb": r.rgb,
                        "ssim": r.ssim,
                        "perceptual": r.perceptual,
                        "track": r.track,
                        "psnr": r.psnr,
                        "wall_ms": outcome.wall_ms,
                        "skipped": outcome.skipped,
                    })
                )?;
                if outcome.skipped {
                    eprintln!("step {}: non-finite gradients, update skipped", step + 1);
                }
                if (step + 1) % 50 == 0 || step == 0 {
                    eprintln!(
                        "step {}/{steps}: total {:.4} rgb {:.4} psnr {:.2} ({:.0} ms)",
                        step + 1,
                        r.total,
                        r.rgb,
                        r.psnr,
                        outcome.wall_ms
                    );
                }
            }
            Err(e) => {
                // divergence: dump diagnostics next to the log before failing
                let dump = out.join("divergence.json");
                let _ = std::fs::write(
                    &dump,
                    serde_json::json!({
                        "error": e.to_string(),
                        "step": step,
                    })
                    .to_string(),
                );
                result = Err(e);
                break;
            }
        }
    }
    log.flush()?;
    result?;
    checkpoint::save(&trainer.model, &out.join("model.gsafckpt"))?;
    println!(
        "trained {steps} steps in {:.1}s; checkpoint at {}",
        t0.elapsed().as_secs_f64(),
        out.join("model.gsafckpt").display()
    );
    Ok(())
}

/// Load up to `max_frames` frames (PNG+JSON pairs) from a directory.
fn load_frames(dir: &Path, prefix: &str, max_frames: usize) -> Result<(Vec<FrameObservation<f32>>, Vec<String>)> {
    let files = dataset::frame_files(dir, prefix)?;
    if files.is_empty() {
        return Err(Error::contract(
            "frames",
            format!("no frames matching '{prefix}*' in {}", dir.display()),
        ));
    }
    let take = files.len().min(max_frames.max(1));
    let mut frames = Vec::with_capacity(take);
    let mut names = Vec::with_capacity(take);
    for f in &files[..take] {
        frames.push(dataset::load_frame(f)?);
        names.push(f.file_name().unwrap().to_string_lossy().into_owned());
    }
    Ok((frames, names))
}

fn find_proxy(start: &Path) -> Option<PathBuf> {
    let mut dir = Some(start.to_path_buf());
    for _ in 0..4 {
        let d = dir?;
        let cand = d.join("proxy.gsafproxy");
        if cand.exists() {
            return Some(cand);
        }
        dir = d.parent().map(|p| p.to_path_buf());
    }
    None
}

pub fn reconstruct(
    ckpt: &Path,
    frames_dir: &Path,
    out: &Path,
    max_frames: usize,
    prefix: &str,
    proxy: Option<&Path>,
) -> Result<()> {
    println!("resolved config:");
    println!("  checkpoint = {}", ckpt.display());
    println!("  frames = {}", frames_dir.display());
    println!("  out = {}", out.display());
    println!("  max-frames = {max_frames}");
    println!("  prefix = '{prefix}'");

    let io0 = Instant::now();
    let model = checkpoint::load::<f32>(ckpt)?;
    let (frames, names) = load_frames(frames_dir, prefix, max_frames)?;
    let io_s = io0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let avatar = train::reconstruct(&model, &frames)?;
    let model_forward_s = t0.elapsed().as_secs_f64();

    let proxy_ref = proxy
        .map(|p| p.to_path_buf())
        .or_else(|| find_proxy(frames_dir))
        .map(|p| p.display().to_string());
    let meta = AvatarMeta {
        proxy: proxy_ref,
        checkpoint: ckpt.display().to_string(),
        vertex_count: model.config.vertex_count,
        groups: frames.len(),
        history: vec![ProvenanceEntry {
            source_frames: names,
            groups_added: frames.len(),
            model_forward_s,
            io_s,
        }],
    };
    avatar_file::save(&avatar, &meta, out)?;
    println!(
        "{}",
        serde_json::json!({
            "frames": frames.len(),
            "points": avatar.len(),
            "model_forward_s": model_forward_s,
            "io_s": io_s,
        })
    );
    Ok(())
}

pub fn fuse(
    avatar_path: &Path,
    frames_dir: &Path,
    ckpt: &Path,
    out: &Path,
    max_frames: usize,
    prefix: &str,
) -> Result<()> {
    println!("resolved config:");
    println!("  avatar = {}", avatar_path.display());
    println!("  frames = {}", frames_dir.display());
    println!("  checkpoint = {}", ckpt.display());
    println!("  out = {}", out.display());

    let io0 = Instant::now();
    let model = checkpoint::load::<f32>(ckpt)?;
    let anchors = model.anchors();
    let (existing, mut meta) = avatar_file::load(avatar_path, &anchors)?;

    let files = dataset::frame_files(frames_dir, prefix)?;
    if files.is_empty() {
        // nothing to add: the avatar passes through byte-identical
        std::fs::copy(avatar_path, out)?;
        std::fs::copy(avatar_file::meta_path(avatar_path), avatar_file::meta_path(out))?;
        println!("no new frames; avatar copied unchanged");
        return Ok(());
    }
    let (frames, names) = load_frames(frames_dir, prefix, max_frames)?;
    let io_s = io0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let new_groups = train::reconstruct(&model, &frames)?;
    let model_forward_s = t0.elapsed().as_secs_f64();

    let fused = gsaf_core::avatar::fuse(&[&existing, &new_groups])?;
    meta.groups += frames.len();
    meta.history.push(ProvenanceEntry {
        source_frames: names,
        groups_added: frames.len(),
        model_forward_s,
        io_s,
    });
    avatar_file::save(&fused, &meta, out)?;
    println!(
        "{}",
        serde_json::json!({
            "added_frames": frames.len(),
            "points": fused.len(),
            "model_forward_s": model_forward_s,
            "io_s": io_s,
        })
    );
    Ok(())
}

fn load_avatar_with_proxy(
    avatar_path: &Path,
    proxy: Option<&Path>,
) -> Result<(GaussianSet<f32>, HeadProxy<f32>)> {
    let meta = avatar_file::load_meta(avatar_path).ok();
    let proxy_path = proxy
        .map(|p| p.to_path_buf())
        .or_else(|| {
            meta.as_ref()
                .and_then(|m| m.proxy.as_ref().map(PathBuf::from))
        })
        .or_else(|| find_proxy(avatar_path.parent().unwrap_or(Path::new("."))))
        .ok_or_else(|| {
            Error::contract(
                "avatar",
                "no proxy archive found; pass --proxy or keep the avatar sidecar",
            )
        })?;
    let proxy: HeadProxy<f32> = proxy_archive::load(&proxy_path)?;
    let set = ply::import(avatar_path, Some(&proxy.template))?;
    Ok((set, proxy))
}

pub fn render(avatar_path: &Path, track: &Path, out: &Path, proxy: Option<&Path>) -> Result<()> {
    println!("resolved config:");
    println!("  avatar = {}", avatar_path.display());
    println!("  track = {}", track.display());
    println!("  out = {}", out.display());

    let (avatar, proxy) = load_avatar_with_proxy(avatar_path, proxy)?;
    let frames = meta::load_track(track)?;
    std::fs::create_dir_all(out)?;

    let t0 = Instant::now();
    let mut render_s = 0.0;
    for (i, fm) in frames.iter().enumerate() {
        let cam = fm.camera();
        cam.validate()?;
        let ep = fm.expression_pose();
        let r0 = Instant::now();
        let world = deform(&avatar, &proxy, &ep)?;
        let proj = raster::project(&world, &cam);
        let img = raster::rasterize(&proj.splats, cam.width, cam.height, [0.0; 3])?;
        render_s += r0.elapsed().as_secs_f64();
        for v in &img.image {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("frame {i}")));
            }
        }
        write_png(&img.image, cam.width, cam.height, &out.join(format!("{i:05}.png")))?;
    }
    let fps = frames.len() as f64 / render_s.max(1e-9);
    println!(
        "{}",
        serde_json::json!({
            "frames": frames.len(),
            "render_s": render_s,
            "total_s": t0.elapsed().as_secs_f64(),
            "fps": fps,
        })
    );
    Ok(())
}

fn write_png(image_hwc: &[f32], w: usize, h: usize, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                linear_to_srgb8(image_hwc[(y * w + x) * 3] as f64),
                linear_to_srgb8(image_hwc[(y * w + x) * 3 + 1] as f64),
                linear_to_srgb8(image_hwc[(y * w + x) * 3 + 2] as f64),
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)
        .map_err(|e| Error::format(path.display(), format!("png encode: {e}")))
}

pub fn eval(
    avatar_path: &Path,
    targets_dir: &Path,
    prefix: &str,
    proxy: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    println!("resolved config:");
    println!("  avatar = {}", avatar_path.display());
    println!("  targets = {} (prefix '{prefix}')", targets_dir.display());

    let (avatar, proxy) = load_avatar_with_proxy(avatar_path, proxy)?;
    let (targets, _) = load_frames(targets_dir, prefix, usize::MAX)?;
    let metrics = train::evaluate(&proxy, &avatar, &targets)?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    println!("{json}");
    if let Some(path) = out {
        gsaf_core::formats::atomic_write(path, json.as_bytes())?;
    }
    Ok(())
}

pub fn export(avatar_path: &Path, what: &str, out: &Path, proxy: Option<&Path>) -> Result<()> {
    println!("resolved config:");
    println!("  avatar = {}", avatar_path.display());
    println!("  what = {what}");
    println!("  out = {}", out.display());
    match what {
        "ply" => {
            // parse + re-export (validates and normalizes the layout)
            let set = ply::import::<f32>(avatar_path, None)?;
            ply::export(&set, out)?;
        }
        "pfm" | "png" => {
            let (avatar, proxy) = load_avatar_with_proxy(avatar_path, proxy)?;
            let ep = ExpressionPose::identity(proxy.expression_count(), proxy.joint_count());
            let cam = gsaf_core::avatar::Camera::look_at(
                [0.0, 0.0, 0.5],
                [0.0, 0.0, 0.0],
                0.72,
                256,
                256,
            );
            let world = deform(&avatar, &proxy, &ep)?;
            let proj = raster::project(&world, &cam);
            let img = raster::rasterize(&proj.splats, cam.width, cam.height, [0.0; 3])?;
            if what == "pfm" {
                pfm::write(&img.image, cam.width, cam.height, out)?;
            } else {
                write_png(&img.image, cam.width, cam.height, out)?;
            }
        }
        other => {
            return Err(Error::contract("export", format!("unknown format {other}")));
        }
    }
    println!("exported {what} to {}", out.display());
    Ok(())
}
