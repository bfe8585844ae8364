//! End-to-end smoke tests for the gsaf binary: tiny dataset, short training
//! run, reconstruction, fusion, rendering, evaluation, export, exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gsaf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gsaf"))
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Workspace {
    root: PathBuf,
}

impl Workspace {
    fn new(tag: &str) -> Self {
        let root = std::env::temp_dir().join(format!("gsaf-cli-{tag}-{}", std::process::id()));
        std::fs::remove_dir_all(&root).ok();
        std::fs::create_dir_all(&root).unwrap();
        Workspace { root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        std::fs::remove_dir_all(&self.root).ok();
    }
}

/// Shared tiny pipeline: dataset → 3-step train → checkpoint.
fn prepare(ws: &Workspace) -> (PathBuf, PathBuf) {
    let data = ws.path("data");
    let out = gsaf()
        .args(["gen-data", "--identities", "2", "--holdout", "1", "--res", "32"])
        .args(["--seed", "11", "--subdiv", "1", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    let stdout = ok(&out);
    assert!(stdout.contains("resolved config"), "{stdout}");

    let run = ws.path("run");
    let out = gsaf()
        .args(["train", "--steps", "3", "--dim", "32", "--pairs", "1"])
        .args(["--frames-min", "2", "--frames-max", "3", "--seed", "4"])
        .args(["--checkpoint-interval", "0", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    ok(&out);
    let ckpt = run.join("model.gsafckpt");
    assert!(ckpt.exists());
    assert!(run.join("metrics.jsonl").exists());
    (data, ckpt)
}

#[test]
fn full_pipeline_smoke() {
    let ws = Workspace::new("pipeline");
    let (data, ckpt) = prepare(&ws);
    let frames = data.join("identities/id_002/frames");

    // metrics log is valid JSON lines
    let log = std::fs::read_to_string(ws.path("run/metrics.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["step"].is_number() && v["total"].is_number());
    }

    // reconstruct from 2 held-out frames: 2 groups → 2·V points
    let avatar = ws.path("avatar.ply");
    let out = gsaf()
        .args(["reconstruct", "--max-frames", "2", "--prefix", "eval_in_"])
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--frames")
        .arg(&frames)
        .arg("--out")
        .arg(&avatar)
        .output()
        .unwrap();
    let stdout = ok(&out);
    assert!(avatar.exists());
    let report: serde_json::Value =
        serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(report["frames"], 2);
    assert_eq!(report["points"], 2 * 42);
    assert!(report["model_forward_s"].as_f64().unwrap() > 0.0);

    // single frame → exactly V points
    let avatar1 = ws.path("avatar1.ply");
    let out = gsaf()
        .args(["reconstruct", "--max-frames", "1", "--prefix", "eval_in_"])
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--frames")
        .arg(&frames)
        .arg("--out")
        .arg(&avatar1)
        .output()
        .unwrap();
    let stdout = ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(report["points"], 42);

    // fuse 0 new frames → byte-identical copy
    let empty = ws.path("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let fused0 = ws.path("fused0.ply");
    let out = gsaf()
        .arg("fuse")
        .arg("--avatar")
        .arg(&avatar)
        .arg("--frames")
        .arg(&empty)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&fused0)
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(
        std::fs::read(&avatar).unwrap(),
        std::fs::read(&fused0).unwrap()
    );

    // fuse 1 new frame appends one group
    let fused = ws.path("fused.ply");
    let out = gsaf()
        .args(["fuse", "--max-frames", "1", "--prefix", "eval_in_"])
        .arg("--avatar")
        .arg(&avatar)
        .arg("--frames")
        .arg(&frames)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&fused)
        .output()
        .unwrap();
    let stdout = ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(report["points"], 3 * 42);

    // eval against held-out targets produces finite metrics
    let metrics = ws.path("metrics.json");
    let out = gsaf()
        .arg("eval")
        .arg("--avatar")
        .arg(&avatar)
        .arg("--targets")
        .arg(&frames)
        .arg("--out")
        .arg(&metrics)
        .output()
        .unwrap();
    ok(&out);
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&metrics).unwrap()).unwrap();
    assert!(m["mean_psnr"].as_f64().unwrap() > 0.0);
    assert!(m["per_frame"].as_array().unwrap().len() >= 2);

    // render along a track built from two target frames
    let track = ws.path("track.jsonl");
    let mut lines = String::new();
    for f in ["eval_tgt_000.json", "eval_tgt_001.json"] {
        let meta = std::fs::read_to_string(frames.join(f)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&meta).unwrap();
        lines.push_str(&serde_json::to_string(&v).unwrap());
        lines.push('\n');
    }
    std::fs::write(&track, lines).unwrap();
    let renders = ws.path("renders");
    let out = gsaf()
        .arg("render")
        .arg("--avatar")
        .arg(&avatar)
        .arg("--track")
        .arg(&track)
        .arg("--out")
        .arg(&renders)
        .output()
        .unwrap();
    let stdout = ok(&out);
    assert!(renders.join("00000.png").exists());
    assert!(renders.join("00001.png").exists());
    let report: serde_json::Value =
        serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert!(report["fps"].as_f64().unwrap() > 0.0);

    // export: normalized PLY and a canonical PNG/PFM view
    for what in ["ply", "pfm", "png"] {
        let dst = ws.path(&format!("export.{what}"));
        let out = gsaf()
            .arg("export")
            .arg("--avatar")
            .arg(&avatar)
            .args(["--what", what])
            .arg("--out")
            .arg(&dst)
            .output()
            .unwrap();
        ok(&out);
        assert!(dst.exists());
    }
}

#[test]
fn ground_truth_render_reproduces_dataset_frame_bit_exactly() {
    let ws = Workspace::new("gtrender");
    let data = ws.path("data");
    let out = gsaf()
        .args(["gen-data", "--identities", "1", "--holdout", "0", "--res", "32"])
        .args(["--seed", "3", "--subdiv", "1", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    ok(&out);
    let id_dir = data.join("identities/id_000");
    let frames = id_dir.join("frames");

    // track = the first pool frame's metadata
    let track = ws.path("track.jsonl");
    let meta = std::fs::read_to_string(frames.join("pool_000.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&meta).unwrap();
    std::fs::write(&track, format!("{}\n", serde_json::to_string(&v).unwrap())).unwrap();

    let renders = ws.path("renders");
    let out = gsaf()
        .arg("render")
        .arg("--avatar")
        .arg(id_dir.join("gt.ply"))
        .arg("--track")
        .arg(&track)
        .arg("--out")
        .arg(&renders)
        .arg("--proxy")
        .arg(data.join("proxy.gsafproxy"))
        .output()
        .unwrap();
    ok(&out);

    let a = image::open(renders.join("00000.png")).unwrap().to_rgb8();
    let b = image::open(frames.join("pool_000.png")).unwrap().to_rgb8();
    assert_eq!(a.as_raw(), b.as_raw(), "render differs from dataset frame");
}

#[test]
fn bad_inputs_use_exit_code_2_and_4() {
    let ws = Workspace::new("exitcodes");
    // unknown flag → clap exits 2
    let out = gsaf().args(["gen-data", "--nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // missing frames directory → IO failure
    let out = gsaf()
        .args(["reconstruct", "--checkpoint", "/nonexistent.ckpt"])
        .arg("--frames")
        .arg(ws.path("missing"))
        .arg("--out")
        .arg(ws.path("x.ply"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));

    // malformed track line reports its number and exits 2
    let track = ws.path("bad.jsonl");
    std::fs::write(&track, "{not json}\n").unwrap();
    let out = gsaf()
        .arg("render")
        .arg("--avatar")
        .arg(ws.path("missing.ply"))
        .arg("--track")
        .arg(&track)
        .arg("--out")
        .arg(ws.path("r"))
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn reconstruct_is_deterministic_for_fixed_inputs() {
    let ws = Workspace::new("determinism");
    let (data, ckpt) = prepare(&ws);
    let frames = data.join("identities/id_000/frames");
    let run = |name: &str| -> Vec<u8> {
        let path = ws.path(name);
        let out = gsaf()
            .args(["reconstruct", "--max-frames", "2", "--prefix", "pool_", "--threads", "1"])
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--frames")
            .arg(&frames)
            .arg("--out")
            .arg(&path)
            .output()
            .unwrap();
        ok(&out);
        std::fs::read(&path).unwrap()
    };
    assert_eq!(run("a.ply"), run("b.ply"));
}
