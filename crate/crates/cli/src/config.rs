//! Plain-text key = value training config, every key overridable by the CLI
//! flag of the same name. Resolution order: defaults < file < explicit flag.

use std::collections::BTreeMap;
use std::path::Path;

use gsaf_core::train::TrainConfig;
use gsaf_core::{Error, Result};

/// Architecture knobs applied when training starts from scratch.
#[derive(Clone, Debug)]
pub struct ModelOpts {
    pub dim: usize,
    pub pairs: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub prompt_freqs: usize,
    pub max_frames: usize,
}

impl Default for ModelOpts {
    fn default() -> Self {
        ModelOpts {
            dim: 64,
            pairs: 4,
            heads: 4,
            patch: 8,
            mlp_ratio: 4,
            prompt_freqs: 8,
            max_frames: 16,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Resolved {
    pub train: TrainConfig,
    pub model: ModelOpts,
}

/// Flag-level overrides (None = not given on the command line).
#[derive(Clone, Debug, Default, clap::Args)]
pub struct TrainOverrides {
    /// Plain-text key = value config file.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long, name = "weight-decay")]
    pub weight_decay: Option<f64>,
    #[arg(long, name = "frames-min")]
    pub frames_min: Option<usize>,
    #[arg(long, name = "frames-max")]
    pub frames_max: Option<usize>,
    #[arg(long, name = "extra-targets")]
    pub extra_targets: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, name = "checkpoint-interval")]
    pub checkpoint_interval: Option<usize>,
    #[arg(long, name = "lambda-rgb")]
    pub lambda_rgb: Option<f64>,
    #[arg(long, name = "lambda-ssim")]
    pub lambda_ssim: Option<f64>,
    #[arg(long, name = "lambda-perceptual")]
    pub lambda_perceptual: Option<f64>,
    #[arg(long, name = "lambda-track")]
    pub lambda_track: Option<f64>,
    /// true/false: supervise the fused (sliced) render.
    #[arg(long, name = "sliced-fusion")]
    pub sliced_fusion: Option<bool>,
    /// true/false: landmark tracking term.
    #[arg(long)]
    pub tracking: Option<bool>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long, name = "mlp-ratio")]
    pub mlp_ratio: Option<usize>,
    #[arg(long, name = "prompt-freqs")]
    pub prompt_freqs: Option<usize>,
    #[arg(long, name = "max-frames")]
    pub max_frames: Option<usize>,
}

fn parse_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::format(
                path.display(),
                format!("line {}: expected key = value", ln + 1),
            ));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn take<T: std::str::FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<Option<T>> {
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v.parse::<T>().map(Some).map_err(|_| {
            Error::format(path.display(), format!("bad value for {key}: {v}"))
        }),
    }
}

impl TrainOverrides {
    /// Merge defaults, config file and explicit flags; reject unknown keys.
    pub fn resolve(&self) -> Result<Resolved> {
        let mut train = TrainConfig::default();
        let mut model = ModelOpts::default();

        if let Some(path) = &self.config {
            let mut kv = parse_kv(path)?;
            macro_rules! file {
                ($field:expr, $key:literal, $ty:ty) => {
                    if let Some(v) = take::<$ty>(&mut kv, $key, path)? {
                        $field = v;
                    }
                };
            }
            file!(train.steps, "steps", usize);
            file!(train.optimizer.learning_rate, "lr", f64);
            file!(train.optimizer.beta1, "beta1", f64);
            file!(train.optimizer.beta2, "beta2", f64);
            file!(train.optimizer.weight_decay, "weight-decay", f64);
            file!(train.frames_min, "frames-min", usize);
            file!(train.frames_max, "frames-max", usize);
            file!(train.extra_targets, "extra-targets", usize);
            file!(train.seed, "seed", u64);
            file!(train.checkpoint_interval, "checkpoint-interval", usize);
            file!(train.weights.rgb, "lambda-rgb", f64);
            file!(train.weights.ssim, "lambda-ssim", f64);
            file!(train.weights.perceptual, "lambda-perceptual", f64);
            file!(train.weights.track, "lambda-track", f64);
            file!(train.sliced_fusion, "sliced-fusion", bool);
            file!(train.tracking, "tracking", bool);
            file!(model.dim, "dim", usize);
            file!(model.pairs, "pairs", usize);
            file!(model.heads, "heads", usize);
            file!(model.patch, "patch", usize);
            file!(model.mlp_ratio, "mlp-ratio", usize);
            file!(model.prompt_freqs, "prompt-freqs", usize);
            file!(model.max_frames, "max-frames", usize);
            if let Some(unknown) = kv.keys().next() {
                return Err(Error::format(
                    path.display(),
                    format!("unknown config key: {unknown}"),
                ));
            }
        }

        macro_rules! flag {
            ($field:expr, $opt:expr) => {
                if let Some(v) = $opt {
                    $field = v;
                }
            };
        }
        flag!(train.steps, self.steps);
        flag!(train.optimizer.learning_rate, self.lr);
        flag!(train.optimizer.beta1, self.beta1);
        flag!(train.optimizer.beta2, self.beta2);
        flag!(train.optimizer.weight_decay, self.weight_decay);
        flag!(train.frames_min, self.frames_min);
        flag!(train.frames_max, self.frames_max);
        flag!(train.extra_targets, self.extra_targets);
        flag!(train.seed, self.seed);
        flag!(train.checkpoint_interval, self.checkpoint_interval);
        flag!(train.weights.rgb, self.lambda_rgb);
        flag!(train.weights.ssim, self.lambda_ssim);
        flag!(train.weights.perceptual, self.lambda_perceptual);
        flag!(train.weights.track, self.lambda_track);
        flag!(train.sliced_fusion, self.sliced_fusion);
        flag!(train.tracking, self.tracking);
        flag!(model.dim, self.dim);
        flag!(model.pairs, self.pairs);
        flag!(model.heads, self.heads);
        flag!(model.patch, self.patch);
        flag!(model.mlp_ratio, self.mlp_ratio);
        flag!(model.prompt_freqs, self.prompt_freqs);
        flag!(model.max_frames, self.max_frames);

        train.validate()?;
        Ok(Resolved { train, model })
    }
}

impl Resolved {
    /// The full key = value listing printed at the start of every run.
    pub fn print(&self) {
        let t = &self.train;
        let m = &self.model;
        println!("resolved config:");
        for (k, v) in [
            ("steps", t.steps.to_string()),
            ("lr", t.optimizer.learning_rate.to_string()),
            ("beta1", t.optimizer.beta1.to_string()),
            ("beta2", t.optimizer.beta2.to_string()),
            ("weight-decay", t.optimizer.weight_decay.to_string()),
            ("frames-min", t.frames_min.to_string()),
            ("frames-max", t.frames_max.to_string()),
            ("extra-targets", t.extra_targets.to_string()),
            ("seed", t.seed.to_string()),
            ("checkpoint-interval", t.checkpoint_interval.to_string()),
            ("lambda-rgb", t.weights.rgb.to_string()),
            ("lambda-ssim", t.weights.ssim.to_string()),
            ("lambda-perceptual", t.weights.perceptual.to_string()),
            ("lambda-track", t.weights.track.to_string()),
            ("sliced-fusion", t.sliced_fusion.to_string()),
            ("tracking", t.tracking.to_string()),
            ("dim", m.dim.to_string()),
            ("pairs", m.pairs.to_string()),
            ("heads", m.heads.to_string()),
            ("patch", m.patch.to_string()),
            ("mlp-ratio", m.mlp_ratio.to_string()),
            ("prompt-freqs", m.prompt_freqs.to_string()),
            ("max-frames", m.max_frames.to_string()),
        ] {
            println!("  {k} = {v}");
        }
    }
}
