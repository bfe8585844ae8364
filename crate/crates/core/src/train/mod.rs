//! Training procedure: sliced-fusion sampling, the per-step graph build,
//! AdamW updates, checkpointing and metrics logging — plus the feedforward
//! reconstruction and evaluation paths shared with the CLI.

pub mod adamw;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use crate::avatar::{deform, deform_context, GaussianSet, HeadProxy};
use crate::error::{Error, Result};
use crate::lgrt::{
    checkpoint, forward_frames, FrameObservation, GaussianTensors, GlobalMode, LgrtModel,
};
use crate::losses::{
    perceptual_loss, psnr, rgb_loss, ssim_loss, ssim_metric, tracking_loss, total_loss,
    LossParts, LossReport, LossWeights, PerceptualPyramid,
};
use crate::raster;
use crate::real::{lit, Real};
use crate::rng::Rng;
use crate::synth::Dataset;
use crate::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Training configuration. The optimizer defaults are lr 4e-5 with a
/// constant schedule, betas (0.9, 0.999), weight decay 0.01.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub steps: usize,
    /// Batch composition: frames per sample drawn uniformly from this range.
    pub frames_min: usize,
    pub frames_max: usize,
    /// Extra held-out target frames supervised per step.
    pub extra_targets: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
    pub weights: LossWeights,
    /// When false the Î_sliced terms are dropped (ablation).
    pub sliced_fusion: bool,
    /// When false the landmark tracking term is dropped (ablation).
    pub tracking: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            steps: 20_000,
            frames_min: 2,
            frames_max: 8,
            extra_targets: 2,
            seed: 0,
            checkpoint_interval: 1000,
            weights: LossWeights::default(),
            sliced_fusion: true,
            tracking: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer.learning_rate <= 0.0 {
            return Err(Error::contract("TrainConfig", "learning rate must be > 0"));
        }
        if self.frames_min < 2 || self.frames_min > self.frames_max {
            return Err(Error::contract(
                "TrainConfig",
                "need 2 ≤ frames_min ≤ frames_max",
            ));
        }
        self.weights.validate()
    }
}

/// Per-step sliced-fusion sampling outcome.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepSample {
    /// The frame rendered alone.
    pub single_index: usize,
    /// The subset fused into g_sliced (no duplicates).
    pub sliced: Vec<usize>,
}

/// Sample the single frame uniformly and a without-replacement subset of
/// size `min(n_sliced, batch − 1)`.
pub fn sample_step(batch_len: usize, n_sliced: usize, rng: &mut Rng) -> Result<StepSample> {
    if batch_len < 2 {
        return Err(Error::contract(
            "sample_step",
            format!("batch of {batch_len} < 2"),
        ));
    }
    let single_index = rng.gen_range(0..batch_len);
    let take = n_sliced.clamp(1, batch_len - 1);
    let mut indices: Vec<usize> = (0..batch_len).collect();
    indices.shuffle(rng);
    indices.truncate(take);
    Ok(StepSample {
        single_index,
        sliced: indices,
    })
}

/// One training-step outcome.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    /// True when non-finite gradients skipped the parameter update.
    pub skipped: bool,
    pub wall_ms: f64,
}

pub struct Trainer<'d, T: Real> {
    pub model: LgrtModel<T>,
    pub config: TrainConfig,
    dataset: &'d Dataset<T>,
    state: OptimizerState<T>,
    rng: Rng,
    pyramid: PerceptualPyramid<T>,
    consecutive_non_finite: usize,
    pub checkpoint_dir: Option<PathBuf>,
    step_index: usize,
}

impl<'d, T: Real> Trainer<'d, T> {
    pub fn new(dataset: &'d Dataset<T>, model: LgrtModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.identities.is_empty() {
            return Err(Error::contract("train", "empty dataset"));
        }
        let state = OptimizerState::zeros(&model.params);
        let rng = crate::rng::stream(config.seed, "train");
        Ok(Trainer {
            model,
            config,
            dataset,
            state,
            rng,
            pyramid: PerceptualPyramid::new(),
            consecutive_non_finite: 0,
            checkpoint_dir: None,
            step_index: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step_index
    }

    /// One identity per step: draw input frames and extra supervision
    /// targets from its pool.
    fn draw_batch(&mut self) -> (usize, Vec<usize>, Vec<usize>) {
        let id_idx = self.rng.gen_range(0..self.dataset.identities.len());
        let pool_len = self.dataset.identities[id_idx].pool.len();
        let n = self
            .rng
            .gen_range(self.config.frames_min..=self.config.frames_max.min(pool_len));
        let mut order: Vec<usize> = (0..pool_len).collect();
        order.shuffle(&mut self.rng);
        let inputs: Vec<usize> = order[..n].to_vec();
        let extras: Vec<usize> =
            order[n..(n + self.config.extra_targets).min(pool_len)].to_vec();
        (id_idx, inputs, extras)
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let t0 = Instant::now();
        let (id_idx, input_idx, extra_idx) = self.draw_batch();
        let id = &self.dataset.identities[id_idx];
        let inputs: Vec<FrameObservation<T>> =
            input_idx.iter().map(|&i| id.pool[i].clone()).collect();
        let targets: Vec<&FrameObservation<T>> = input_idx
            .iter()
            .chain(&extra_idx)
            .map(|&i| &id.pool[i])
            .collect();

        // N_sliced uniform in [2, n−1], clamped for tiny batches
        let n = inputs.len();
        let n_sliced = if n > 3 { self.rng.gen_range(2..=(n - 1)) } else { 2 };
        let sample = sample_step(n, n_sliced, &mut self.rng)?;

        let mut g: Graph<T> = Graph::new();
        let bp = self.model.bind(&mut g);
        let fwd = forward_frames(&mut g, &self.model, &bp, &inputs, GlobalMode::Full)?;

        let single = fwd.groups[sample.single_index];
        let sliced = if self.config.sliced_fusion {
            let groups: Vec<GaussianTensors> =
                sample.sliced.iter().map(|&i| fwd.groups[i]).collect();
            Some(GaussianTensors::fuse(&mut g, &groups)?)
        } else {
            None
        };

        // render both representations against every target frame
        let mut rgb_acc: Option<Tensor> = None;
        let mut ssim_acc: Option<Tensor> = None;
        let mut perc_acc: Option<Tensor> = None;
        let mut psnr_log = 0.0;
        for (ti, tgt) in targets.iter().enumerate() {
            let ctx = Arc::new(deform_context(&self.dataset.proxy, &tgt.ep)?);
            let render = |g: &mut Graph<T>, grp: &GaussianTensors| {
                raster::render_into_graph(
                    g,
                    grp.colors,
                    grp.opacities,
                    grp.scales,
                    grp.rotations,
                    grp.offsets,
                    ctx.clone(),
                    &tgt.camera,
                    [T::ZERO; 3],
                )
            };
            let img_single = render(&mut g, &single)?;
            let img_sliced = match &sliced {
                Some(sl) => Some(render(&mut g, sl)?),
                None => None,
            };
            let gt = g.constant(
                tgt.image.clone(),
                &[3, tgt.camera.height, tgt.camera.width],
            );
            let (r, s, p) = match img_sliced {
                Some(isl) => (
                    rgb_loss(&mut g, img_single, isl, gt)?,
                    ssim_loss(&mut g, img_single, isl, gt)?,
                    perceptual_loss(&mut g, &self.pyramid, img_single, isl, gt)?,
                ),
                None => (
                    g.l1(img_single, gt)?,
                    crate::losses::ssim_loss_term(&mut g, img_single, gt)?,
                    self.pyramid.distance(&mut g, img_single, gt)?,
                ),
            };
            rgb_acc = Some(acc(&mut g, rgb_acc, r)?);
            ssim_acc = Some(acc(&mut g, ssim_acc, s)?);
            perc_acc = Some(acc(&mut g, perc_acc, p)?);
            if ti == 0 {
                psnr_log = psnr(g.data(img_single), g.data(gt));
            }
        }
        let inv_t = lit::<T>(1.0 / targets.len() as f64);
        let rgb = g.scale(rgb_acc.unwrap(), inv_t);
        let ssim = g.scale(ssim_acc.unwrap(), inv_t);
        let perceptual = g.scale(perc_acc.unwrap(), inv_t);

        // landmark tracking on the input frames
        let track = if self.config.tracking {
            let gt_lms: Vec<T> = inputs
                .iter()
                .flat_map(|f| {
                    f.landmarks
                        .as_ref()
                        .expect("synthetic frames carry landmarks")
                        .iter()
                        .flat_map(|lm| [lm[0], lm[1]])
                })
                .collect();
            let m = self.model.config.landmark_count;
            let gt = g.constant(gt_lms, &[inputs.len() * m, 2]);
            tracking_loss(&mut g, &fwd.landmarks, gt, inputs[0].camera.width)?
        } else {
            g.scalar_const(T::ZERO)
        };

        let (total, report) = total_loss(
            &mut g,
            LossParts {
                rgb,
                ssim,
                perceptual,
                track,
            },
            &self.config.weights,
            psnr_log,
        )?;

        // divergence guard: non-finite losses skip the update and, when they
        // persist, abort with a diagnostic
        if !report.total.is_finite() {
            self.consecutive_non_finite += 1;
            if self.consecutive_non_finite >= 10 {
                return Err(Error::NonFinite(format!(
                    "loss non-finite for 10 consecutive steps (at step {})",
                    self.step_index
                )));
            }
            self.step_index += 1;
            return Ok(StepOutcome {
                report,
                skipped: true,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }
        self.consecutive_non_finite = 0;

        g.backward(total)?;
        let grads: Vec<Vec<T>> = bp
            .tensors
            .iter()
            .map(|t| g.grad(*t).expect("parameters require grad").to_vec())
            .collect();
        let finite = grads.iter().all(|gv| gv.iter().all(|v| v.is_finite()));
        let skipped = if finite {
            adamw_step(
                &mut self.model.params,
                &grads,
                &mut self.state,
                &self.config.optimizer,
            );
            false
        } else {
            true
        };

        self.step_index += 1;
        if let Some(dir) = &self.checkpoint_dir {
            let every = self.config.checkpoint_interval;
            if every > 0 && self.step_index % every == 0 {
                checkpoint::save(
                    &self.model,
                    &dir.join(format!("step-{:06}.gsafckpt", self.step_index)),
                )?;
            }
        }
        Ok(StepOutcome {
            report,
            skipped,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Run `steps` steps, invoking `log` after each.
    pub fn run(&mut self, steps: usize, mut log: impl FnMut(usize, &StepOutcome)) -> Result<()> {
        for _ in 0..steps {
            let out = self.step()?;
            log(self.step_index, &out);
        }
        Ok(())
    }
}

fn acc<T: Real>(g: &mut Graph<T>, cur: Option<Tensor>, add: Tensor) -> Result<Tensor> {
    Ok(match cur {
        None => add,
        Some(c) => g.add(c, add)?,
    })
}

/// Feedforward reconstruction: run the model on the given frames and fuse
/// all per-frame groups into one canonical avatar.
pub fn reconstruct<T: Real>(
    model: &LgrtModel<T>,
    frames: &[FrameObservation<T>],
) -> Result<GaussianSet<T>> {
    if frames.is_empty() {
        return Err(Error::contract("reconstruct", "no input frames"));
    }
    let mut g: Graph<T> = Graph::new();
    let bp = model.bind_frozen(&mut g);
    let fwd = forward_frames(&mut g, model, &bp, frames, GlobalMode::Full)?;
    let fused = GaussianTensors::fuse(&mut g, &fwd.groups)?;
    let anchors = model.anchors();
    fused.materialize(&g, &anchors)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalMetrics {
    pub per_frame: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Render an avatar with each target's camera/expression/pose and score it
/// against the ground-truth images (same PSNR/SSIM code as the losses).
pub fn evaluate<T: Real>(
    proxy: &HeadProxy<T>,
    avatar: &GaussianSet<T>,
    targets: &[FrameObservation<T>],
) -> Result<EvalMetrics> {
    let mut per_frame = Vec::with_capacity(targets.len());
    for tgt in targets {
        let world = deform(avatar, proxy, &tgt.ep)?;
        let proj = raster::project(&world, &tgt.camera);
        let out = raster::rasterize(
            &proj.splats,
            tgt.camera.width,
            tgt.camera.height,
            [T::ZERO; 3],
        )?;
        let gt_hwc = chw_to_hwc(&tgt.image, tgt.camera.width, tgt.camera.height);
        per_frame.push(FrameMetrics {
            psnr: psnr(&out.image, &gt_hwc),
            ssim: ssim_metric(&out.image, &gt_hwc, tgt.camera.width, tgt.camera.height)?,
        });
    }
    let n = per_frame.len().max(1) as f64;
    Ok(EvalMetrics {
        mean_psnr: per_frame.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_ssim: per_frame.iter().map(|m| m.ssim).sum::<f64>() / n,
        per_frame,
    })
}

/// [3,H,W] → H×W×3.
pub fn chw_to_hwc<T: Real>(img: &[T], width: usize, height: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; img.len()];
    for p in 0..width * height {
        for c in 0..3 {
            out[p * 3 + c] = img[c * width * height + p];
        }
    }
    out
}

/// Evenly strided held-out input selection for the incremental benchmark.
pub fn strided_inputs<T: Real>(
    pool: &[FrameObservation<T>],
    n: usize,
) -> Vec<FrameObservation<T>> {
    let n = n.min(pool.len()).max(1);
    (0..n).map(|i| pool[i * pool.len() / n].clone()).collect()
}

/// Reconstruct from `n` held-out inputs of one identity and score against
/// its held-out targets.
pub fn eval_identity_at<T: Real>(
    model: &LgrtModel<T>,
    dataset: &Dataset<T>,
    identity_index: usize,
    n_frames: usize,
) -> Result<EvalMetrics> {
    let data = &dataset.identities[identity_index];
    let inputs = strided_inputs(&data.eval_inputs, n_frames);
    let avatar = reconstruct(model, &inputs)?;
    evaluate(&dataset.proxy, &avatar, &data.eval_targets)
}

/// Mean held-out PSNR over all identities at a given input frame count.
pub fn benchmark_psnr<T: Real>(
    model: &LgrtModel<T>,
    dataset: &Dataset<T>,
    n_frames: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..dataset.identities.len() {
        sum += eval_identity_at(model, dataset, i, n_frames)?.mean_psnr;
    }
    Ok(sum / dataset.identities.len().max(1) as f64)
}
