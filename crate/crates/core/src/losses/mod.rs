//! Training losses: sliced-fusion photometric terms (L1, SSIM, perceptual
//! proxy), landmark tracking, and the weighted total, plus the PSNR/SSIM
//! metrics shared by evaluation.

pub mod perceptual;
pub mod ssim;

pub use perceptual::{perceptual_loss, PerceptualPyramid};
pub use ssim::{ssim_index, ssim_loss_term, SSIM_WINDOW};

use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

/// Weights of the total objective. Defaults are the published values
/// (1.0, 0.2, 0.2, 0.05).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub track: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rgb: 1.0,
            ssim: 0.2,
            perceptual: 0.2,
            track: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.rgb < 0.0 || self.ssim < 0.0 || self.perceptual < 0.0 || self.track < 0.0 {
            return Err(Error::contract("LossWeights", "weights must be ≥ 0"));
        }
        Ok(())
    }
}

/// Per-step loss decomposition, serialized as one JSON line in the log.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub rgb: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub track: f64,
    /// Render PSNR of the single-frame term, for logging only.
    pub psnr: f64,
}

/// Unweighted loss parts as graph scalars.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub rgb: Tensor,
    pub ssim: Tensor,
    pub perceptual: Tensor,
    pub track: Tensor,
}

/// Eq.-style two-term photometric L1: mean|Î − gt| + mean|Î_sliced − gt|.
pub fn rgb_loss<T: Real>(
    g: &mut Graph<T>,
    single: Tensor,
    sliced: Tensor,
    gt: Tensor,
) -> Result<Tensor> {
    if single.shape() != gt.shape() || sliced.shape() != gt.shape() {
        return Err(Error::dim("rgb_loss", single.shape(), gt.shape()));
    }
    let a = g.l1(single, gt)?;
    let b = g.l1(sliced, gt)?;
    g.add(a, b)
}

/// Two-term SSIM loss: (1 − SSIM(Î, gt)) + (1 − SSIM(Î_sliced, gt)).
pub fn ssim_loss<T: Real>(
    g: &mut Graph<T>,
    single: Tensor,
    sliced: Tensor,
    gt: Tensor,
) -> Result<Tensor> {
    let a = ssim_loss_term(g, single, gt)?;
    let b = ssim_loss_term(g, sliced, gt)?;
    g.add(a, b)
}

/// Landmark tracking loss: mean over N frames and M landmarks of the
/// Euclidean distance between prediction and ground truth, with pixel
/// coordinates normalized by the image width.
pub fn tracking_loss<T: Real>(
    g: &mut Graph<T>,
    predictions: &[Tensor],
    ground_truth: Tensor,
    image_width: usize,
) -> Result<Tensor> {
    if predictions.is_empty() {
        return Err(Error::contract("tracking_loss", "no predictions"));
    }
    let pred = g.concat_rows(predictions)?;
    if pred.shape() != ground_truth.shape() {
        return Err(Error::dim(
            "tracking_loss",
            pred.shape(),
            ground_truth.shape(),
        ));
    }
    let d = g.sub(pred, ground_truth)?;
    let d = g.scale(d, T::from_usize(image_width).recip());
    let sq = g.mul(d, d)?;
    let row = g.sum_rows(sq)?;
    let dist = g.sqrt(row);
    Ok(g.mean_all(dist))
}

/// Weighted sum with decomposition report. The single-frame render and
/// ground truth are only used to attach a PSNR to the report.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    parts: LossParts,
    weights: &LossWeights,
    psnr: f64,
) -> Result<(Tensor, LossReport)> {
    weights.validate()?;
    let wr = g.scale(parts.rgb, lit(weights.rgb));
    let ws = g.scale(parts.ssim, lit(weights.ssim));
    let wp = g.scale(parts.perceptual, lit(weights.perceptual));
    let wt = g.scale(parts.track, lit(weights.track));
    let t1 = g.add(wr, ws)?;
    let t2 = g.add(wp, wt)?;
    let total = g.add(t1, t2)?;
    let report = LossReport {
        total: g.scalar_value(total).to_f64(),
        rgb: g.scalar_value(parts.rgb).to_f64(),
        ssim: g.scalar_value(parts.ssim).to_f64(),
        perceptual: g.scalar_value(parts.perceptual).to_f64(),
        track: g.scalar_value(parts.track).to_f64(),
        psnr,
    };
    Ok((total, report))
}

/// PSNR in dB over [0,1] images; identical images report the 99.0 cap.
pub fn psnr<T: Real>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut mse = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x.to_f64() - y.to_f64();
        mse += d * d;
    }
    mse /= a.len().max(1) as f64;
    if mse <= 0.0 {
        return 99.0;
    }
    (10.0 * (1.0 / mse).log10()).min(99.0)
}

/// Metric-side SSIM index between two H×W×3 images, computed through the
/// same graph code path as the training loss.
pub fn ssim_metric<T: Real>(a: &[T], b: &[T], width: usize, height: usize) -> Result<f64> {
    let mut g: Graph<T> = Graph::new();
    let at = g.constant(hwc_to_chw(a, width, height), &[3, height, width]);
    let bt = g.constant(hwc_to_chw(b, width, height), &[3, height, width]);
    let idx = ssim_index(&mut g, at, bt)?;
    Ok(g.scalar_value(idx).to_f64())
}

/// H×W×3 → [3,H,W] buffer.
pub fn hwc_to_chw<T: Real>(img: &[T], width: usize, height: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; img.len()];
    for p in 0..width * height {
        for c in 0..3 {
            out[c * width * height + p] = img[p * 3 + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn img_const(v: f64, n: usize) -> Vec<f64> {
        vec![v; 3 * n * n]
    }

    #[test]
    fn rgb_loss_zero_at_perfect_and_constant_offset() {
        let n = 8;
        let gt = img_const(0.4, n);
        let plus = img_const(0.5, n);
        let mut g: Graph<f64> = Graph::new();
        let gt_t = g.constant(gt.clone(), &[3, n, n]);
        let eq_t = g.constant(gt.clone(), &[3, n, n]);
        let off_t = g.constant(plus, &[3, n, n]);
        let zero = rgb_loss(&mut g, eq_t, eq_t, gt_t).unwrap();
        assert_eq!(g.scalar_value(zero), 0.0);
        let l = rgb_loss(&mut g, off_t, eq_t, gt_t).unwrap();
        assert!((g.scalar_value(l) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rgb_loss_gradient_matches_fd() {
        let n = 4;
        let mut rng = crate::rng::stream(51, "rgb-fd");
        let gt: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x0: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let run = |x: &[f64]| {
            let mut g: Graph<f64> = Graph::new();
            let xt = g.leaf(x.to_vec(), &[3, n, n]);
            let gt_t = g.constant(gt.clone(), &[3, n, n]);
            let l = rgb_loss(&mut g, xt, xt, gt_t).unwrap();
            g.backward(l).unwrap();
            (g.scalar_value(l), g.grad(xt).unwrap().to_vec())
        };
        let (_, grad) = run(&x0);
        for i in (0..x0.len()).step_by(7) {
            let mut xp = x0.clone();
            xp[i] += 1e-6;
            let mut xm = x0.clone();
            xm[i] -= 1e-6;
            let num = (run(&xp).0 - run(&xm).0) / 2e-6;
            assert!(
                (grad[i] - num).abs() / num.abs().max(1e-8) < 1e-4,
                "{}: {} vs {num}",
                i,
                grad[i]
            );
        }
    }

    #[test]
    fn tracking_loss_examples() {
        // ŷ == y → 0
        let mut g: Graph<f64> = Graph::new();
        let y = g.constant(vec![10.0, 12.0], &[1, 2]);
        let p = g.constant(vec![10.0, 12.0], &[1, 2]);
        let l = tracking_loss(&mut g, &[p], y, 64).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        // one landmark off by (3,4) px at W=64 → 5/64 = 0.078125
        let mut g: Graph<f64> = Graph::new();
        let y = g.constant(vec![10.0, 12.0], &[1, 2]);
        let p = g.constant(vec![13.0, 16.0], &[1, 2]);
        let l = tracking_loss(&mut g, &[p], y, 64).unwrap();
        assert!((g.scalar_value(l) - 0.078125).abs() < 1e-12);
    }

    #[test]
    fn tracking_gradient_points_from_prediction_toward_target() {
        let mut g: Graph<f64> = Graph::new();
        let y = g.constant(vec![20.0, 30.0], &[1, 2]);
        let p = g.leaf(vec![26.0, 38.0], &[1, 2]);
        let l = tracking_loss(&mut g, &[p], y, 64).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(p).unwrap();
        // descent direction −grad must point from ŷ toward y
        assert!(grad[0] > 0.0 && grad[1] > 0.0);
        let (dx, dy) = (26.0 - 20.0, 38.0 - 30.0);
        // gradient parallel to (ŷ−y)
        assert!((grad[0] * dy - grad[1] * dx).abs() < 1e-9);
    }

    #[test]
    fn tracking_invariant_under_consistent_frame_permutation() {
        let mut rng = crate::rng::stream(53, "track-perm");
        let m = 4;
        let frames: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..m * 2).map(|_| rng.gen_range(0.0..64.0)).collect())
            .collect();
        let gts: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..m * 2).map(|_| rng.gen_range(0.0..64.0)).collect())
            .collect();
        let run = |order: &[usize]| {
            let mut g: Graph<f64> = Graph::new();
            let preds: Vec<_> = order
                .iter()
                .map(|&i| g.constant(frames[i].clone(), &[m, 2]))
                .collect();
            let gt: Vec<f64> = order.iter().flat_map(|&i| gts[i].clone()).collect();
            let gt = g.constant(gt, &[3 * m, 2]);
            let l = tracking_loss(&mut g, &preds, gt, 64).unwrap();
            g.scalar_value(l)
        };
        assert!((run(&[0, 1, 2]) - run(&[2, 0, 1])).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights_and_decomposition() {
        let w = LossWeights::default();
        assert_eq!((w.rgb, w.ssim, w.perceptual, w.track), (1.0, 0.2, 0.2, 0.05));

        let mut g: Graph<f64> = Graph::new();
        let one = g.constant(vec![1.0], &[1]);
        let parts = LossParts {
            rgb: one,
            ssim: one,
            perceptual: one,
            track: one,
        };
        let (t, rep) = total_loss(&mut g, parts, &w, 0.0).unwrap();
        assert!((g.scalar_value(t) - 1.45).abs() < 1e-12);
        assert!(
            (rep.total
                - (w.rgb * rep.rgb
                    + w.ssim * rep.ssim
                    + w.perceptual * rep.perceptual
                    + w.track * rep.track))
                .abs()
                < 1e-6
        );

        let zero_w = LossWeights {
            rgb: 0.0,
            ssim: 0.0,
            perceptual: 0.0,
            track: 0.0,
        };
        let mut g: Graph<f64> = Graph::new();
        let big = g.constant(vec![7.0], &[1]);
        let parts = LossParts {
            rgb: big,
            ssim: big,
            perceptual: big,
            track: big,
        };
        let (t, _) = total_loss(&mut g, parts, &zero_w, 0.0).unwrap();
        assert_eq!(g.scalar_value(t), 0.0);

        let neg = LossWeights {
            rgb: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = vec![0.0f64; 12];
        let b = vec![0.5f64; 12];
        // all-black vs mid-gray: PSNR = 10·log10(1/0.25) ≈ 6.0206
        assert!((psnr(&a, &b) - 6.020599913279624).abs() < 1e-9);
        assert_eq!(psnr(&a, &a), 99.0);
    }
}
