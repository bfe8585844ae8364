//! Perceptual proxy: L2 distance between feature maps of a frozen,
//! seed-fixed 3-layer random convolutional pyramid (stride 2, valid).
//! First-layer filters are normalized to zero mean, so the term responds to
//! high-frequency structure and ignores global brightness shifts.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::tensor::{Conv2dSpec, Graph, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

/// The frozen filter seed.
pub const FILTER_SEED: u64 = 0xFA57;

/// Frozen filter bank: 3 → 8 → 16 → 32 channels, 3×3 kernels, stride 2.
pub struct PerceptualPyramid<T> {
    layers: Vec<Arc<Conv2dSpec<T>>>,
}

impl<T: Real> Default for PerceptualPyramid<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> PerceptualPyramid<T> {
    pub fn new() -> Self {
        let mut rng = crate::rng::Rng::seed_from_u64(FILTER_SEED);
        let dims = [(3usize, 8usize), (8, 16), (16, 32)];
        let layers = dims
            .iter()
            .enumerate()
            .map(|(li, &(cin, cout))| {
                let n = cout * cin * 9;
                let scale = (2.0 / (cin as f64 * 9.0)).sqrt();
                let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
                if li == 0 {
                    // zero-mean filters: no response to constant shifts
                    for f in w.chunks_mut(cin * 9) {
                        let mean = f.iter().sum::<f64>() / f.len() as f64;
                        for v in f.iter_mut() {
                            *v -= mean;
                        }
                    }
                }
                Arc::new(Conv2dSpec::new(
                    w.into_iter().map(lit).collect(),
                    cin,
                    cout,
                    3,
                    2,
                    0,
                ))
            })
            .collect();
        PerceptualPyramid { layers }
    }

    /// Feature maps of the three scales for one [3,H,W] image.
    fn features(&self, g: &mut Graph<T>, img: Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(self.layers.len());
        let mut x = img;
        for spec in &self.layers {
            let y = g.conv2d(x, spec.clone())?;
            let y = g.relu(y);
            feats.push(y);
            x = y;
        }
        Ok(feats)
    }

    /// Mean squared feature distance averaged over the three scales.
    pub fn distance(&self, g: &mut Graph<T>, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::dim("perceptual", a.shape(), b.shape()));
        }
        let fa = self.features(g, a)?;
        let fb = self.features(g, b)?;
        let mut acc: Option<Tensor> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = g.sub(*x, *y)?;
            let sq = g.mul(d, d)?;
            let m = g.mean_all(sq);
            acc = Some(match acc {
                None => m,
                Some(t) => g.add(t, m)?,
            });
        }
        let sum = acc.expect("pyramid has layers");
        Ok(g.scale(sum, lit(1.0 / self.layers.len() as f64)))
    }
}

/// Two-term perceptual loss over the single and sliced renders.
pub fn perceptual_loss<T: Real>(
    g: &mut Graph<T>,
    pyramid: &PerceptualPyramid<T>,
    single: Tensor,
    sliced: Tensor,
    gt: Tensor,
) -> Result<Tensor> {
    let a = pyramid.distance(g, single, gt)?;
    let b = pyramid.distance(g, sliced, gt)?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f64], b: &[f64], n: usize) -> f64 {
        let py = PerceptualPyramid::new();
        let mut g: Graph<f64> = Graph::new();
        let at = g.constant(a.to_vec(), &[3, n, n]);
        let bt = g.constant(b.to_vec(), &[3, n, n]);
        let d = py.distance(&mut g, at, bt).unwrap();
        g.scalar_value(d)
    }

    #[test]
    fn identical_images_have_zero_distance() {
        use rand::Rng;
        let mut rng = crate::rng::stream(71, "perc-id");
        let n = 32;
        let a: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert_eq!(dist(&a, &a, n), 0.0);
    }

    #[test]
    fn deterministic_filters_for_fixed_seed() {
        let p1: PerceptualPyramid<f64> = PerceptualPyramid::new();
        let p2: PerceptualPyramid<f64> = PerceptualPyramid::new();
        for (a, b) in p1.layers.iter().zip(&p2.layers) {
            assert_eq!(a.weights, b.weights);
        }
    }

    #[test]
    fn detects_high_frequency_loss_better_than_l1() {
        // sharp = checkerboard around 0.5; blurred = its 3×3 box blur;
        // shifted = sharp + brightness offset with larger L1 error
        let n = 32;
        let mut sharp = vec![0.0f64; 3 * n * n];
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    let v = if (x + y) % 2 == 0 { 0.6 } else { 0.4 };
                    sharp[c * n * n + y * n + x] = v;
                }
            }
        }
        let mut blurred = sharp.clone();
        for c in 0..3 {
            for y in 1..n - 1 {
                for x in 1..n - 1 {
                    let mut s = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s += sharp[c * n * n + (y + dy - 1) * n + x + dx - 1];
                        }
                    }
                    blurred[c * n * n + y * n + x] = s / 9.0;
                }
            }
        }
        let shifted: Vec<f64> = sharp.iter().map(|v| v + 0.15).collect();

        let l1 = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        };
        // plain L1 prefers the blurred image…
        assert!(l1(&sharp, &blurred) < l1(&sharp, &shifted));
        // …but the perceptual proxy flags the lost high frequencies
        let d_blur = dist(&sharp, &blurred, n);
        let d_shift = dist(&sharp, &shifted, n);
        assert!(d_blur > 0.0);
        assert!(
            d_blur > d_shift,
            "blur distance {d_blur} should exceed brightness-shift distance {d_shift}"
        );
    }

    #[test]
    fn gradient_matches_fd() {
        use rand::Rng;
        let mut rng = crate::rng::stream(73, "perc-fd");
        let n = 16;
        let gt: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x0: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let py = PerceptualPyramid::new();
        let run = |x: &[f64]| {
            let mut g: Graph<f64> = Graph::new();
            let xt = g.leaf(x.to_vec(), &[3, n, n]);
            let gt_t = g.constant(gt.clone(), &[3, n, n]);
            let l = py.distance(&mut g, xt, gt_t).unwrap();
            g.backward(l).unwrap();
            (g.scalar_value(l), g.grad(xt).unwrap().to_vec())
        };
        let (_, grad) = run(&x0);
        for i in (0..x0.len()).step_by(61) {
            let mut xp = x0.clone();
            xp[i] += 1e-6;
            let mut xm = x0.clone();
            xm[i] -= 1e-6;
            let num = (run(&xp).0 - run(&xm).0) / 2e-6;
            let denom = grad[i].abs().max(num.abs()).max(1e-8);
            assert!((grad[i] - num).abs() / denom < 1e-4, "{i}");
        }
    }
}
