//! Differentiable SSIM with the standard 11×11 Gaussian window (σ = 1.5),
//! K1 = 0.01, K2 = 0.03, dynamic range 1.0. Statistics come from valid-mode
//! depthwise convolution, so images must be at least 11×11.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::tensor::{Graph, Tensor};

pub const SSIM_WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window<T: Real>() -> Vec<T> {
    let n = SSIM_WINDOW;
    let c = (n / 2) as f64;
    let mut w = Vec::with_capacity(n * n);
    let mut sum = 0.0;
    for y in 0..n {
        for x in 0..n {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SIGMA * SIGMA)).exp();
            sum += v;
            w.push(v);
        }
    }
    w.into_iter().map(|v| lit(v / sum)).collect()
}

/// Mean SSIM index between two [3,H,W] tensors as a graph scalar.
pub fn ssim_index<T: Real>(g: &mut Graph<T>, a: Tensor, b: Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("ssim", a.shape(), b.shape()));
    }
    if a.shape().rank() != 3 {
        return Err(Error::dim("ssim", a.shape(), "[CxHxW]"));
    }
    if a.shape().dim(1) < SSIM_WINDOW || a.shape().dim(2) < SSIM_WINDOW {
        return Err(Error::contract(
            "ssim",
            format!("image {} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", a.shape()),
        ));
    }
    let win: Arc<Vec<T>> = Arc::new(gaussian_window());
    let blur = |g: &mut Graph<T>, x: Tensor| -> Result<Tensor> {
        g.depthwise_valid(x, win.clone(), SSIM_WINDOW, SSIM_WINDOW)
    };

    let mu_a = blur(g, a)?;
    let mu_b = blur(g, b)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = blur(g, aa)?;
    let e_bb = blur(g, bb)?;
    let e_ab = blur(g, ab)?;

    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let c1 = lit::<T>(K1 * K1);
    let c2 = lit::<T>(K2 * K2);
    let two = lit::<T>(2.0);

    let num1 = {
        let t = g.scale(mu_ab, two);
        let c = g.scalar_const(c1);
        g.add(t, c)?
    };
    let num2 = {
        let t = g.scale(cov, two);
        let c = g.scalar_const(c2);
        g.add(t, c)?
    };
    let den1 = {
        let t = g.add(mu_aa, mu_bb)?;
        let c = g.scalar_const(c1);
        g.add(t, c)?
    };
    let den2 = {
        let t = g.add(var_a, var_b)?;
        let c = g.scalar_const(c2);
        g.add(t, c)?
    };
    let num = g.mul(num1, num2)?;
    let den = g.mul(den1, den2)?;
    let map = g.div(num, den)?;
    Ok(g.mean_all(map))
}

/// One SSIM loss term: 1 − SSIM(a, b), so lower is better and a perfect
/// prediction scores 0.
pub fn ssim_loss_term<T: Real>(g: &mut Graph<T>, a: Tensor, b: Tensor) -> Result<Tensor> {
    let idx = ssim_index(g, a, b)?;
    let one = g.scalar_const(T::ONE);
    g.sub(one, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn index_of(a: &[f64], b: &[f64], n: usize) -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let at = g.constant(a.to_vec(), &[3, n, n]);
        let bt = g.constant(b.to_vec(), &[3, n, n]);
        let i = ssim_index(&mut g, at, bt).unwrap();
        g.scalar_value(i)
    }

    #[test]
    fn identical_images_have_index_one_loss_zero() {
        let mut rng = crate::rng::stream(61, "ssim-id");
        let n = 16;
        let a: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert!((index_of(&a, &a, n) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_images_match_closed_form() {
        let n = 12;
        let (va, vb) = (0.3f64, 0.7f64);
        let a = vec![va; 3 * n * n];
        let b = vec![vb; 3 * n * n];
        let c1 = 1e-4;
        // zero variance: index = (2ab + C1)/(a² + b² + C1)
        let want = (2.0 * va * vb + c1) / (va * va + vb * vb + c1);
        assert!((index_of(&a, &b, n) - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = crate::rng::stream(62, "ssim-sym");
        let n = 14;
        let a: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert!((index_of(&a, &b, n) - index_of(&b, &a, n)).abs() < 1e-7);
    }

    #[test]
    fn small_image_is_contract_error() {
        let n = 8;
        let a = vec![0.5; 3 * n * n];
        let mut g: Graph<f64> = Graph::new();
        let at = g.constant(a.clone(), &[3, n, n]);
        assert!(ssim_index(&mut g, at, at).is_err());
    }

    #[test]
    fn ssim_gradient_matches_fd() {
        let mut rng = crate::rng::stream(63, "ssim-fd");
        let n = 12;
        let gt: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(0.2..0.8)).collect();
        let x0: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(0.2..0.8)).collect();
        let run = |x: &[f64]| {
            let mut g: Graph<f64> = Graph::new();
            let xt = g.leaf(x.to_vec(), &[3, n, n]);
            let gt_t = g.constant(gt.clone(), &[3, n, n]);
            let l = ssim_loss_term(&mut g, xt, gt_t).unwrap();
            g.backward(l).unwrap();
            (g.scalar_value(l), g.grad(xt).unwrap().to_vec())
        };
        let (_, grad) = run(&x0);
        for i in (0..x0.len()).step_by(37) {
            let mut xp = x0.clone();
            xp[i] += 1e-6;
            let mut xm = x0.clone();
            xm[i] -= 1e-6;
            let num = (run(&xp).0 - run(&xm).0) / 2e-6;
            let denom = grad[i].abs().max(num.abs()).max(1e-8);
            let close = (grad[i] - num).abs() / denom < 1e-4 || (grad[i] - num).abs() < 1e-9;
            assert!(close, "{i}: {} vs {num}", grad[i]);
        }
    }
}
