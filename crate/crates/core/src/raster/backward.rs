//! Analytic backward pass of the tile rasterizer.
//!
//! Each pixel re-walks its consumed tile-list prefix back to front,
//! reconstructing per-splat transmittance from the stored final value.
//! Per-tile gradient partials are merged in tile index order, so the result
//! is independent of the thread count.

use super::{RasterTape, Splat2D, ALPHA_MAX, POWER_CUTOFF, TILE};
use crate::error::{Error, Result};
use crate::real::{lit, Real};
use rayon::prelude::*;

/// Gradients with respect to every 2-D splat field.
#[derive(Clone, Debug)]
pub struct SplatGrads<T> {
    pub mean: Vec<[T; 2]>,
    pub cov: Vec<[T; 3]>,
    pub color: Vec<[T; 3]>,
    pub opacity: Vec<T>,
}

impl<T: Real> SplatGrads<T> {
    fn zeros(n: usize) -> Self {
        SplatGrads {
            mean: vec![[T::ZERO; 2]; n],
            cov: vec![[T::ZERO; 3]; n],
            color: vec![[T::ZERO; 3]; n],
            opacity: vec![T::ZERO; n],
        }
    }
}

/// Propagate `grad_image` (H×W×3, same layout as the forward output) to all
/// splat fields. `splats` must be the array the tape was produced from.
pub fn rasterize_backward<T: Real>(
    tape: &RasterTape<T>,
    splats: &[Splat2D<T>],
    grad_image: &[T],
) -> SplatGrads<T> {
    let (width, height) = (tape.width, tape.height);
    debug_assert_eq!(grad_image.len(), width * height * 3);
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let bg = tape.background;
    let alpha_max = lit::<T>(ALPHA_MAX);
    let cutoff = lit::<T>(POWER_CUTOFF);
    let half = lit::<T>(0.5);

    // (d_mean2, d_conic3, d_color3, d_opacity) per tile-list entry.
    type Partial<T> = [T; 9];
    let tile_partials: Vec<Vec<Partial<T>>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let px0 = tx * TILE;
            let py0 = ty * TILE;
            let tw = TILE.min(width - px0);
            let th = TILE.min(height - py0);
            let list =
                &tape.tile_entries[tape.tile_ranges[ti].0 as usize..tape.tile_ranges[ti].1 as usize];
            let mut part: Vec<Partial<T>> = vec![[T::ZERO; 9]; list.len()];
            for py in 0..th {
                for px in 0..tw {
                    let gp = (py0 + py) * width + px0 + px;
                    let g = [
                        grad_image[gp * 3],
                        grad_image[gp * 3 + 1],
                        grad_image[gp * 3 + 2],
                    ];
                    if g[0] == T::ZERO && g[1] == T::ZERO && g[2] == T::ZERO {
                        continue;
                    }
                    let n = tape.n_contrib[gp] as usize;
                    if n == 0 {
                        continue;
                    }
                    let pcx = T::from_usize(px0 + px) + half;
                    let pcy = T::from_usize(py0 + py) + half;
                    let t_final = tape.t_final[gp];
                    let mut t_after = t_final;
                    // Suffix color sum Σ_{j>k} c_j α_j T_j per channel.
                    let mut suffix = [T::ZERO; 3];
                    for k in (0..n).rev() {
                        let si = list[k] as usize;
                        let s = &splats[si];
                        let con = &tape.conics[si];
                        let dx = pcx - s.mean[0];
                        let dy = pcy - s.mean[1];
                        let power =
                            -half * (con[0] * dx * dx + con[2] * dy * dy) - con[1] * dx * dy;
                        if power < cutoff {
                            continue;
                        }
                        let gk = power.exp();
                        let raw = s.opacity * gk;
                        let clamped = raw > alpha_max;
                        let alpha = if clamped { alpha_max } else { raw };
                        let one_m = T::ONE - alpha;
                        let t_before = t_after / one_m;
                        let w = alpha * t_before;

                        // d color
                        let p = &mut part[k];
                        p[5] += g[0] * w;
                        p[6] += g[1] * w;
                        p[7] += g[2] * w;

                        // d alpha
                        let mut d_alpha = T::ZERO;
                        for ch in 0..3 {
                            d_alpha += g[ch]
                                * (s.color[ch] * t_before
                                    - (suffix[ch] + bg[ch] * t_final) / one_m);
                        }
                        if !clamped {
                            // α = o·G
                            p[8] += d_alpha * gk;
                            let d_power = d_alpha * s.opacity * gk;
                            // power = −½(A dx² + C dy²) − B dx dy
                            p[2] += d_power * (-half * dx * dx);
                            p[3] += d_power * (-dx * dy);
                            p[4] += d_power * (-half * dy * dy);
                            // d = pixel − mean ⇒ ∂power/∂mean = (A dx + B dy, B dx + C dy)
                            p[0] += d_power * (con[0] * dx + con[1] * dy);
                            p[1] += d_power * (con[1] * dx + con[2] * dy);
                        }

                        for ch in 0..3 {
                            suffix[ch] += s.color[ch] * w;
                        }
                        t_after = t_before;
                    }
                }
            }
            part
        })
        .collect();

    // Merge tile partials in fixed tile order, mapping conic grads to
    // covariance grads per splat at the end.
    let n_splats = splats.len();
    let mut d_mean = vec![[T::ZERO; 2]; n_splats];
    let mut d_conic = vec![[T::ZERO; 3]; n_splats];
    let mut out = SplatGrads::zeros(n_splats);
    for (ti, part) in tile_partials.iter().enumerate() {
        let list =
            &tape.tile_entries[tape.tile_ranges[ti].0 as usize..tape.tile_ranges[ti].1 as usize];
        for (k, p) in part.iter().enumerate() {
            let si = list[k] as usize;
            d_mean[si][0] += p[0];
            d_mean[si][1] += p[1];
            d_conic[si][0] += p[2];
            d_conic[si][1] += p[3];
            d_conic[si][2] += p[4];
            out.color[si][0] += p[5];
            out.color[si][1] += p[6];
            out.color[si][2] += p[7];
            out.opacity[si] += p[8];
        }
    }
    out.mean = d_mean;

    // conic = Σ⁻¹ for Σ = [[a,b],[b,c]]:
    //   A = c/det, B = −b/det, C = a/det, det = ac − b²
    out.cov = splats
        .par_iter()
        .zip(d_conic.par_iter())
        .map(|(s, dcn)| {
            let (a, b, c) = (s.cov[0], s.cov[1], s.cov[2]);
            let det = a * c - b * b;
            let det2 = (det * det).recip();
            let (da_, db_, dc_) = (dcn[0], dcn[1], dcn[2]);
            let two = lit::<T>(2.0);
            [
                det2 * (-da_ * c * c + db_ * b * c - dc_ * b * b),
                det2 * (two * da_ * b * c - db_ * (a * c + b * b) + two * dc_ * a * b),
                det2 * (-da_ * b * b + db_ * a * b - dc_ * a * a),
            ]
        })
        .collect();
    out
}

/// Stateful wrapper enforcing the retained-forward contract.
pub struct Rasterizer<T: Real> {
    retained: Option<(RasterTape<T>, Vec<Splat2D<T>>)>,
}

impl<T: Real> Default for Rasterizer<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Rasterizer<T> {
    pub fn new() -> Self {
        Rasterizer { retained: None }
    }

    pub fn forward(
        &mut self,
        splats: Vec<Splat2D<T>>,
        width: usize,
        height: usize,
        background: [T; 3],
    ) -> Result<super::RenderOutput<T>> {
        let (out, tape) = super::rasterize_retained(&splats, width, height, background)?;
        self.retained = Some((tape, splats));
        Ok(out)
    }

    /// Errors when no forward pass was retained.
    pub fn backward(&self, grad_image: &[T]) -> Result<SplatGrads<T>> {
        match &self.retained {
            None => Err(Error::contract(
                "rasterize_backward",
                "no retained forward pass",
            )),
            Some((tape, splats)) => Ok(rasterize_backward(tape, splats, grad_image)),
        }
    }
}
