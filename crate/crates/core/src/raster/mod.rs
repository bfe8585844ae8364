//! Differentiable tile-based Gaussian splat rasterizer.
//!
//! Forward: project 3-D Gaussians to 2-D splats (EWA-style covariance
//! transport), bin them into 16×16 pixel tiles by their 3σ ellipse, then
//! composite front-to-back per pixel with early termination. The splat
//! kernel is defined as
//!
//! `α(p) = min(0.99, o · exp(−½ dᵀ Σ₂⁻¹ d))` for `dᵀ Σ₂⁻¹ d ≤ 9`, else 0,
//!
//! i.e. support is cut at the same 3σ ellipse used for tile binning, so a
//! brute-force per-pixel evaluation of all splats computes the identical
//! image. Compositing per pixel stops once transmittance drops below 1e-4.
//!
//! Tiles are processed in parallel; every pixel is owned by exactly one tile
//! and per-splat gradients are merged in tile order, so results do not
//! depend on the thread count.

pub mod backward;
pub mod diff;

pub use backward::{rasterize_backward, Rasterizer, SplatGrads};
pub use diff::{
    render_backward, render_forward, render_into_graph, AttrView, GaussianGrads, RenderSaved,
};

use crate::avatar::math::{mat3_mul_vec, quat_to_mat3};
use crate::avatar::{Camera, GaussianSet};
use crate::error::{Error, Result};
use crate::real::{lit, Real};
use rayon::prelude::*;

pub const TILE: usize = 16;
/// Low-pass floor added to the projected covariance diagonal (px²).
pub const COV_FLOOR: f64 = 0.3;
/// Opacity clamp per splat contribution.
pub const ALPHA_MAX: f64 = 0.99;
/// Early termination threshold on transmittance.
pub const T_MIN: f64 = 1e-4;
/// Kernel support: dᵀΣ⁻¹d ≤ 9 (3σ), i.e. power ≥ −4.5.
pub const POWER_CUTOFF: f64 = -4.5;

/// A Gaussian projected to the image plane.
#[derive(Clone, Debug)]
pub struct Splat2D<T> {
    /// Pixel-space mean (u, v).
    pub mean: [T; 2],
    /// Upper triangle (a, b, c) of the 2×2 pixel-space covariance,
    /// low-pass floor included.
    pub cov: [T; 3],
    /// View-space depth (camera units), > near.
    pub depth: T,
    /// Linear RGB.
    pub color: [T; 3],
    /// In (0, 1).
    pub opacity: T,
    /// Index of the source point; breaks depth ties deterministically.
    pub point_index: usize,
}

/// Rendered image plus per-pixel alpha and final transmittance.
#[derive(Clone, Debug)]
pub struct RenderOutput<T> {
    pub width: usize,
    pub height: usize,
    /// H×W×3 row-major, linear RGB.
    pub image: Vec<T>,
    /// H×W, `1 − transmittance`.
    pub alpha: Vec<T>,
    /// H×W final transmittance.
    pub transmittance: Vec<T>,
}

pub struct ProjectOutput<T> {
    pub splats: Vec<Splat2D<T>>,
    /// Number of points culled by the near/far planes.
    pub culled: usize,
}

/// Project effective positions (anchor + offset) of a world-space Gaussian
/// set through a pinhole camera. Points outside [near, far] are culled.
pub fn project<T: Real>(g: &GaussianSet<T>, cam: &Camera<T>) -> ProjectOutput<T> {
    let rot_wc = quat_to_mat3(&cam.rotation);
    let mut splats = Vec::with_capacity(g.len());
    let mut culled = 0;
    for i in 0..g.len() {
        let p_w = g.position(i);
        let p_c = crate::avatar::math::vec3_add(&mat3_mul_vec(&rot_wc, &p_w), &cam.translation);
        let z = p_c[2];
        if z < cam.near || z > cam.far {
            culled += 1;
            continue;
        }
        let rot_point = quat_to_mat3(&g.rotations[i]);
        let cov = projected_cov(&rot_point, &g.scales[i], &rot_wc, &p_c, cam);
        splats.push(Splat2D {
            mean: [cam.fx * p_c[0] / z + cam.cx, cam.fy * p_c[1] / z + cam.cy],
            cov,
            depth: z,
            color: g.colors[i],
            opacity: g.opacities[i],
            point_index: i,
        });
    }
    ProjectOutput { splats, culled }
}

/// 2-D covariance of a splat: Σ₂ = T Σ₃ Tᵀ + floor·I with T = J·W.
fn projected_cov<T: Real>(
    rot_point: &[T; 9],
    scale: &[T; 3],
    rot_wc: &[T; 9],
    p_c: &[T; 3],
    cam: &Camera<T>,
) -> [T; 3] {
    // M = R·diag(s); Σ₃ = M·Mᵀ
    let mut m = [T::ZERO; 9];
    for r in 0..3 {
        for c in 0..3 {
            m[r * 3 + c] = rot_point[r * 3 + c] * scale[c];
        }
    }
    let mut sigma3 = [T::ZERO; 9];
    for r in 0..3 {
        for c in 0..3 {
            sigma3[r * 3 + c] =
                m[r * 3] * m[c * 3] + m[r * 3 + 1] * m[c * 3 + 1] + m[r * 3 + 2] * m[c * 3 + 2];
        }
    }
    let t2 = proj_linear(rot_wc, p_c, cam);
    // Σ₂ = T Σ₃ Tᵀ
    let mut ts = [T::ZERO; 6]; // T·Σ₃ (2×3)
    for r in 0..2 {
        for c in 0..3 {
            ts[r * 3 + c] = t2[r * 3] * sigma3[c]
                + t2[r * 3 + 1] * sigma3[3 + c]
                + t2[r * 3 + 2] * sigma3[6 + c];
        }
    }
    let floor = lit::<T>(COV_FLOOR);
    [
        ts[0] * t2[0] + ts[1] * t2[1] + ts[2] * t2[2] + floor,
        ts[0] * t2[3] + ts[1] * t2[4] + ts[2] * t2[5],
        ts[3] * t2[3] + ts[4] * t2[4] + ts[5] * t2[5] + floor,
    ]
}

/// T = J·W: the perspective Jacobian times the world-to-camera rotation.
fn proj_linear<T: Real>(rot_wc: &[T; 9], p_c: &[T; 3], cam: &Camera<T>) -> [T; 6] {
    let (x, y, z) = (p_c[0], p_c[1], p_c[2]);
    let zi = z.recip();
    let zi2 = zi * zi;
    // J = [fx/z, 0, −fx·x/z²; 0, fy/z, −fy·y/z²]
    let j = [
        cam.fx * zi,
        T::ZERO,
        -cam.fx * x * zi2,
        T::ZERO,
        cam.fy * zi,
        -cam.fy * y * zi2,
    ];
    let mut t = [T::ZERO; 6];
    for r in 0..2 {
        for c in 0..3 {
            t[r * 3 + c] =
                j[r * 3] * rot_wc[c] + j[r * 3 + 1] * rot_wc[3 + c] + j[r * 3 + 2] * rot_wc[6 + c];
        }
    }
    t
}

/// Per-pixel forward state retained for the backward pass.
pub struct RasterTape<T> {
    pub width: usize,
    pub height: usize,
    pub background: [T; 3],
    /// Conic (inverse covariance) per splat, parallel to the input array.
    pub conics: Vec<[T; 3]>,
    /// Per tile: range into `tile_entries`.
    pub tile_ranges: Vec<(u32, u32)>,
    /// Depth-ordered splat indices per tile, concatenated.
    pub tile_entries: Vec<u32>,
    /// H×W: how many entries of the pixel's tile list were consumed.
    pub n_contrib: Vec<u32>,
    /// H×W final transmittance.
    pub t_final: Vec<T>,
}

/// Forward rasterization. See the module docs for the kernel contract.
pub fn rasterize<T: Real>(
    splats: &[Splat2D<T>],
    width: usize,
    height: usize,
    background: [T; 3],
) -> Result<RenderOutput<T>> {
    rasterize_retained(splats, width, height, background).map(|(out, _)| out)
}

/// Forward rasterization, also returning the tape needed by
/// [`rasterize_backward`].
pub fn rasterize_retained<T: Real>(
    splats: &[Splat2D<T>],
    width: usize,
    height: usize,
    background: [T; 3],
) -> Result<(RenderOutput<T>, RasterTape<T>)> {
    for (i, s) in splats.iter().enumerate() {
        let finite = s.mean.iter().all(|v| v.is_finite())
            && s.cov.iter().all(|v| v.is_finite())
            && s.depth.is_finite()
            && s.color.iter().all(|v| v.is_finite())
            && s.opacity.is_finite();
        if !finite {
            return Err(Error::contract(
                "rasterize",
                format!("non-finite parameters in splat {i}"),
            ));
        }
    }

    // Front-to-back order, ties broken by point index.
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
        sa.depth
            .partial_cmp(&sb.depth)
            .unwrap()
            .then(sa.point_index.cmp(&sb.point_index))
    });

    let conics: Vec<[T; 3]> = splats.iter().map(conic_of).collect();

    // Tile binning by the 3σ ellipse's bounding box.
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &si in &order {
        let s = &splats[si as usize];
        let rx = (lit::<T>(3.0) * s.cov[0].sqrt()).to_f64();
        let ry = (lit::<T>(3.0) * s.cov[2].sqrt()).to_f64();
        let (mx, my) = (s.mean[0].to_f64(), s.mean[1].to_f64());
        if mx + rx < 0.0 || my + ry < 0.0 || mx - rx > width as f64 || my - ry > height as f64 {
            continue;
        }
        let x0 = ((mx - rx).max(0.0) as usize) / TILE;
        let y0 = ((my - ry).max(0.0) as usize) / TILE;
        let x1 = (((mx + rx).max(0.0) as usize) / TILE).min(tiles_x - 1);
        let y1 = (((my + ry).max(0.0) as usize) / TILE).min(tiles_y - 1);
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tile_lists[ty * tiles_x + tx].push(si);
            }
        }
    }
    let mut tile_ranges = Vec::with_capacity(tile_lists.len());
    let mut tile_entries = Vec::new();
    for list in &tile_lists {
        let start = tile_entries.len() as u32;
        tile_entries.extend_from_slice(list);
        tile_ranges.push((start, tile_entries.len() as u32));
    }

    // Composite each tile independently.
    struct TileOut<T> {
        image: Vec<T>,
        trans: Vec<T>,
        n_contrib: Vec<u32>,
    }
    let results: Vec<TileOut<T>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let px0 = tx * TILE;
            let py0 = ty * TILE;
            let tw = TILE.min(width - px0);
            let th = TILE.min(height - py0);
            let list = &tile_entries[tile_ranges[ti].0 as usize..tile_ranges[ti].1 as usize];
            let mut out = TileOut {
                image: vec![T::ZERO; tw * th * 3],
                trans: vec![T::ZERO; tw * th],
                n_contrib: vec![0u32; tw * th],
            };
            let alpha_max = lit::<T>(ALPHA_MAX);
            let t_min = lit::<T>(T_MIN);
            let cutoff = lit::<T>(POWER_CUTOFF);
            let half = lit::<T>(0.5);
            for py in 0..th {
                for px in 0..tw {
                    let pcx = T::from_usize(px0 + px) + half;
                    let pcy = T::from_usize(py0 + py) + half;
                    let mut trans = T::ONE;
                    let mut rgb = [T::ZERO; 3];
                    let mut consumed = 0u32;
                    for &si in list {
                        consumed += 1;
                        let s = &splats[si as usize];
                        let con = &conics[si as usize];
                        let dx = pcx - s.mean[0];
                        let dy = pcy - s.mean[1];
                        let power =
                            -half * (con[0] * dx * dx + con[2] * dy * dy) - con[1] * dx * dy;
                        if power < cutoff {
                            continue;
                        }
                        let alpha = (s.opacity * power.exp()).min(alpha_max);
                        let w = alpha * trans;
                        rgb[0] += s.color[0] * w;
                        rgb[1] += s.color[1] * w;
                        rgb[2] += s.color[2] * w;
                        trans *= T::ONE - alpha;
                        if trans < t_min {
                            break;
                        }
                    }
                    let pi = py * tw + px;
                    out.image[pi * 3] = rgb[0] + trans * background[0];
                    out.image[pi * 3 + 1] = rgb[1] + trans * background[1];
                    out.image[pi * 3 + 2] = rgb[2] + trans * background[2];
                    out.trans[pi] = trans;
                    out.n_contrib[pi] = consumed;
                }
            }
            out
        })
        .collect();

    // Stitch tiles into the full image (sequential, fixed order).
    let mut image = vec![T::ZERO; width * height * 3];
    let mut alpha = vec![T::ZERO; width * height];
    let mut trans = vec![T::ZERO; width * height];
    let mut n_contrib = vec![0u32; width * height];
    for (ti, tile) in results.iter().enumerate() {
        let (tx, ty) = (ti % tiles_x, ti / tiles_x);
        let px0 = tx * TILE;
        let py0 = ty * TILE;
        let tw = TILE.min(width - px0);
        let th = TILE.min(height - py0);
        for py in 0..th {
            let src = py * tw;
            let dst = (py0 + py) * width + px0;
            image[dst * 3..(dst + tw) * 3].copy_from_slice(&tile.image[src * 3..(src + tw) * 3]);
            trans[dst..dst + tw].copy_from_slice(&tile.trans[src..src + tw]);
            n_contrib[dst..dst + tw].copy_from_slice(&tile.n_contrib[src..src + tw]);
        }
    }
    for (a, t) in alpha.iter_mut().zip(&trans) {
        *a = T::ONE - *t;
    }

    Ok((
        RenderOutput {
            width,
            height,
            image,
            alpha,
            transmittance: trans.clone(),
        },
        RasterTape {
            width,
            height,
            background,
            conics,
            tile_ranges,
            tile_entries,
            n_contrib,
            t_final: trans,
        },
    ))
}

/// Inverse of the 2-D covariance. The low-pass floor keeps it well posed.
pub fn conic_of<T: Real>(s: &Splat2D<T>) -> [T; 3] {
    let det = s.cov[0] * s.cov[2] - s.cov[1] * s.cov[1];
    let inv = det.recip();
    [s.cov[2] * inv, -s.cov[1] * inv, s.cov[0] * inv]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::math::quat_identity;

    fn lone_set(pos: [f64; 3]) -> GaussianSet<f64> {
        GaussianSet {
            anchors: vec![pos],
            offsets: vec![[0.0; 3]],
            colors: vec![[1.0, 0.5, 0.25]],
            opacities: vec![0.8],
            scales: vec![[0.01, 0.01, 0.01]],
            rotations: vec![quat_identity()],
        }
    }

    fn axis_camera() -> Camera<f64> {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
            rotation: quat_identity(),
            translation: [0.0; 3],
            width: 64,
            height: 64,
            near: 0.05,
            far: 10.0,
        }
    }

    #[test]
    fn optical_axis_point_hits_principal_point() {
        let cam = axis_camera();
        let out = project(&lone_set([0.0, 0.0, 0.7]), &cam);
        assert_eq!(out.splats.len(), 1);
        assert_eq!(out.culled, 0);
        assert!((out.splats[0].mean[0] - 32.0).abs() < 1e-12);
        assert!((out.splats[0].mean[1] - 32.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_gaussian_axis_aligned_camera_closed_form() {
        // variance = (f·s/d)² + floor for an isotropic splat on the axis
        let cam = axis_camera();
        let d = 0.8;
        let s = 0.012;
        let mut set = lone_set([0.0, 0.0, d]);
        set.scales[0] = [s, s, s];
        let out = project(&set, &cam);
        let want = (cam.fx * s / d) * (cam.fx * s / d) + COV_FLOOR;
        let got = &out.splats[0].cov;
        assert!((got[0] - want).abs() < 1e-9, "{} vs {want}", got[0]);
        assert!((got[2] - want).abs() < 1e-9);
        assert!(got[1].abs() < 1e-12);
    }

    #[test]
    fn near_plane_culls() {
        let cam = axis_camera();
        let mut g = lone_set([0.0, 0.0, 0.7]);
        g.anchors.push([0.0, 0.0, 0.01]);
        g.offsets.push([0.0; 3]);
        g.colors.push([1.0; 3]);
        g.opacities.push(0.5);
        g.scales.push([0.01; 3]);
        g.rotations.push(quat_identity());
        let out = project(&g, &cam);
        assert_eq!(out.splats.len(), 1);
        assert_eq!(out.culled, 1);
    }

    #[test]
    fn empty_scene_renders_background() {
        let out = rasterize::<f64>(&[], 8, 8, [0.2, 0.4, 0.6]).unwrap();
        for p in 0..64 {
            assert_eq!(out.image[p * 3], 0.2);
            assert_eq!(out.image[p * 3 + 1], 0.4);
            assert_eq!(out.image[p * 3 + 2], 0.6);
            assert_eq!(out.alpha[p], 0.0);
        }
    }

    #[test]
    fn coincident_saturated_splats_composite_by_definition() {
        // front opacity at the 0.99 clamp → pixel = 0.99·c_front + 0.01·(rest)
        let mk = |depth: f64, color: [f64; 3], idx: usize| Splat2D {
            mean: [4.5, 4.5],
            cov: [4.0, 0.0, 4.0],
            depth,
            color,
            opacity: 0.9999,
            point_index: idx,
        };
        let splats = vec![mk(1.0, [1.0, 0.0, 0.0], 0), mk(2.0, [0.0, 1.0, 0.0], 1)];
        let out = rasterize(&splats, 9, 9, [0.0; 3]).unwrap();
        let p = (4 * 9 + 4) * 3;
        // kernel at its own center is exp(0)=1 → both alphas capped at 0.99
        assert!((out.image[p] - 0.99).abs() < 1e-12);
        assert!((out.image[p + 1] - 0.01 * 0.99).abs() < 1e-12);
    }

    #[test]
    fn non_finite_splat_is_contract_error() {
        let s = Splat2D {
            mean: [f64::NAN, 0.0],
            cov: [1.0, 0.0, 1.0],
            depth: 1.0,
            color: [0.0; 3],
            opacity: 0.5,
            point_index: 0,
        };
        assert!(rasterize(&[s], 4, 4, [0.0; 3]).is_err());
    }

    #[test]
    fn transmittance_in_unit_interval_and_alpha_consistent() {
        use rand::Rng;
        let mut rng = crate::rng::stream(31, "raster-progress");
        let splats: Vec<Splat2D<f64>> = (0..40)
            .map(|i| Splat2D {
                mean: [rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0)],
                cov: {
                    let a = rng.gen_range(1.0..9.0);
                    let c = rng.gen_range(1.0..9.0);
                    let b = rng.gen_range(-0.5..0.5) * (a * c).sqrt() * 0.5;
                    [a, b, c]
                },
                depth: rng.gen_range(0.5..5.0),
                color: [rng.gen(), rng.gen(), rng.gen()],
                opacity: rng.gen_range(0.05..0.95),
                point_index: i,
            })
            .collect();
        let out = rasterize(&splats, 32, 32, [0.0; 3]).unwrap();
        for p in 0..32 * 32 {
            assert!(out.transmittance[p] >= 0.0 && out.transmittance[p] <= 1.0);
            assert!((out.alpha[p] - (1.0 - out.transmittance[p])).abs() < 1e-12);
        }
    }
}
