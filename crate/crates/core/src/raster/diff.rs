//! Differentiable render pipeline: deformation → projection → rasterization
//! as one unit, with an analytic backward into the five learnable Gaussian
//! attribute arrays (colors, opacities, scales, rotations, offsets).
//!
//! Deformation context, camera and background are treated as constants;
//! gradients never flow to camera parameters.

use std::sync::Arc;

use super::{
    proj_linear, rasterize_backward, rasterize_retained, RasterTape, RenderOutput,
    Splat2D, COV_FLOOR,
};
use crate::avatar::deform::DeformContext;
use crate::avatar::math::{mat3_mul_vec, mat3_tmul_vec, quat_mul, quat_to_mat3};
use crate::avatar::Camera;
use crate::error::Result;
use crate::real::{lit, Real};
use crate::tensor::{CustomOp, Graph, Tensor};

/// Borrowed views of the flat attribute buffers for P points.
#[derive(Clone, Copy)]
pub struct AttrView<'a, T> {
    /// P×3 linear RGB.
    pub colors: &'a [T],
    /// P, in (0,1).
    pub opacities: &'a [T],
    /// P×3, positive.
    pub scales: &'a [T],
    /// P×4 quaternions; normalized internally, so raw values are accepted.
    pub rotations: &'a [T],
    /// P×3 canonical-space offsets.
    pub offsets: &'a [T],
}

impl<'a, T> AttrView<'a, T> {
    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }
}

/// Gradients into the attribute buffers, dense over all P points.
#[derive(Clone, Debug)]
pub struct GaussianGrads<T> {
    pub colors: Vec<T>,
    pub opacities: Vec<T>,
    pub scales: Vec<T>,
    pub rotations: Vec<T>,
    pub offsets: Vec<T>,
}

/// Per-splat forward intermediates needed by the projection backward.
struct AliveSplat<T> {
    point: u32,
    p_c: [T; 3],
    /// Normalized input quaternion and its pre-normalization magnitude.
    q_n: [T; 4],
    q_mag: T,
    /// World rotation matrix of the composed quaternion.
    rot: [T; 9],
    sigma3: [T; 9],
    /// T = J·W (2×3).
    t2: [T; 6],
}

/// Everything retained by [`render_forward`] for the backward pass.
pub struct RenderSaved<T> {
    alive: Vec<AliveSplat<T>>,
    splats: Vec<Splat2D<T>>,
    tape: RasterTape<T>,
    rot_wc: [T; 9],
    n_points: usize,
}

/// Forward render of P canonical Gaussians under a fixed deformation
/// context and camera. Point i uses the deform maps of vertex `i % V`, so
/// fused multi-group sets repeat the proxy topology.
pub fn render_forward<T: Real>(
    attrs: AttrView<'_, T>,
    ctx: &DeformContext<T>,
    cam: &Camera<T>,
    background: [T; 3],
) -> Result<(RenderOutput<T>, RenderSaved<T>)> {
    let p_count = attrs.len();
    let v = ctx.base_pos.len();
    let rot_wc = quat_to_mat3(&cam.rotation);
    let mut alive = Vec::with_capacity(p_count);
    let mut splats = Vec::with_capacity(p_count);

    for i in 0..p_count {
        let vi = i % v;
        // offsets rotate with the blended skinning rotation
        let off = [
            attrs.offsets[i * 3],
            attrs.offsets[i * 3 + 1],
            attrs.offsets[i * 3 + 2],
        ];
        let p_w = crate::avatar::math::vec3_add(
            &ctx.base_pos[vi],
            &mat3_mul_vec(&ctx.offset_rot[vi], &off),
        );
        let p_c =
            crate::avatar::math::vec3_add(&mat3_mul_vec(&rot_wc, &p_w), &cam.translation);
        let z = p_c[2];
        if z < cam.near || z > cam.far {
            continue;
        }

        let q_raw = [
            attrs.rotations[i * 4],
            attrs.rotations[i * 4 + 1],
            attrs.rotations[i * 4 + 2],
            attrs.rotations[i * 4 + 3],
        ];
        let q_mag = (q_raw[0] * q_raw[0]
            + q_raw[1] * q_raw[1]
            + q_raw[2] * q_raw[2]
            + q_raw[3] * q_raw[3])
            .sqrt();
        let inv = q_mag.recip();
        let q_n = [q_raw[0] * inv, q_raw[1] * inv, q_raw[2] * inv, q_raw[3] * inv];
        let q_world = quat_mul(&ctx.blend_quat[vi], &q_n);
        let rot = quat_to_mat3(&q_world);
        let s = [
            attrs.scales[i * 3],
            attrs.scales[i * 3 + 1],
            attrs.scales[i * 3 + 2],
        ];

        // Σ₃ = M Mᵀ with M = R diag(s)
        let mut m = [T::ZERO; 9];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 3 + c] = rot[r * 3 + c] * s[c];
            }
        }
        let mut sigma3 = [T::ZERO; 9];
        for r in 0..3 {
            for c in 0..3 {
                sigma3[r * 3 + c] = m[r * 3] * m[c * 3]
                    + m[r * 3 + 1] * m[c * 3 + 1]
                    + m[r * 3 + 2] * m[c * 3 + 2];
            }
        }
        let t2 = proj_linear(&rot_wc, &p_c, cam);
        let mut ts = [T::ZERO; 6];
        for r in 0..2 {
            for c in 0..3 {
                ts[r * 3 + c] = t2[r * 3] * sigma3[c]
                    + t2[r * 3 + 1] * sigma3[3 + c]
                    + t2[r * 3 + 2] * sigma3[6 + c];
            }
        }
        let floor = lit::<T>(COV_FLOOR);
        let cov = [
            ts[0] * t2[0] + ts[1] * t2[1] + ts[2] * t2[2] + floor,
            ts[0] * t2[3] + ts[1] * t2[4] + ts[2] * t2[5],
            ts[3] * t2[3] + ts[4] * t2[4] + ts[5] * t2[5] + floor,
        ];

        splats.push(Splat2D {
            mean: [cam.fx * p_c[0] / z + cam.cx, cam.fy * p_c[1] / z + cam.cy],
            cov,
            depth: z,
            color: [
                attrs.colors[i * 3],
                attrs.colors[i * 3 + 1],
                attrs.colors[i * 3 + 2],
            ],
            opacity: attrs.opacities[i],
            point_index: i,
        });
        alive.push(AliveSplat {
            point: i as u32,
            p_c,
            q_n,
            q_mag,
            rot,
            sigma3,
            t2,
        });
    }

    let (out, tape) = rasterize_retained(&splats, cam.width, cam.height, background)?;
    Ok((
        out,
        RenderSaved {
            alive,
            splats,
            tape,
            rot_wc,
            n_points: p_count,
        },
    ))
}

/// Backward: image gradient (H×W×3) → gradients for all five attribute
/// arrays. Culled points receive zeros.
pub fn render_backward<T: Real>(
    saved: &RenderSaved<T>,
    attrs: AttrView<'_, T>,
    ctx: &DeformContext<T>,
    cam: &Camera<T>,
    grad_image: &[T],
) -> GaussianGrads<T> {
    let sg = rasterize_backward(&saved.tape, &saved.splats, grad_image);
    let p_count = saved.n_points;
    let v = ctx.base_pos.len();
    let mut g = GaussianGrads {
        colors: vec![T::ZERO; p_count * 3],
        opacities: vec![T::ZERO; p_count],
        scales: vec![T::ZERO; p_count * 3],
        rotations: vec![T::ZERO; p_count * 4],
        offsets: vec![T::ZERO; p_count * 3],
    };
    let two = lit::<T>(2.0);

    for (k, a) in saved.alive.iter().enumerate() {
        let i = a.point as usize;
        let vi = i % v;
        // direct fields
        for c in 0..3 {
            g.colors[i * 3 + c] = sg.color[k][c];
        }
        g.opacities[i] = sg.opacity[k];

        let (dcov_a, dcov_b, dcov_c) = (sg.cov[k][0], sg.cov[k][1], sg.cov[k][2]);
        let t0 = [a.t2[0], a.t2[1], a.t2[2]];
        let t1 = [a.t2[3], a.t2[4], a.t2[5]];
        // Σ₂ rows: a = t0 Σ₃ t0ᵀ, b = t0 Σ₃ t1ᵀ, c = t1 Σ₃ t1ᵀ
        let s3t0 = mat3_mul_vec(&a.sigma3, &t0); // Σ₃ symmetric
        let s3t1 = mat3_mul_vec(&a.sigma3, &t1);
        let mut d_t = [T::ZERO; 6];
        for c in 0..3 {
            d_t[c] = two * dcov_a * s3t0[c] + dcov_b * s3t1[c];
            d_t[3 + c] = two * dcov_c * s3t1[c] + dcov_b * s3t0[c];
        }
        // dΣ₃ (full-matrix total derivative)
        let mut d_sigma3 = [T::ZERO; 9];
        for r in 0..3 {
            for c in 0..3 {
                d_sigma3[r * 3 + c] =
                    dcov_a * t0[r] * t0[c] + dcov_b * t0[r] * t1[c] + dcov_c * t1[r] * t1[c];
            }
        }

        // Σ₃ = M Mᵀ → dM = (G + Gᵀ) M, with M = R diag(s)
        let s = [
            attrs.scales[i * 3],
            attrs.scales[i * 3 + 1],
            attrs.scales[i * 3 + 2],
        ];
        let mut d_m = [T::ZERO; 9];
        for r in 0..3 {
            for c in 0..3 {
                let gsym_r0 = d_sigma3[r * 3] + d_sigma3[r];
                let gsym_r1 = d_sigma3[r * 3 + 1] + d_sigma3[3 + r];
                let gsym_r2 = d_sigma3[r * 3 + 2] + d_sigma3[6 + r];
                d_m[r * 3 + c] = gsym_r0 * a.rot[c] * s[c]
                    + gsym_r1 * a.rot[3 + c] * s[c]
                    + gsym_r2 * a.rot[6 + c] * s[c];
            }
        }
        // ds_c = Σ_r R[r][c]·dM[r][c]; dR[r][c] = dM[r][c]·s_c
        let mut d_rot = [T::ZERO; 9];
        for c in 0..3 {
            let mut ds = T::ZERO;
            for r in 0..3 {
                ds += a.rot[r * 3 + c] * d_m[r * 3 + c];
                d_rot[r * 3 + c] = d_m[r * 3 + c] * s[c];
            }
            g.scales[i * 3 + c] = ds;
        }

        // dq' from dR (unit-quaternion rotation matrix partials)
        let q_world = quat_mul(&ctx.blend_quat[vi], &a.q_n);
        let dq_world = rotmat_grad_to_quat(&d_rot, &q_world);
        // q_world = q_blend ⊗ q_n = L(q_blend)·q_n ⇒ dq_n = L(q_blend)ᵀ·dq'
        let qb = &ctx.blend_quat[vi];
        let l = [
            qb[0], -qb[1], -qb[2], -qb[3], //
            qb[1], qb[0], -qb[3], qb[2], //
            qb[2], qb[3], qb[0], -qb[1], //
            qb[3], -qb[2], qb[1], qb[0],
        ];
        let mut dq_n = [T::ZERO; 4];
        for c in 0..4 {
            for r in 0..4 {
                dq_n[c] += l[r * 4 + c] * dq_world[r];
            }
        }
        // through normalization: dq_raw = (I − q_n q_nᵀ)·dq_n / |q_raw|
        let dot = dq_n[0] * a.q_n[0] + dq_n[1] * a.q_n[1] + dq_n[2] * a.q_n[2] + dq_n[3] * a.q_n[3];
        let inv_mag = a.q_mag.recip();
        for c in 0..4 {
            g.rotations[i * 4 + c] = (dq_n[c] - a.q_n[c] * dot) * inv_mag;
        }

        // mean gradient → camera-space position
        let (x, y, z) = (a.p_c[0], a.p_c[1], a.p_c[2]);
        let zi = z.recip();
        let zi2 = zi * zi;
        let (du, dv) = (sg.mean[k][0], sg.mean[k][1]);
        let mut d_pc = [
            du * cam.fx * zi,
            dv * cam.fy * zi,
            -du * cam.fx * x * zi2 - dv * cam.fy * y * zi2,
        ];

        // T = J·W ⇒ dJ = dT·Wᵀ ; J depends on (x, y, z)
        let w = &saved.rot_wc;
        let mut d_j = [T::ZERO; 6];
        for r in 0..2 {
            for kk in 0..3 {
                d_j[r * 3 + kk] = d_t[r * 3] * w[kk * 3]
                    + d_t[r * 3 + 1] * w[kk * 3 + 1]
                    + d_t[r * 3 + 2] * w[kk * 3 + 2];
            }
        }
        let zi3 = zi2 * zi;
        d_pc[0] += d_j[2] * (-cam.fx * zi2);
        d_pc[1] += d_j[5] * (-cam.fy * zi2);
        d_pc[2] += d_j[0] * (-cam.fx * zi2)
            + d_j[4] * (-cam.fy * zi2)
            + d_j[2] * (two * cam.fx * x * zi3)
            + d_j[5] * (two * cam.fy * y * zi3);

        // p_c = W·p_w + t ⇒ dp_w = Wᵀ·dp_c ; p_w = base + R_b·offset
        let d_pw = mat3_tmul_vec(w, &d_pc);
        let d_off = mat3_tmul_vec(&ctx.offset_rot[vi], &d_pw);
        g.offsets[i * 3] = d_off[0];
        g.offsets[i * 3 + 1] = d_off[1];
        g.offsets[i * 3 + 2] = d_off[2];
    }
    g
}

/// dL/dq from dL/dR for the unit-form rotation matrix.
fn rotmat_grad_to_quat<T: Real>(d_rot: &[T; 9], q: &[T; 4]) -> [T; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = lit::<T>(2.0);
    let dr = d_rot;
    [
        two * (dr[1] * -z + dr[2] * y + dr[3] * z + dr[5] * -x + dr[6] * -y + dr[7] * x),
        two * (dr[1] * y
            + dr[2] * z
            + dr[3] * y
            + dr[4] * (-two * x)
            + dr[5] * -w
            + dr[6] * z
            + dr[7] * w
            + dr[8] * (-two * x)),
        two * (dr[0] * (-two * y)
            + dr[1] * x
            + dr[2] * w
            + dr[3] * x
            + dr[5] * z
            + dr[6] * -w
            + dr[7] * z
            + dr[8] * (-two * y)),
        two * (dr[0] * (-two * z)
            + dr[1] * -w
            + dr[2] * x
            + dr[3] * w
            + dr[4] * (-two * z)
            + dr[5] * y
            + dr[6] * x
            + dr[7] * y),
    ]
}

/// Graph node wiring the renderer into the autodiff graph.
///
/// Output tensor layout is [3, H, W] (channels first) to suit the image
/// losses; the internal H×W×3 buffers are transposed at the boundary.
struct RenderNode<T: Real> {
    saved: RenderSaved<T>,
    ctx: Arc<DeformContext<T>>,
    cam: Camera<T>,
}

impl<T: Real> CustomOp<T> for RenderNode<T> {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, grad_out: &[T], inputs: &[&[T]], input_grads: &mut [Option<&mut [T]>]) {
        let (w, h) = (self.cam.width, self.cam.height);
        // [3,H,W] → H×W×3
        let mut grad_hwc = vec![T::ZERO; w * h * 3];
        for c in 0..3 {
            for p in 0..w * h {
                grad_hwc[p * 3 + c] = grad_out[c * w * h + p];
            }
        }
        let attrs = AttrView {
            colors: inputs[0],
            opacities: inputs[1],
            scales: inputs[2],
            rotations: inputs[3],
            offsets: inputs[4],
        };
        let g = render_backward(&self.saved, attrs, &self.ctx, &self.cam, &grad_hwc);
        let parts: [&[T]; 5] = [&g.colors, &g.opacities, &g.scales, &g.rotations, &g.offsets];
        for (slot, part) in input_grads.iter_mut().zip(parts) {
            if let Some(buf) = slot {
                crate::tensor::kernels::axpy(T::ONE, part, buf);
            }
        }
    }
}

/// Render canonical Gaussians held in graph tensors; returns the image as a
/// [3, H, W] tensor participating in the graph.
#[allow(clippy::too_many_arguments)]
pub fn render_into_graph<T: Real>(
    g: &mut Graph<T>,
    colors: Tensor,
    opacities: Tensor,
    scales: Tensor,
    rotations: Tensor,
    offsets: Tensor,
    ctx: Arc<DeformContext<T>>,
    cam: &Camera<T>,
    background: [T; 3],
) -> Result<Tensor> {
    let p = opacities.shape().dim(0);
    for (t, cols, name) in [
        (&colors, 3, "colors"),
        (&scales, 3, "scales"),
        (&rotations, 4, "rotations"),
        (&offsets, 3, "offsets"),
    ] {
        if t.shape().rank() != 2 || t.shape().dim(0) != p || t.shape().dim(1) != cols {
            return Err(crate::error::Error::dim(
                "render",
                format!("{name} {}", t.shape()),
                format!("[{p}x{cols}]"),
            ));
        }
    }
    let attrs = AttrView {
        colors: g.data(colors),
        opacities: g.data(opacities),
        scales: g.data(scales),
        rotations: g.data(rotations),
        offsets: g.data(offsets),
    };
    let (out, saved) = render_forward(attrs, &ctx, cam, background)?;
    let (w, h) = (out.width, out.height);
    // H×W×3 → [3,H,W]
    let mut chw = vec![T::ZERO; w * h * 3];
    for pix in 0..w * h {
        for c in 0..3 {
            chw[c * w * h + pix] = out.image[pix * 3 + c];
        }
    }
    let node = RenderNode {
        saved,
        ctx,
        cam: cam.clone(),
    };
    Ok(g.custom(
        &[colors, opacities, scales, rotations, offsets],
        chw,
        &[3, h, w],
        Arc::new(node),
    ))
}
