//! Blendshape + linear-blend-skinning deformation of canonical Gaussians.

use super::math::{
    mat3_mul_vec, quat_mul, quat_normalize, quat_to_mat3, vec3_add, vec3_scale, vec3_sub, Mat3,
    Quat, Vec3,
};
use super::{ExpressionPose, GaussianSet, HeadProxy};
use crate::error::{Error, Result};
use crate::real::Real;

/// Per-vertex affine maps for one (proxy, expression-pose) pair. Constant
/// with respect to all learnable Gaussian attributes, so the renderer can
/// treat deformation as a fixed linear stage.
#[derive(Clone, Debug)]
pub struct DeformContext<T> {
    /// Posed position of the shaped template vertex (blendshapes + LBS).
    pub base_pos: Vec<Vec3<T>>,
    /// Blended skinning rotation per vertex, row-major 3×3. Applied to
    /// offsets before adding them to `base_pos`.
    pub offset_rot: Vec<Mat3<T>>,
    /// The same blended rotation as a unit quaternion; composed onto
    /// per-point rotations.
    pub blend_quat: Vec<Quat<T>>,
}

/// World transform (R, t) per joint from forward kinematics.
fn joint_world<T: Real>(proxy: &HeadProxy<T>, ep: &ExpressionPose<T>) -> Vec<(Quat<T>, Vec3<T>)> {
    let j = proxy.joint_count();
    let mut world: Vec<(Quat<T>, Vec3<T>)> = Vec::with_capacity(j);
    for ji in 0..j {
        let local_rot = quat_normalize(&ep.joint_rotations[ji]);
        match proxy.joint_parent[ji] {
            None => {
                // Root: local translation is its rest position plus the
                // global translation.
                let t = vec3_add(&proxy.joint_rest[ji], &ep.translation);
                world.push((local_rot, t));
            }
            Some(pi) => {
                let (pq, pt) = world[pi];
                let local_t = vec3_sub(&proxy.joint_rest[ji], &proxy.joint_rest[pi]);
                let rm = quat_to_mat3(&pq);
                let t = vec3_add(&mat3_mul_vec(&rm, &local_t), &pt);
                world.push((quat_mul(&pq, &local_rot), t));
            }
        }
    }
    world
}

/// Build the per-vertex deformation maps for a proxy and expression/pose.
pub fn deform_context<T: Real>(
    proxy: &HeadProxy<T>,
    ep: &ExpressionPose<T>,
) -> Result<DeformContext<T>> {
    if ep.exp.len() != proxy.expression_count() {
        return Err(Error::dim(
            "deform",
            format!("{} expression coefficients", ep.exp.len()),
            format!("{} blendshapes", proxy.expression_count()),
        ));
    }
    if ep.joint_rotations.len() != proxy.joint_count() {
        return Err(Error::dim(
            "deform",
            format!("{} pose rotations", ep.joint_rotations.len()),
            format!("{} joints", proxy.joint_count()),
        ));
    }

    let v = proxy.vertex_count();
    let jn = proxy.joint_count();
    let world = joint_world(proxy, ep);
    // Skinning transform per joint: x ↦ R_w·(x − rest_j) + t_w
    let rw: Vec<Mat3<T>> = world.iter().map(|(q, _)| quat_to_mat3(q)).collect();

    let mut base_pos = Vec::with_capacity(v);
    let mut offset_rot = Vec::with_capacity(v);
    let mut blend_quat = Vec::with_capacity(v);

    for vi in 0..v {
        // Shaped template vertex.
        let mut shaped = proxy.template[vi];
        for (k, &zk) in ep.exp.iter().enumerate() {
            if zk != T::ZERO {
                shaped = vec3_add(&shaped, &vec3_scale(&proxy.blendshapes[k][vi], zk));
            }
        }
        let wrow = &proxy.weights[vi * jn..(vi + 1) * jn];

        let mut pos = [T::ZERO; 3];
        let mut q_blend = [T::ZERO; 4];
        for (ji, &wj) in wrow.iter().enumerate() {
            if wj == T::ZERO {
                continue;
            }
            let (qj, tj) = &world[ji];
            let local = vec3_sub(&shaped, &proxy.joint_rest[ji]);
            let moved = vec3_add(&mat3_mul_vec(&rw[ji], &local), tj);
            pos = vec3_add(&pos, &vec3_scale(&moved, wj));
            // Sign-aligned quaternion blend (QLERP).
            let sign = if q_blend[0] * qj[0] + q_blend[1] * qj[1] + q_blend[2] * qj[2]
                + q_blend[3] * qj[3]
                < T::ZERO
            {
                -T::ONE
            } else {
                T::ONE
            };
            for a in 0..4 {
                q_blend[a] += qj[a] * wj * sign;
            }
        }
        let q_blend = quat_normalize(&q_blend);
        base_pos.push(pos);
        offset_rot.push(quat_to_mat3(&q_blend));
        blend_quat.push(q_blend);
    }
    Ok(DeformContext {
        base_pos,
        offset_rot,
        blend_quat,
    })
}

/// Deform a canonical Gaussian set with blendshapes + LBS.
///
/// Positions become `LBS(template + Σ z·E) + R_blend·offset`; per-point
/// rotations are composed with the blended skinning rotation; colors,
/// opacities and scales pass through unchanged. The result is re-anchored at
/// the deformed positions with zero offsets.
pub fn deform<T: Real>(
    g: &GaussianSet<T>,
    proxy: &HeadProxy<T>,
    ep: &ExpressionPose<T>,
) -> Result<GaussianSet<T>> {
    let v = proxy.vertex_count();
    if g.len() == 0 || g.len() % v != 0 {
        return Err(Error::dim(
            "deform",
            format!("{} gaussians", g.len()),
            format!("multiple of {v} proxy vertices"),
        ));
    }
    let ctx = deform_context(proxy, ep)?;
    let n = g.len();
    let mut anchors = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    for i in 0..n {
        let vi = i % v; // groups repeat the proxy anchor topology
        let p = vec3_add(
            &ctx.base_pos[vi],
            &mat3_mul_vec(&ctx.offset_rot[vi], &g.offsets[i]),
        );
        anchors.push(p);
        rotations.push(quat_normalize(&quat_mul(
            &ctx.blend_quat[vi],
            &g.rotations[i],
        )));
    }
    Ok(GaussianSet {
        anchors,
        offsets: vec![[T::ZERO; 3]; n],
        colors: g.colors.clone(),
        opacities: g.opacities.clone(),
        scales: g.scales.clone(),
        rotations,
    })
}

/// Deformed 3-D positions of the proxy's landmark vertices.
pub fn landmarks3d<T: Real>(
    proxy: &HeadProxy<T>,
    ep: &ExpressionPose<T>,
) -> Result<Vec<Vec3<T>>> {
    let ctx = deform_context(proxy, ep)?;
    Ok(proxy.landmarks.iter().map(|&l| ctx.base_pos[l]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::math::{quat_from_axis_angle, quat_identity, vec3_norm};

    fn tiny_proxy() -> HeadProxy<f64> {
        // 4 vertices, 2 joints (root + child), 1 blendshape
        let template = vec![
            [0.0, 0.1, 0.0],
            [0.1, 0.0, 0.0],
            [-0.1, 0.0, 0.0],
            [0.0, -0.1, 0.05],
        ];
        let blendshapes = vec![vec![
            [0.01, 0.0, 0.0],
            [0.0, 0.02, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, -0.03],
        ]];
        HeadProxy {
            template,
            blendshapes,
            joint_rest: vec![[0.0, 0.0, 0.0], [0.0, -0.05, 0.0]],
            joint_parent: vec![None, Some(0)],
            weights: vec![1.0, 0.0, 0.8, 0.2, 0.8, 0.2, 0.3, 0.7],
            landmarks: vec![0, 3],
        }
    }

    fn unit_gaussians(proxy: &HeadProxy<f64>) -> GaussianSet<f64> {
        let v = proxy.vertex_count();
        GaussianSet {
            anchors: proxy.template.clone(),
            offsets: vec![[0.002, -0.001, 0.003]; v],
            colors: vec![[0.5, 0.5, 0.5]; v],
            opacities: vec![0.8; v],
            scales: vec![[0.01, 0.01, 0.01]; v],
            rotations: vec![quat_identity(); v],
        }
    }

    #[test]
    fn identity_deform_is_exact() {
        let proxy = tiny_proxy();
        proxy.validate().unwrap();
        let g = unit_gaussians(&proxy);
        let ep = ExpressionPose::identity(1, 2);
        let out = deform(&g, &proxy, &ep).unwrap();
        for i in 0..g.len() {
            let want = g.position(i);
            let got = out.position(i);
            for a in 0..3 {
                assert!((want[a] - got[a]).abs() < 1e-6, "vertex {i} axis {a}");
            }
            for a in 0..4 {
                assert!((out.rotations[i][a] - g.rotations[i][a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_blendshape_moves_vertex_linearly() {
        let proxy = tiny_proxy();
        let mut g = unit_gaussians(&proxy);
        for o in g.offsets.iter_mut() {
            *o = [0.0; 3];
        }
        let mut ep = ExpressionPose::identity(1, 2);
        ep.exp[0] = 1.0;
        let out = deform(&g, &proxy, &ep).unwrap();
        for vi in 0..proxy.vertex_count() {
            let want = vec3_add(&proxy.template[vi], &proxy.blendshapes[0][vi]);
            for a in 0..3 {
                assert!((out.position(vi)[a] - want[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rigid_global_rotation_preserves_distances() {
        let mut proxy = tiny_proxy();
        // all weight on the global joint → rigid motion
        proxy.weights = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let g = unit_gaussians(&proxy);
        let mut ep = ExpressionPose::identity(1, 2);
        ep.joint_rotations[0] =
            quat_from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let out = deform(&g, &proxy, &ep).unwrap();
        for i in 0..g.len() {
            for j in (i + 1)..g.len() {
                let d0 = vec3_norm(&vec3_sub(&g.position(i), &g.position(j)));
                let d1 = vec3_norm(&vec3_sub(&out.position(i), &out.position(j)));
                assert!((d0 - d1).abs() < 1e-5, "pair ({i},{j}): {d0} vs {d1}");
            }
        }
    }

    #[test]
    fn landmarks_match_deform_output_at_indices() {
        let proxy = tiny_proxy();
        let mut g = unit_gaussians(&proxy);
        for o in g.offsets.iter_mut() {
            *o = [0.0; 3]; // landmarks live on the proxy surface
        }
        let mut ep = ExpressionPose::identity(1, 2);
        ep.exp[0] = 0.4;
        ep.joint_rotations[1] = quat_from_axis_angle([1.0, 0.0, 0.0], 0.3);
        let lm = landmarks3d(&proxy, &ep).unwrap();
        let out = deform(&g, &proxy, &ep).unwrap();
        for (li, &vi) in proxy.landmarks.iter().enumerate() {
            for a in 0..3 {
                assert_eq!(lm[li][a], out.position(vi)[a]);
            }
        }
    }

    #[test]
    fn coefficient_count_mismatch_errors() {
        let proxy = tiny_proxy();
        let g = unit_gaussians(&proxy);
        let ep = ExpressionPose::identity(3, 2); // proxy has K = 1
        assert!(deform(&g, &proxy, &ep).is_err());
    }
}
