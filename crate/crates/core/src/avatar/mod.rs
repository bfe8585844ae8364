//! Canonical Gaussian avatar representation, the parametric head proxy, the
//! blendshape/LBS deformer and the incremental fusion operator.

pub mod deform;
pub mod fuse;
pub mod math;

pub use deform::{deform, deform_context, landmarks3d, DeformContext};
pub use fuse::fuse;

use crate::error::{Error, Result};
use crate::real::{lit, Real};
use math::{quat_norm, quat_to_mat3, vec3_add, vec3_sub, Quat, Vec3};

/// Canonical 3DGS avatar: per-point attributes anchored to proxy vertices.
/// Effective position of point i is `anchors[i] + offsets[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet<T> {
    pub anchors: Vec<Vec3<T>>,
    pub offsets: Vec<Vec3<T>>,
    /// Linear RGB in [0,1].
    pub colors: Vec<Vec3<T>>,
    /// Strictly inside (0,1).
    pub opacities: Vec<T>,
    /// Per-axis, strictly positive, model-space units.
    pub scales: Vec<Vec3<T>>,
    /// Unit quaternions [w,x,y,z].
    pub rotations: Vec<Quat<T>>,
}

impl<T: Real> GaussianSet<T> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn position(&self, i: usize) -> Vec3<T> {
        vec3_add(&self.anchors[i], &self.offsets[i])
    }

    pub fn positions(&self) -> Vec<Vec3<T>> {
        (0..self.len()).map(|i| self.position(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.offsets.len() != n
            || self.colors.len() != n
            || self.opacities.len() != n
            || self.scales.len() != n
            || self.rotations.len() != n
        {
            return Err(Error::contract("GaussianSet", "attribute arrays disagree"));
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let d = (quat_norm(q) - T::ONE).abs();
            if d > lit(1e-5) {
                return Err(Error::contract(
                    "GaussianSet",
                    format!("rotation {i} not unit (|1-norm| = {d})"),
                ));
            }
        }
        for (i, &o) in self.opacities.iter().enumerate() {
            if !(o > T::ZERO && o < T::ONE) {
                return Err(Error::contract(
                    "GaussianSet",
                    format!("opacity {i} = {o} outside (0,1)"),
                ));
            }
        }
        for (i, s) in self.scales.iter().enumerate() {
            if !(s[0] > T::ZERO && s[1] > T::ZERO && s[2] > T::ZERO) {
                return Err(Error::contract(
                    "GaussianSet",
                    format!("scale {i} not positive"),
                ));
            }
        }
        Ok(())
    }
}

/// FLAME-like parametric head model at desk scale.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProxy<T> {
    /// Template vertices, V×3.
    pub template: Vec<Vec3<T>>,
    /// Expression blendshapes: K entries of per-vertex displacement fields.
    pub blendshapes: Vec<Vec<Vec3<T>>>,
    /// Joint rest positions.
    pub joint_rest: Vec<Vec3<T>>,
    /// Parent index per joint; `None` for the global root (index 0).
    pub joint_parent: Vec<Option<usize>>,
    /// Skinning weights, V×J row-major; rows sum to 1, non-negative.
    pub weights: Vec<T>,
    /// Landmark vertex indices (M = 68 in the default proxy).
    pub landmarks: Vec<usize>,
}

impl<T: Real> HeadProxy<T> {
    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    pub fn joint_count(&self) -> usize {
        self.joint_rest.len()
    }

    pub fn expression_count(&self) -> usize {
        self.blendshapes.len()
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks.len()
    }

    pub fn weight(&self, v: usize, j: usize) -> T {
        self.weights[v * self.joint_count() + j]
    }

    /// Diagonal of the template's axis-aligned bounding box.
    pub fn bbox_diagonal(&self) -> T {
        let mut lo = [T::from_f64(f64::INFINITY); 3];
        let mut hi = [T::from_f64(f64::NEG_INFINITY); 3];
        for v in &self.template {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        math::vec3_norm(&vec3_sub(&hi, &lo))
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        let j = self.joint_count();
        if self.weights.len() != v * j {
            return Err(Error::contract("HeadProxy", "weight matrix size mismatch"));
        }
        for bs in &self.blendshapes {
            if bs.len() != v {
                return Err(Error::contract("HeadProxy", "blendshape size mismatch"));
            }
        }
        let tol = lit::<T>(1e-6);
        for vi in 0..v {
            let row = &self.weights[vi * j..(vi + 1) * j];
            let mut sum = T::ZERO;
            for &w in row {
                if w < T::ZERO {
                    return Err(Error::contract(
                        "HeadProxy",
                        format!("negative skinning weight at vertex {vi}"),
                    ));
                }
                sum += w;
            }
            if (sum - T::ONE).abs() > tol {
                return Err(Error::contract(
                    "HeadProxy",
                    format!("skinning row {vi} sums to {sum}"),
                ));
            }
        }
        for &l in &self.landmarks {
            if l >= v {
                return Err(Error::contract(
                    "HeadProxy",
                    format!("landmark index {l} out of range (V = {v})"),
                ));
            }
        }
        // Parent graph must be a tree rooted at joint 0; parents precede
        // children so forward kinematics is a single pass.
        if self.joint_parent.len() != j || j == 0 || self.joint_parent[0].is_some() {
            return Err(Error::contract("HeadProxy", "joint 0 must be the root"));
        }
        for (ji, p) in self.joint_parent.iter().enumerate().skip(1) {
            match p {
                Some(pi) if *pi < ji => {}
                _ => {
                    return Err(Error::contract(
                        "HeadProxy",
                        format!("joint {ji} must have a parent with smaller index"),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Expression coefficients plus per-joint rotations and a global translation.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionPose<T> {
    pub exp: Vec<T>,
    pub joint_rotations: Vec<Quat<T>>,
    pub translation: Vec3<T>,
}

impl<T: Real> ExpressionPose<T> {
    pub fn identity(expression_count: usize, joint_count: usize) -> Self {
        ExpressionPose {
            exp: vec![T::ZERO; expression_count],
            joint_rotations: vec![math::quat_identity(); joint_count],
            translation: [T::ZERO; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, q) in self.joint_rotations.iter().enumerate() {
            if (quat_norm(q) - T::ONE).abs() > lit(1e-5) {
                return Err(Error::contract(
                    "ExpressionPose",
                    format!("pose quaternion {i} not unit"),
                ));
            }
        }
        Ok(())
    }
}

/// Pinhole camera: intrinsics in pixels, world-to-camera extrinsics.
/// Camera space is x-right, y-down, z-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    /// World-to-camera rotation, unit quaternion [w,x,y,z].
    pub rotation: Quat<T>,
    pub translation: Vec3<T>,
    pub width: usize,
    pub height: usize,
    pub near: T,
    pub far: T,
}

impl<T: Real> Camera<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::ZERO && self.fy > T::ZERO) {
            return Err(Error::contract("Camera", "focal lengths must be positive"));
        }
        if !(self.near < self.far) {
            return Err(Error::contract("Camera", "near must be < far"));
        }
        if (quat_norm(&self.rotation) - T::ONE).abs() > lit(1e-5) {
            return Err(Error::contract("Camera", "extrinsic quaternion not unit"));
        }
        Ok(())
    }

    pub fn world_to_cam(&self, p: &Vec3<T>) -> Vec3<T> {
        let r = quat_to_mat3(&self.rotation);
        vec3_add(&math::mat3_mul_vec(&r, p), &self.translation)
    }

    /// Pixel coordinates of a world point; None behind the near plane.
    pub fn project_point(&self, p: &Vec3<T>) -> Option<[T; 2]> {
        let pc = self.world_to_cam(p);
        if pc[2] < self.near {
            return None;
        }
        Some([
            self.fx * pc[0] / pc[2] + self.cx,
            self.fy * pc[1] / pc[2] + self.cy,
        ])
    }

    /// Camera at `eye` looking at `target`, +y-up world.
    pub fn look_at(
        eye: Vec3<T>,
        target: Vec3<T>,
        fov_y_rad: T,
        width: usize,
        height: usize,
    ) -> Self {
        let fwd = math::vec3_normalize(&vec3_sub(&target, &eye));
        let world_up = [T::ZERO, T::ONE, T::ZERO];
        let mut right = math::vec3_cross(&fwd, &world_up);
        if math::vec3_norm(&right) < lit(1e-6) {
            right = [T::ONE, T::ZERO, T::ZERO];
        }
        let right = math::vec3_normalize(&right);
        let down = math::vec3_cross(&fwd, &right);
        // Rows of R are the camera axes in world coordinates.
        let r = [
            right[0], right[1], right[2], down[0], down[1], down[2], fwd[0], fwd[1], fwd[2],
        ];
        let t = [
            -math::vec3_dot(&right, &eye),
            -math::vec3_dot(&down, &eye),
            -math::vec3_dot(&fwd, &eye),
        ];
        let half = fov_y_rad * lit::<T>(0.5);
        let fy = T::from_usize(height) * lit::<T>(0.5) * half.cos() / half.sin();
        Camera {
            fx: fy,
            fy,
            cx: T::from_usize(width) * lit(0.5),
            cy: T::from_usize(height) * lit(0.5),
            rotation: mat3_to_quat(&r),
            translation: t,
            width,
            height,
            near: lit(0.05),
            far: lit(100.0),
        }
    }
}

/// Orthonormal row-major rotation matrix to quaternion [w,x,y,z].
pub fn mat3_to_quat<T: Real>(m: &math::Mat3<T>) -> Quat<T> {
    let trace = m[0] + m[4] + m[8];
    let q = if trace > T::ZERO {
        let s = (trace + T::ONE).sqrt() * lit(2.0);
        [
            s * lit(0.25),
            (m[7] - m[5]) / s,
            (m[2] - m[6]) / s,
            (m[3] - m[1]) / s,
        ]
    } else if m[0] > m[4] && m[0] > m[8] {
        let s = (T::ONE + m[0] - m[4] - m[8]).sqrt() * lit(2.0);
        [
            (m[7] - m[5]) / s,
            s * lit(0.25),
            (m[1] + m[3]) / s,
            (m[2] + m[6]) / s,
        ]
    } else if m[4] > m[8] {
        let s = (T::ONE + m[4] - m[0] - m[8]).sqrt() * lit(2.0);
        [
            (m[2] - m[6]) / s,
            (m[1] + m[3]) / s,
            s * lit(0.25),
            (m[5] + m[7]) / s,
        ]
    } else {
        let s = (T::ONE + m[8] - m[0] - m[4]).sqrt() * lit(2.0);
        [
            (m[3] - m[1]) / s,
            (m[2] + m[6]) / s,
            (m[5] + m[7]) / s,
            s * lit(0.25),
        ]
    };
    math::quat_normalize(&q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_projects_target_to_principal_point() {
        let cam: Camera<f64> =
            Camera::look_at([0.0, 0.1, -0.5], [0.0, 0.0, 0.0], 0.6, 64, 64);
        cam.validate().unwrap();
        let pc = cam.world_to_cam(&[0.0, 0.0, 0.0]);
        assert!(pc[0].abs() < 1e-12 && pc[1].abs() < 1e-12);
        assert!(pc[2] > 0.0, "target in front of camera");
    }

    #[test]
    fn mat3_quat_roundtrip() {
        let q = math::quat_normalize(&[0.7f64, -0.2, 0.4, 0.5]);
        let m = quat_to_mat3(&q);
        let q2 = mat3_to_quat(&m);
        // q and -q are the same rotation
        let sign = if q[0] * q2[0] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..4 {
            assert!((q[i] - sign * q2[i]).abs() < 1e-9);
        }
    }
}
