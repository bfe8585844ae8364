//! Quaternion and small-matrix helpers. Quaternions are [w, x, y, z].

use crate::real::{lit, Real};

pub type Quat<T> = [T; 4];
pub type Vec3<T> = [T; 3];
/// Row-major 3×3.
pub type Mat3<T> = [T; 9];

pub fn quat_identity<T: Real>() -> Quat<T> {
    [T::ONE, T::ZERO, T::ZERO, T::ZERO]
}

pub fn quat_norm<T: Real>(q: &Quat<T>) -> T {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize<T: Real>(q: &Quat<T>) -> Quat<T> {
    let n = quat_norm(q);
    let inv = n.recip();
    [q[0] * inv, q[1] * inv, q[2] * inv, q[3] * inv]
}

/// Hamilton product a ⊗ b.
pub fn quat_mul<T: Real>(a: &Quat<T>, b: &Quat<T>) -> Quat<T> {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_from_axis_angle<T: Real>(axis: Vec3<T>, angle: T) -> Quat<T> {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2])
        .sqrt()
        .max(lit(1e-12));
    let half = angle * lit(0.5);
    let s = half.sin() / n;
    [half.cos(), axis[0] * s, axis[1] * s, axis[2] * s]
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_mat3<T: Real>(q: &Quat<T>) -> Mat3<T> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = lit::<T>(2.0);
    [
        T::ONE - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        T::ONE - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        T::ONE - two * (x * x + y * y),
    ]
}

pub fn mat3_mul_vec<T: Real>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

/// Transpose(m) · v.
pub fn mat3_tmul_vec<T: Real>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [
        m[0] * v[0] + m[3] * v[1] + m[6] * v[2],
        m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
        m[2] * v[0] + m[5] * v[1] + m[8] * v[2],
    ]
}

pub fn mat3_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut c = [T::ZERO; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] =
                a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
    c
}

pub fn vec3_add<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vec3_sub<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vec3_scale<T: Real>(a: &Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn vec3_dot<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn vec3_cross<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn vec3_norm<T: Real>(a: &Vec3<T>) -> T {
    vec3_dot(a, a).sqrt()
}

pub fn vec3_normalize<T: Real>(a: &Vec3<T>) -> Vec3<T> {
    vec3_scale(a, vec3_norm(a).max(lit(1e-12)).recip())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quat_mat_consistency() {
        let q = quat_normalize(&[0.9f64, 0.1, -0.3, 0.2]);
        let m = quat_to_mat3(&q);
        // rotation preserves length
        let v = [0.3, -1.2, 0.7];
        let rv = mat3_mul_vec(&m, &v);
        assert!((vec3_norm(&rv) - vec3_norm(&v)).abs() < 1e-12);
        // composing quats == composing matrices
        let p = quat_from_axis_angle([0.0, 0.0, 1.0], 0.7);
        let mp = quat_to_mat3(&p);
        let qp = quat_mul(&q, &p);
        let mqp = quat_to_mat3(&qp);
        let mm = mat3_mul(&m, &mp);
        for i in 0..9 {
            assert!((mqp[i] - mm[i]).abs() < 1e-12);
        }
    }
}
