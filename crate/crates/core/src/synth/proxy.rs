//! Deterministic base head proxy: an icosphere squashed to head
//! proportions, three joints (global, neck, jaw), smooth region-based
//! skinning weights, localized expression blendshapes, and 68 landmark
//! vertices spread over the face by farthest-point sampling.

use crate::avatar::math::{vec3_norm, vec3_normalize, vec3_scale, vec3_sub, Vec3};
use crate::avatar::HeadProxy;
use crate::real::{lit, Real};

/// Head half-extents in model units (x right, y up, z toward the camera).
const HEAD_RADII: [f64; 3] = [0.075, 0.095, 0.08];

/// Unit icosphere via face subdivision. `subdiv = 2` gives 162 vertices.
pub fn icosphere(subdiv: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ]
    .into_iter()
    .map(|v| vec3_normalize(&v))
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdiv {
        let mut midpoints = std::collections::HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoints.entry(key).or_insert_with(|| {
                    let m = vec3_normalize(&[
                        (verts[a][0] + verts[b][0]) / 2.0,
                        (verts[a][1] + verts[b][1]) / 2.0,
                        (verts[a][2] + verts[b][2]) / 2.0,
                    ]);
                    verts.push(m);
                    verts.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    (verts, faces)
}

/// The shared base proxy. Deterministic; every identity and every trained
/// model anchors on this topology.
pub fn base_proxy<T: Real>(subdiv: usize) -> HeadProxy<T> {
    let (unit, _faces) = icosphere(subdiv);
    let v = unit.len();

    // squash the sphere and push a nose bump on the front midline
    let template_f64: Vec<[f64; 3]> = unit
        .iter()
        .map(|p| {
            let mut q = [
                p[0] * HEAD_RADII[0],
                p[1] * HEAD_RADII[1],
                p[2] * HEAD_RADII[2],
            ];
            let nose = (-((p[0] / 0.25).powi(2) + ((p[1] + 0.15) / 0.3).powi(2))).exp();
            if p[2] > 0.0 {
                q[2] += 0.012 * nose * p[2];
            }
            q
        })
        .collect();

    let joints = [
        [0.0, -0.02, 0.0],  // global (skull)
        [0.0, -0.085, 0.0], // neck base
        [0.0, -0.045, 0.045], // jaw pivot
    ];

    // region scores → normalized weights
    let mut weights = Vec::with_capacity(v * 3);
    for p in &template_f64 {
        let y = p[1] / HEAD_RADII[1];
        let neck = 0.85 / (1.0 + (12.0 * (y + 0.55)).exp());
        let jaw_d2 = ((p[0] - 0.0) / 0.05).powi(2)
            + ((p[1] + 0.07) / 0.045).powi(2)
            + ((p[2] - 0.05) / 0.06).powi(2);
        let jaw = 0.9 * (-0.5 * jaw_d2).exp();
        let global = 1.0;
        let sum = global + neck + jaw;
        weights.push(lit::<T>(global / sum));
        weights.push(lit::<T>(neck / sum));
        weights.push(lit::<T>(jaw / sum));
    }

    // K = 10 localized blendshapes: gaussian displacement bumps centered on
    // face-region vertices, deterministic centers
    let k = 10;
    let front: Vec<usize> = (0..v).filter(|&i| unit[i][2] > 0.2).collect();
    let mut blendshapes = Vec::with_capacity(k);
    for bi in 0..k {
        let ci = front[(bi * 37 + 11) % front.len()];
        let center = template_f64[ci];
        let radius = 0.028 + 0.012 * ((bi * 7919) % 5) as f64 / 4.0;
        let normal = vec3_normalize(&unit[ci]);
        // alternate push directions: along normal, vertical, lateral
        let dir = match bi % 3 {
            0 => normal,
            1 => vec3_normalize(&[normal[0] * 0.3, 1.0, normal[2] * 0.3]),
            _ => vec3_normalize(&[1.0, 0.2 * normal[1], 0.3 * normal[2]]),
        };
        let shape: Vec<[T; 3]> = template_f64
            .iter()
            .map(|p| {
                let d = vec3_sub(p, &center);
                let w = (-0.5 * (vec3_norm(&d) / radius).powi(2)).exp();
                let amp = 0.012 * w;
                [
                    lit(dir[0] * amp),
                    lit(dir[1] * amp),
                    lit(dir[2] * amp),
                ]
            })
            .collect();
        blendshapes.push(shape);
    }

    // 68 landmarks: farthest-point sampling over the front hemisphere,
    // seeded at the nose tip
    let front: Vec<usize> = (0..v).filter(|&i| unit[i][2] > -0.05).collect();
    let m = 68.min(front.len());
    let start = front
        .iter()
        .copied()
        .max_by(|&a, &b| unit[a][2].partial_cmp(&unit[b][2]).unwrap())
        .unwrap();
    let mut landmarks = vec![start];
    let mut dist: Vec<f64> = front
        .iter()
        .map(|&i| vec3_norm(&vec3_sub(&template_f64[i], &template_f64[start])))
        .collect();
    while landmarks.len() < m {
        let (best, _) = front
            .iter()
            .enumerate()
            .max_by(|a, b| dist[a.0].partial_cmp(&dist[b.0]).unwrap())
            .unwrap();
        let vi = front[best];
        landmarks.push(vi);
        for (j, &fi) in front.iter().enumerate() {
            let d = vec3_norm(&vec3_sub(&template_f64[fi], &template_f64[vi]));
            dist[j] = dist[j].min(d);
        }
    }
    landmarks.sort_unstable();

    let template: Vec<[T; 3]> = template_f64
        .iter()
        .map(|p| [lit(p[0]), lit(p[1]), lit(p[2])])
        .collect();
    let proxy = HeadProxy {
        template,
        blendshapes,
        joint_rest: joints
            .iter()
            .map(|j| [lit(j[0]), lit(j[1]), lit(j[2])])
            .collect(),
        joint_parent: vec![None, Some(0), Some(0)],
        weights,
        landmarks,
    };
    proxy.validate().expect("base proxy invariants");
    proxy
}

/// Per-vertex nearest-neighbor distance, the basis for ground-truth splat
/// scales that cover the surface without gaps.
pub fn nearest_neighbor_distances<T: Real>(template: &[Vec3<T>]) -> Vec<T> {
    let n = template.len();
    (0..n)
        .map(|i| {
            let mut best = f64::INFINITY;
            for j in 0..n {
                if i != j {
                    let d = vec3_norm(&vec3_sub(&template[i], &template[j])).to_f64();
                    best = best.min(d);
                }
            }
            lit(best)
        })
        .collect()
}

/// Smooth random scalar/vector field on the surface: a sum of Gaussian
/// bumps with random centers, radii and amplitudes.
pub struct BumpField<T> {
    pub centers: Vec<Vec3<T>>,
    pub radii: Vec<T>,
    pub directions: Vec<Vec3<T>>,
    pub amplitudes: Vec<T>,
}

impl<T: Real> BumpField<T> {
    pub fn sample(
        rng: &mut crate::rng::Rng,
        template: &[Vec3<T>],
        count: usize,
        radius_range: (f64, f64),
        amp: f64,
    ) -> Self {
        use rand::Rng;
        let mut centers = Vec::with_capacity(count);
        let mut radii = Vec::with_capacity(count);
        let mut directions = Vec::with_capacity(count);
        let mut amplitudes = Vec::with_capacity(count);
        for _ in 0..count {
            let ci = rng.gen_range(0..template.len());
            centers.push(template[ci]);
            radii.push(lit(rng.gen_range(radius_range.0..radius_range.1)));
            let d = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            directions.push(vec3_normalize(&[lit(d[0]), lit(d[1]), lit(d[2])]));
            amplitudes.push(lit(rng.gen_range(0.25..1.0) * amp));
        }
        BumpField {
            centers,
            radii,
            directions,
            amplitudes,
        }
    }

    pub fn displacement(&self, p: &Vec3<T>) -> Vec3<T> {
        let mut out = [T::ZERO; 3];
        for i in 0..self.centers.len() {
            let d = vec3_sub(p, &self.centers[i]);
            let r = self.radii[i];
            let w = (-lit::<T>(0.5) * (vec3_norm(&d) / r) * (vec3_norm(&d) / r)).exp();
            let contrib = vec3_scale(&self.directions[i], self.amplitudes[i] * w);
            out = crate::avatar::math::vec3_add(&out, &contrib);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_vertex_counts() {
        assert_eq!(icosphere(0).0.len(), 12);
        assert_eq!(icosphere(1).0.len(), 42);
        assert_eq!(icosphere(2).0.len(), 162);
    }

    #[test]
    fn base_proxy_valid_and_sized() {
        let p: HeadProxy<f32> = base_proxy(2);
        assert_eq!(p.vertex_count(), 162);
        assert_eq!(p.expression_count(), 10);
        assert_eq!(p.joint_count(), 3);
        assert_eq!(p.landmark_count(), 68);
        p.validate().unwrap();
    }

    #[test]
    fn base_proxy_deterministic() {
        let a: HeadProxy<f64> = base_proxy(2);
        let b: HeadProxy<f64> = base_proxy(2);
        assert_eq!(a, b);
    }
}
