//! Procedural ground-truth generator: random identities on the shared head
//! proxy, random expressions/poses/cameras, images rendered from an exact
//! ground-truth Gaussian set, with exact camera parameters, expression
//! coefficients, head poses, and 2-D landmarks.

pub mod proxy;

pub use proxy::base_proxy;

use crate::avatar::math::{quat_from_axis_angle, quat_mul, quat_normalize, Vec3};
use crate::avatar::{deform, landmarks3d, Camera, ExpressionPose, GaussianSet, HeadProxy};
use crate::error::{Error, Result};
use crate::lgrt::FrameObservation;
use crate::raster;
use crate::real::{lit, Real};
use crate::rng::Rng;
use rand::Rng as _;

/// One synthetic person: a displacement field and albedo field on the shared
/// proxy, realized as an exact ground-truth Gaussian set.
#[derive(Clone, Debug)]
pub struct Identity<T> {
    pub seed: u64,
    /// Random vertex displacements (the identity's geometry), bounded well
    /// inside the model's representable offset range.
    pub shape_offsets: Vec<Vec3<T>>,
    /// Per-vertex albedo.
    pub albedo: Vec<Vec3<T>>,
    /// Ground-truth Gaussians anchored on the proxy template.
    pub gaussians: GaussianSet<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// One camera, expression/pose varying along a smooth trajectory.
    Monocular,
    /// One expression, up to 12 cameras on a view sphere.
    Multiview,
}

/// A training/eval unit: input frames plus held-out target frames of one
/// identity.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub identity_seed: u64,
    pub mode: SampleMode,
    pub inputs: Vec<FrameObservation<T>>,
    pub targets: Vec<FrameObservation<T>>,
}

/// Deterministic identity from a seed.
pub fn generate_identity<T: Real>(proxy: &HeadProxy<T>, seed: u64) -> Identity<T> {
    let v = proxy.vertex_count();
    let diag = proxy.bbox_diagonal().to_f64();
    let mut rng = crate::rng::indexed_stream(seed, "identity", seed);

    // geometry: smooth random bumps, clamped to 3% of the head diagonal
    let shape_field =
        proxy::BumpField::sample(&mut rng, &proxy.template, 6, (0.02, 0.05), 0.010);
    let cap = lit::<T>(0.03 * diag);
    let shape_offsets: Vec<Vec3<T>> = proxy
        .template
        .iter()
        .map(|p| {
            let d = shape_field.displacement(p);
            let n = crate::avatar::math::vec3_norm(&d);
            if n > cap {
                crate::avatar::math::vec3_scale(&d, cap / n)
            } else {
                d
            }
        })
        .collect();

    // albedo: identity-specific base tone plus color blobs over the whole
    // head, so every viewpoint carries identity information
    let base = [
        rng.gen_range(0.35..0.75),
        rng.gen_range(0.25..0.6),
        rng.gen_range(0.2..0.55),
    ];
    let blob_fields: Vec<(proxy::BumpField<T>, [f64; 3])> = (0..3)
        .map(|_| {
            let f = proxy::BumpField::sample(&mut rng, &proxy.template, 4, (0.025, 0.06), 1.0);
            let tint = [
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ];
            (f, tint)
        })
        .collect();
    let albedo: Vec<Vec3<T>> = proxy
        .template
        .iter()
        .map(|p| {
            let mut c = base;
            for (f, tint) in &blob_fields {
                let w = crate::avatar::math::vec3_norm(&f.displacement(p)).to_f64();
                for a in 0..3 {
                    c[a] += tint[a] * w.min(1.0);
                }
            }
            [
                lit(c[0].clamp(0.05, 0.95)),
                lit(c[1].clamp(0.05, 0.95)),
                lit(c[2].clamp(0.05, 0.95)),
            ]
        })
        .collect();

    let nn = proxy::nearest_neighbor_distances(&proxy.template);
    let gaussians = GaussianSet {
        anchors: proxy.template.clone(),
        offsets: shape_offsets.clone(),
        colors: albedo.clone(),
        opacities: vec![lit(0.85); v],
        scales: nn
            .iter()
            .map(|&d| {
                let s = d * lit(0.7);
                [s, s, s]
            })
            .collect(),
        rotations: vec![crate::avatar::math::quat_identity(); v],
    };
    gaussians.validate().expect("ground-truth invariants");
    Identity {
        seed,
        shape_offsets,
        albedo,
        gaussians,
    }
}

/// Head pose with bounded random joint rotations.
fn random_pose<T: Real>(rng: &mut Rng, proxy: &HeadProxy<T>, yaw_range: f64) -> ExpressionPose<T> {
    let mut ep = ExpressionPose::identity(proxy.expression_count(), proxy.joint_count());
    let yaw = quat_from_axis_angle([T::ZERO, T::ONE, T::ZERO], lit(rng.gen_range(-yaw_range..yaw_range)));
    let pitch = quat_from_axis_angle(
        [T::ONE, T::ZERO, T::ZERO],
        lit(rng.gen_range(-0.15..0.2)),
    );
    ep.joint_rotations[0] = quat_normalize(&quat_mul(&yaw, &pitch));
    // neck: small counter-rotation; jaw: opening about x
    ep.joint_rotations[1] = quat_from_axis_angle(
        [T::ONE, T::ZERO, T::ZERO],
        lit(rng.gen_range(-0.1..0.1)),
    );
    ep.joint_rotations[2] = quat_from_axis_angle(
        [T::ONE, T::ZERO, T::ZERO],
        lit(rng.gen_range(0.0..0.25)),
    );
    ep.translation = [
        lit(rng.gen_range(-0.008..0.008)),
        lit(rng.gen_range(-0.008..0.008)),
        lit(rng.gen_range(-0.008..0.008)),
    ];
    ep
}

fn random_expression<T: Real>(rng: &mut Rng, ep: &mut ExpressionPose<T>) {
    for z in ep.exp.iter_mut() {
        *z = lit(rng.gen_range(-0.8..0.8));
    }
}

/// Camera on the view sphere around the head.
fn sphere_camera<T: Real>(rng: &mut Rng, azimuth: f64, res: usize) -> Camera<T> {
    let elevation = rng.gen_range(-0.3..0.45);
    let dist = rng.gen_range(0.44..0.52);
    let eye = [
        lit::<T>(dist * elevation.cos() * azimuth.sin()),
        lit::<T>(dist * elevation.sin()),
        lit::<T>(dist * elevation.cos() * azimuth.cos()),
    ];
    Camera::look_at(eye, [T::ZERO; 3], lit(0.72), res, res)
}

/// Render one observation of an identity; landmark ground truth comes from
/// the analytic projection of the proxy's deformed landmark vertices.
pub fn render_observation<T: Real>(
    proxy: &HeadProxy<T>,
    identity: &Identity<T>,
    cam: &Camera<T>,
    ep: &ExpressionPose<T>,
) -> Result<FrameObservation<T>> {
    let world = deform(&identity.gaussians, proxy, ep)?;
    let projected = raster::project(&world, cam);
    let out = raster::rasterize(
        &projected.splats,
        cam.width,
        cam.height,
        [T::ZERO; 3],
    )?;
    let lms3 = landmarks3d(proxy, ep)?;
    let mut lms2 = Vec::with_capacity(lms3.len());
    for p in &lms3 {
        match cam.project_point(p) {
            Some(uv) => lms2.push(uv),
            None => {
                return Err(Error::contract(
                    "render_observation",
                    "landmark behind the near plane",
                ))
            }
        }
    }
    Ok(FrameObservation {
        image: crate::losses::hwc_to_chw(&out.image, cam.width, cam.height),
        camera: cam.clone(),
        ep: ep.clone(),
        landmarks: Some(lms2),
    })
}

/// All landmarks inside the image with a safety margin?
fn landmarks_in_frame<T: Real>(f: &FrameObservation<T>, margin: f64) -> bool {
    let (w, h) = (f.camera.width as f64, f.camera.height as f64);
    f.landmarks.as_ref().is_some_and(|lms| {
        lms.iter().all(|lm| {
            let (x, y) = (lm[0].to_f64(), lm[1].to_f64());
            x >= margin && y >= margin && x <= w - margin && y <= h - margin
        })
    })
}

/// One frame with a frustum guard: resample the camera until the whole set
/// of landmarks stays inside the image.
fn guarded_frame<T: Real>(
    proxy: &HeadProxy<T>,
    identity: &Identity<T>,
    rng: &mut Rng,
    azimuth: f64,
    ep: &ExpressionPose<T>,
    res: usize,
) -> Result<FrameObservation<T>> {
    for attempt in 0..16 {
        let cam = sphere_camera(rng, azimuth, res);
        let f = render_observation(proxy, identity, &cam, ep)?;
        if landmarks_in_frame(&f, 1.0) {
            return Ok(f);
        }
        // widen the view a little on retries
        let _ = attempt;
    }
    Err(Error::contract(
        "generate_sample",
        "could not keep the head inside the frustum",
    ))
}

/// Generate a sample in the requested mode.
pub fn generate_sample<T: Real>(
    proxy: &HeadProxy<T>,
    identity: &Identity<T>,
    rng: &mut Rng,
    mode: SampleMode,
    n_inputs: usize,
    n_targets: usize,
    res: usize,
) -> Result<Sample<T>> {
    let mut inputs = Vec::with_capacity(n_inputs);
    let mut targets = Vec::with_capacity(n_targets);
    match mode {
        SampleMode::Monocular => {
            // fixed camera near the front; expression/pose drift smoothly
            let base_az = rng.gen_range(-0.4..0.4);
            let mut ep = random_pose(rng, proxy, 0.3);
            random_expression(rng, &mut ep);
            // per-coefficient drift rates
            let drift: Vec<f64> = (0..proxy.expression_count())
                .map(|_| rng.gen_range(0.5..2.0))
                .collect();
            let phase: Vec<f64> = (0..proxy.expression_count())
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            for i in 0..n_inputs + n_targets {
                let t = i as f64 / (n_inputs + n_targets).max(1) as f64;
                let mut epi = ep.clone();
                for (k, z) in epi.exp.iter_mut().enumerate() {
                    *z = lit(0.6 * (drift[k] * std::f64::consts::TAU * t + phase[k]).sin());
                }
                let yaw = quat_from_axis_angle(
                    [T::ZERO, T::ONE, T::ZERO],
                    lit(0.35 * (std::f64::consts::TAU * t + phase[0]).sin()),
                );
                epi.joint_rotations[0] = quat_normalize(&quat_mul(&yaw, &ep.joint_rotations[0]));
                let f = guarded_frame(proxy, identity, rng, base_az, &epi, res)?;
                if i < n_inputs {
                    inputs.push(f);
                } else {
                    targets.push(f);
                }
            }
        }
        SampleMode::Multiview => {
            // one expression and pose, cameras spread in azimuth
            let mut ep = random_pose(rng, proxy, 0.35);
            random_expression(rng, &mut ep);
            let total = n_inputs + n_targets;
            for i in 0..total {
                let az = std::f64::consts::TAU * i as f64 / total.max(1) as f64
                    + rng.gen_range(-0.15..0.15);
                let f = guarded_frame(proxy, identity, rng, az, &ep, res)?;
                if i < n_inputs {
                    inputs.push(f);
                } else {
                    targets.push(f);
                }
            }
        }
    }
    Ok(Sample {
        identity_seed: identity.seed,
        mode,
        inputs,
        targets,
    })
}

/// In-memory dataset: the shared proxy and, per identity, a training frame
/// pool plus held-out evaluation inputs/targets.
pub struct Dataset<T> {
    pub proxy: HeadProxy<T>,
    pub identities: Vec<IdentityData<T>>,
    pub resolution: usize,
}

pub struct IdentityData<T> {
    pub identity: Identity<T>,
    /// Mixed monocular/multiview training pool.
    pub pool: Vec<FrameObservation<T>>,
    /// Held-out reconstruction inputs (multiview-heavy).
    pub eval_inputs: Vec<FrameObservation<T>>,
    /// Held-out novel-view targets.
    pub eval_targets: Vec<FrameObservation<T>>,
}

/// Build a dataset of `n_identities` people at `res`×`res`.
pub fn build_dataset<T: Real>(
    proxy: &HeadProxy<T>,
    master_seed: u64,
    n_identities: usize,
    res: usize,
) -> Result<Dataset<T>> {
    let identities = (0..n_identities)
        .map(|i| {
            let id_seed = crate::rng::derive_seed(master_seed, "identity") ^ (i as u64);
            let identity = generate_identity(proxy, id_seed);
            let mut rng = crate::rng::indexed_stream(master_seed, "sample", i as u64);
            let mono =
                generate_sample(proxy, &identity, &mut rng, SampleMode::Monocular, 8, 0, res)?;
            let multi =
                generate_sample(proxy, &identity, &mut rng, SampleMode::Multiview, 12, 0, res)?;
            let mut pool = mono.inputs;
            pool.extend(multi.inputs);
            let eval_multi =
                generate_sample(proxy, &identity, &mut rng, SampleMode::Multiview, 12, 8, res)?;
            let eval_mono =
                generate_sample(proxy, &identity, &mut rng, SampleMode::Monocular, 4, 0, res)?;
            let mut eval_inputs = eval_multi.inputs;
            eval_inputs.extend(eval_mono.inputs);
            Ok(IdentityData {
                identity,
                pool,
                eval_inputs,
                eval_targets: eval_multi.targets,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        proxy: proxy.clone(),
        identities,
        resolution: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_proxy() -> HeadProxy<f32> {
        base_proxy(1) // 42 vertices keeps the tests fast
    }

    #[test]
    fn identity_deterministic_by_seed() {
        let p = small_proxy();
        let a = generate_identity(&p, 5);
        let b = generate_identity(&p, 5);
        assert_eq!(a.gaussians, b.gaussians);
        assert_eq!(a.albedo, b.albedo);
    }

    #[test]
    fn different_seeds_render_differently() {
        let p = small_proxy();
        let a = generate_identity(&p, 1);
        let b = generate_identity(&p, 2);
        let cam: Camera<f32> = Camera::look_at([0.0, 0.0, 0.47], [0.0; 3], 0.72, 32, 32);
        let ep = ExpressionPose::identity(p.expression_count(), p.joint_count());
        let ra = render_observation(&p, &a, &cam, &ep).unwrap();
        let rb = render_observation(&p, &b, &cam, &ep).unwrap();
        let diff: f32 = ra
            .image
            .iter()
            .zip(&rb.image)
            .map(|(x, y)| (x - y).abs())
            .sum::<f32>()
            / ra.image.len() as f32;
        assert!(diff > 0.01, "mean pixel diff {diff}");
    }

    #[test]
    fn skinning_weights_untouched_by_identity() {
        let p = small_proxy();
        let _ = generate_identity(&p, 9);
        for vi in 0..p.vertex_count() {
            let s: f32 = (0..p.joint_count()).map(|j| p.weight(vi, j)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn multiview_sample_shares_expression() {
        let p = small_proxy();
        let id = generate_identity(&p, 3);
        let mut rng = crate::rng::stream(11, "test-mv");
        let s = generate_sample(&p, &id, &mut rng, SampleMode::Multiview, 5, 2, 32).unwrap();
        for f in s.inputs.iter().chain(&s.targets) {
            assert_eq!(f.ep.exp, s.inputs[0].ep.exp);
        }
        assert_eq!(s.inputs.len(), 5);
        assert_eq!(s.targets.len(), 2);
    }

    #[test]
    fn landmarks_match_projection_roundtrip() {
        let p = small_proxy();
        let id = generate_identity(&p, 4);
        let mut rng = crate::rng::stream(12, "test-lm");
        let s = generate_sample(&p, &id, &mut rng, SampleMode::Monocular, 3, 0, 32).unwrap();
        for f in &s.inputs {
            let lms3 = landmarks3d(&p, &f.ep).unwrap();
            let lms = f.landmarks.as_ref().unwrap();
            for (i, p3) in lms3.iter().enumerate() {
                let uv = f.camera.project_point(p3).unwrap();
                assert!((uv[0] - lms[i][0]).abs() < 1e-4);
                assert!((uv[1] - lms[i][1]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn landmarks_stay_inside_every_frame() {
        let p = small_proxy();
        let id = generate_identity(&p, 6);
        let mut rng = crate::rng::stream(13, "test-frustum");
        let s = generate_sample(&p, &id, &mut rng, SampleMode::Multiview, 8, 4, 32).unwrap();
        for f in s.inputs.iter().chain(&s.targets) {
            f.validate(8).unwrap();
        }
    }

    #[test]
    fn ground_truth_self_consistency_is_bit_exact() {
        let p = small_proxy();
        let id = generate_identity(&p, 7);
        let mut rng = crate::rng::stream(14, "test-selfcons");
        let s = generate_sample(&p, &id, &mut rng, SampleMode::Monocular, 2, 0, 32).unwrap();
        for f in &s.inputs {
            let again = render_observation(&p, &id, &f.camera, &f.ep).unwrap();
            assert_eq!(f.image, again.image);
        }
    }
}
