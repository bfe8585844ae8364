//! GS head, landmark head, and the full per-forward pipeline.

use super::blocks::{aggregate, frame_stream, prompt_tokens, stream_len, GlobalMode};
use super::{conditioning_vector, BoundParams, FrameObservation, LgrtModel};
use crate::avatar::GaussianSet;
use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::tensor::{Graph, Tensor};

/// Graph handles for one predicted Gaussian group (anchors are constants
/// owned by the model, not graph tensors).
#[derive(Clone, Copy, Debug)]
pub struct GaussianTensors {
    /// [P,3] in [0,1]
    pub colors: Tensor,
    /// [P] in (0,1)
    pub opacities: Tensor,
    /// [P,3] positive
    pub scales: Tensor,
    /// [P,4] unit quaternions
    pub rotations: Tensor,
    /// [P,3] bounded canonical offsets
    pub offsets: Tensor,
}

impl GaussianTensors {
    pub fn len(&self, _g: &Graph<impl Real>) -> usize {
        self.opacities.shape().dim(0)
    }

    /// Concatenate groups (graph-level fusion, preserves gradients).
    pub fn fuse<T: Real>(g: &mut Graph<T>, groups: &[GaussianTensors]) -> Result<GaussianTensors> {
        if groups.is_empty() {
            return Err(Error::contract("fuse", "empty group list"));
        }
        Ok(GaussianTensors {
            colors: g.concat_rows(&groups.iter().map(|t| t.colors).collect::<Vec<_>>())?,
            opacities: g.concat_rows(&groups.iter().map(|t| t.opacities).collect::<Vec<_>>())?,
            scales: g.concat_rows(&groups.iter().map(|t| t.scales).collect::<Vec<_>>())?,
            rotations: g.concat_rows(&groups.iter().map(|t| t.rotations).collect::<Vec<_>>())?,
            offsets: g.concat_rows(&groups.iter().map(|t| t.offsets).collect::<Vec<_>>())?,
        })
    }

    /// Copy out of the graph into a concrete [`GaussianSet`]. Anchors repeat
    /// the canonical proxy vertices for each fused group.
    pub fn materialize<T: Real>(
        &self,
        g: &Graph<T>,
        anchors: &[[T; 3]],
    ) -> Result<GaussianSet<T>> {
        let p = self.opacities.shape().dim(0);
        if p % anchors.len() != 0 {
            return Err(Error::contract(
                "materialize",
                format!("{p} points not a multiple of {} anchors", anchors.len()),
            ));
        }
        let take3 = |t: Tensor| -> Vec<[T; 3]> {
            g.data(t).chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
        };
        let rotations = g
            .data(self.rotations)
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        Ok(GaussianSet {
            anchors: (0..p).map(|i| anchors[i % anchors.len()]).collect(),
            offsets: take3(self.offsets),
            colors: take3(self.colors),
            opacities: g.data(self.opacities).to_vec(),
            scales: take3(self.scales),
            rotations,
        })
    }
}

/// Decode Gaussian attributes from the prompt-token slice ĥ ([V, D]).
///
/// Activations: sigmoid color/opacity, softplus(x + shift) scale, row-wise
/// normalized quaternion, tanh-bounded offset. Zero input therefore yields
/// opacity 0.5, offset 0, identity rotation, and ~1% diagonal scale.
pub fn gs_head<T: Real>(
    g: &mut Graph<T>,
    model: &LgrtModel<T>,
    bp: &BoundParams,
    prompt_slice: Tensor,
) -> Result<GaussianTensors> {
    let v = prompt_slice.shape().dim(0);
    let t = |name: &str| model.tensor(bp, name);
    let h = g.affine(prompt_slice, t("gs_head.w1"), t("gs_head.b1"))?;
    let h = g.relu(h);

    let raw = |g: &mut Graph<T>, attr: &str| {
        let w = t(&format!("gs_head.{attr}.w"));
        let b = t(&format!("gs_head.{attr}.b"));
        g.affine(h, w, b)
    };

    let colors = {
        let r = raw(g, "color")?;
        g.sigmoid(r)
    };
    let opacities = {
        let r = raw(g, "opacity")?;
        let s = g.sigmoid(r);
        g.reshape(s, &[v])?
    };
    let scales = {
        let r = raw(g, "scale")?;
        let shifted = {
            let c = g.scalar_const(lit(model.config.scale_shift));
            g.add(r, c)?
        };
        g.softplus(shifted)
    };
    let rotations = {
        let r = raw(g, "rot")?;
        let sq = g.mul(r, r)?;
        let norm2 = g.sum_rows(sq)?;
        let norm = g.sqrt(norm2);
        let norm = g.reshape(norm, &[v, 1])?;
        g.div(r, norm)?
    };
    let offsets = {
        let r = raw(g, "offset")?;
        let th = g.tanh(r);
        g.scale(th, lit(model.config.offset_bound))
    };
    Ok(GaussianTensors {
        colors,
        opacities,
        scales,
        rotations,
        offsets,
    })
}

/// Landmark head: two-layer MLP over the frame's conditioning-token output,
/// sigmoid-scaled to image bounds. Returns [M, 2] pixel coordinates.
pub fn landmark_head<T: Real>(
    g: &mut Graph<T>,
    model: &LgrtModel<T>,
    bp: &BoundParams,
    cond_row: Tensor,
    width: usize,
    height: usize,
) -> Result<Tensor> {
    let m = model.config.landmark_count;
    let t = |name: &str| model.tensor(bp, name);
    let h = g.affine(cond_row, t("lm_head.w1"), t("lm_head.b1"))?;
    let h = g.relu(h);
    let raw = g.affine(h, t("lm_head.w2"), t("lm_head.b2"))?;
    let raw = g.reshape(raw, &[m, 2])?;
    let s = g.sigmoid(raw);
    let bounds = g.constant(vec![T::from_usize(width), T::from_usize(height)], &[2]);
    g.mul(s, bounds)
}

/// Output of one LGRT forward: a Gaussian group and a landmark prediction
/// per input frame.
#[derive(Debug)]
pub struct LgrtForward {
    pub groups: Vec<GaussianTensors>,
    /// [M, 2] per frame.
    pub landmarks: Vec<Tensor>,
}

/// Run the whole network on N frames.
pub fn forward_frames<T: Real>(
    g: &mut Graph<T>,
    model: &LgrtModel<T>,
    bp: &BoundParams,
    frames: &[FrameObservation<T>],
    mode: GlobalMode,
) -> Result<LgrtForward> {
    let cfg = &model.config;
    if frames.is_empty() {
        return Err(Error::contract("forward", "no input frames"));
    }
    for f in frames {
        f.validate(cfg.patch)?;
    }
    // aggregate() requires equal stream lengths across frames
    let (h0, w0) = (frames[0].camera.height, frames[0].camera.width);
    for f in frames {
        if f.camera.height != h0 || f.camera.width != w0 {
            return Err(Error::contract(
                "forward",
                "all input frames must share one resolution",
            ));
        }
    }
    let prompts = prompt_tokens(g, model, bp)?;
    let mut streams = Vec::with_capacity(frames.len());
    for f in frames {
        let cond = conditioning_vector(cfg, &f.camera, &f.ep);
        streams.push(frame_stream(g, model, bp, prompts, &f.image, h0, w0, &cond)?);
    }
    let streams = aggregate(g, model, bp, streams, mode)?;

    let v = cfg.vertex_count;
    let s = stream_len(cfg, h0, w0);
    let mut groups = Vec::with_capacity(frames.len());
    let mut landmarks = Vec::with_capacity(frames.len());
    for (st, f) in streams.iter().zip(frames) {
        let prompt_slice = g.slice_rows(*st, 0, v)?;
        groups.push(gs_head(g, model, bp, prompt_slice)?);
        let cond_row = g.slice_rows(*st, s - 1, s)?;
        landmarks.push(landmark_head(
            g,
            model,
            bp,
            cond_row,
            f.camera.width,
            f.camera.height,
        )?);
    }
    Ok(LgrtForward { groups, landmarks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::{Camera, ExpressionPose, HeadProxy};
    use crate::lgrt::LgrtConfig;
    use rand::Rng;

    use crate::lgrt::testutil::toy_proxy;
    use crate::lgrt::{encode_conditioning, tokenize};

    fn toy_model(v: usize) -> LgrtModel<f64> {
        let proxy: HeadProxy<f64> = toy_proxy(v);
        let mut cfg = LgrtConfig::desk(&proxy);
        cfg.dim = 32;
        cfg.pairs = 2;
        cfg.prompt_freqs = 4;
        LgrtModel::new(cfg, &proxy, 99).unwrap()
    }

    fn toy_frame(rng: &mut crate::rng::Rng, hw: usize, k: usize, j: usize) -> FrameObservation<f64> {
        let cam: Camera<f64> = Camera::look_at(
            [
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.1..0.1),
                -0.45,
            ],
            [0.0; 3],
            0.7,
            hw,
            hw,
        );
        let mut ep = ExpressionPose::identity(k, j);
        for e in ep.exp.iter_mut() {
            *e = rng.gen_range(-0.5..0.5);
        }
        FrameObservation {
            image: (0..3 * hw * hw).map(|_| rng.gen_range(0.0..1.0)).collect(),
            camera: cam,
            ep,
            landmarks: None,
        }
    }

    #[test]
    fn tokenize_shape_and_determinism() {
        let model = toy_model(6);
        let mut rng = crate::rng::stream(1, "tok");
        let img: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut g = Graph::new();
        let bp = model.bind_frozen(&mut g);
        let t1 = tokenize(&mut g, &model, &bp, &img, 64, 64).unwrap();
        assert_eq!(t1.shape().dims(), &[64, 32]);
        let t2 = tokenize(&mut g, &model, &bp, &img, 64, 64).unwrap();
        assert_eq!(g.data(t1), g.data(t2));
    }

    #[test]
    fn constant_zero_image_tokens_vary_only_by_position() {
        let model = toy_model(6);
        let img = vec![0.0; 3 * 64 * 64];
        let mut g = Graph::new();
        let bp = model.bind_frozen(&mut g);
        let t = tokenize(&mut g, &model, &bp, &img, 64, 64).unwrap();
        let d = model.config.dim;
        let data = g.data(t);
        let pe = crate::lgrt::blocks::posenc2d::<f64>(8, 8, d);
        // token − positional encoding must be the same bias row everywhere
        let bias: Vec<f64> = (0..d).map(|j| data[j] - pe[j]).collect();
        for tok in 1..64 {
            for j in 0..d {
                assert!(
                    (data[tok * d + j] - pe[tok * d + j] - bias[j]).abs() < 1e-12,
                    "token {tok} dim {j}"
                );
            }
        }
    }

    #[test]
    fn conditioning_appends_exactly_one_token() {
        let model = toy_model(6);
        let mut rng = crate::rng::stream(2, "cond");
        let f = toy_frame(&mut rng, 64, 2, 2);
        let mut g = Graph::new();
        let bp = model.bind_frozen(&mut g);
        let tokens = tokenize(&mut g, &model, &bp, &f.image, 64, 64).unwrap();
        let cond = conditioning_vector(&model.config, &f.camera, &f.ep);
        let out = encode_conditioning(&mut g, &model, &bp, tokens, &cond).unwrap();
        assert_eq!(out.shape().dim(0), tokens.shape().dim(0) + 1);
    }

    #[test]
    fn frames_differing_only_in_expression_share_image_tokens() {
        let model = toy_model(6);
        let mut rng = crate::rng::stream(3, "cond-loc");
        let f1 = toy_frame(&mut rng, 64, 2, 2);
        let mut f2 = f1.clone();
        f2.ep.exp[0] += 0.3;
        let mut g = Graph::new();
        let bp = model.bind_frozen(&mut g);
        let mk = |g: &mut Graph<f64>, f: &FrameObservation<f64>, bp: &BoundParams| {
            let tokens = tokenize(g, &model, bp, &f.image, 64, 64).unwrap();
            let cond = conditioning_vector(&model.config, &f.camera, &f.ep);
            encode_conditioning(g, &model, bp, tokens, &cond).unwrap()
        };
        let s1 = mk(&mut g, &f1, &bp);
        let s2 = mk(&mut g, &f2, &bp);
        let n = s1.shape().dim(0);
        let d = model.config.dim;
        let (d1, d2) = (g.data(s1), g.data(s2));
        // identical except the appended conditioning token
        assert_eq!(&d1[..(n - 1) * d], &d2[..(n - 1) * d]);
        assert_ne!(&d1[(n - 1) * d..], &d2[(n - 1) * d..]);
    }

    #[test]
    fn zero_conditioning_hits_the_bias_path() {
        let model = toy_model(6);
        let cfg = &model.config;
        let mut g = Graph::new();
        let bp = model.bind(&mut g);
        let tokens = g.constant(vec![0.0; 2 * cfg.dim], &[2, cfg.dim]);
        let cond = vec![0.0; cfg.cond_width()];
        let out = encode_conditioning(&mut g, &model, &bp, tokens, &cond).unwrap();
        // bias path: relu(b1)·w2 + b2 with zero conditioning input
        let b1 = &model.params[model.param_index("cond.b1")].value;
        let w2 = &model.params[model.param_index("cond.w2")].value;
        let b2 = &model.params[model.param_index("cond.b2")].value;
        let d = cfg.dim;
        let data = g.data(out);
        for j in 0..d {
            let mut want = b2[j];
            for i in 0..d {
                want += b1[i].max(0.0) * w2[i * d + j];
            }
            assert!((data[2 * d + j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_single_frame_shapes_and_finiteness() {
        let model = toy_model(6);
        let mut rng = crate::rng::stream(4, "agg1");
        let f = toy_frame(&mut rng, 32, 2, 2);
        let mut g = Graph::new();
        let bp = model.bind_frozen(&mut g);
        let out = forward_frames(&mut g, &model, &bp, &[f], GlobalMode::Full).unwrap();
        assert_eq!(out.groups.len(), 1);
        let s = stream_len(&model.config, 32, 32);
        assert_eq!(s, 6 + 16 + 1);
        for t in [
            out.groups[0].colors,
            out.groups[0].scales,
            out.groups[0].offsets,
        ] {
            assert!(g.data(t).iter().all(|v| v.is_finite()));
        }
        assert_eq!(out.landmarks[0].shape().dims(), &[3, 2]);
    }

    #[test]
    fn aggregate_rejects_zero_and_too_many_frames() {
        let model = toy_model(6);
        let mut g = Graph::new();
        let bp = model.bind_frozen(&mut g);
        assert!(forward_frames(&mut g, &model, &bp, &[], GlobalMode::Full).is_err());
        let mut rng = crate::rng::stream(5, "aggmax");
        let frames: Vec<_> = (0..17).map(|_| toy_frame(&mut rng, 32, 2, 2)).collect();
        let err = forward_frames(&mut g, &model, &bp, &frames, GlobalMode::Full).unwrap_err();
        assert!(err.to_string().contains("16"), "{err}");
    }

    #[test]
    fn permutation_of_frames_permutes_outputs() {
        let model = toy_model(6);
        let mut rng = crate::rng::stream(6, "perm");
        let frames: Vec<_> = (0..3).map(|_| toy_frame(&mut rng, 32, 2, 2)).collect();
        let run = |order: &[usize]| -> Vec<Vec<f64>> {
            let mut g = Graph::new();
            let bp = model.bind_frozen(&mut g);
            let shuffled: Vec<_> = order.iter().map(|&i| frames[i].clone()).collect();
            let out = forward_frames(&mut g, &model, &bp, &shuffled, GlobalMode::Full).unwrap();
            out.groups
                .iter()
                .map(|grp| g.data(grp.colors).to_vec())
                .collect()
        };
        let base = run(&[0, 1, 2]);
        let perm = run(&[2, 0, 1]);
        // output for frame i must follow its frame: perm[j] == base[order[j]]
        for (j, &src) in [2usize, 0, 1].iter().enumerate() {
            for (a, b) in perm[j].iter().zip(&base[src]) {
                assert!((a - b).abs() < 1e-4, "frame {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn block_diagonal_global_equals_frame_only_stack() {
        // Masking global attention to block-diagonal must reproduce applying
        // the same global-block weights to each frame separately.
        let model = toy_model(6);
        let mut rng = crate::rng::stream(7, "mask");
        let frames: Vec<_> = (0..3).map(|_| toy_frame(&mut rng, 32, 2, 2)).collect();

        let masked = {
            let mut g = Graph::new();
            let bp = model.bind_frozen(&mut g);
            let out =
                forward_frames(&mut g, &model, &bp, &frames, GlobalMode::BlockDiagonal).unwrap();
            out.groups
                .iter()
                .map(|grp| g.data(grp.colors).to_vec())
                .collect::<Vec<_>>()
        };
        // reference: run each frame alone — with one frame, global attention
        // over the concatenation *is* per-frame attention
        let per_frame: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| {
                let mut g = Graph::new();
                let bp = model.bind_frozen(&mut g);
                let out =
                    forward_frames(&mut g, &model, &bp, &[f.clone()], GlobalMode::Full).unwrap();
                g.data(out.groups[0].colors).to_vec()
            })
            .collect();
        for (a, b) in masked.iter().zip(&per_frame) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn gs_head_zero_input_activation_identities() {
        let model = toy_model(6);
        let v = 6;
        let mut g = Graph::new();
        let bp = model.bind_frozen(&mut g);
        let zero = g.constant(vec![0.0; v * model.config.dim], &[v, model.config.dim]);
        let out = gs_head(&mut g, &model, &bp, zero).unwrap();
        for i in 0..v {
            assert_eq!(g.data(out.opacities)[i], 0.5);
            for a in 0..3 {
                assert_eq!(g.data(out.offsets)[i * 3 + a], 0.0);
            }
            let q = &g.data(out.rotations)[i * 4..(i + 1) * 4];
            assert_eq!(q, &[1.0, 0.0, 0.0, 0.0]);
            // softplus(shift) ≈ 1% of head diagonal
            let diag: f64 = toy_proxy::<f64>(6).bbox_diagonal();
            let s = g.data(out.scales)[i * 3];
            assert!((s - 0.01 * diag).abs() < 1e-9, "{s} vs {}", 0.01 * diag);
        }
        assert_eq!(g.data(out.colors).len() / v, 3);
    }

    #[test]
    fn gs_head_quaternions_unit_norm() {
        let model = toy_model(6);
        let mut rng = crate::rng::stream(8, "gshq");
        let v = 6;
        let mut g = Graph::new();
        let bp = model.bind_frozen(&mut g);
        let x: Vec<f64> = (0..v * model.config.dim)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let xt = g.constant(x, &[v, model.config.dim]);
        let out = gs_head(&mut g, &model, &bp, xt).unwrap();
        for q in g.data(out.rotations).chunks(4) {
            let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.rotations.shape().dims(), &[v, 4]);
    }

    #[test]
    fn landmark_head_bounds_and_shape() {
        let model = toy_model(6);
        let mut rng = crate::rng::stream(9, "lmh");
        let mut g = Graph::new();
        let bp = model.bind_frozen(&mut g);
        let row: Vec<f64> = (0..model.config.dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let rt = g.constant(row, &[1, model.config.dim]);
        let lm = landmark_head(&mut g, &model, &bp, rt, 64, 48).unwrap();
        assert_eq!(lm.shape().dims(), &[3, 2]);
        for r in g.data(lm).chunks(2) {
            assert!(r[0] >= 0.0 && r[0] <= 64.0);
            assert!(r[1] >= 0.0 && r[1] <= 48.0);
        }
    }

    #[test]
    fn shape_oracle_over_frame_counts() {
        // Every stage's output shape is a pure function of (N, H, W, p, V, D).
        let model = toy_model(6);
        let cfg = &model.config;
        let mut rng = crate::rng::stream(10, "shapes");
        for n in [1usize, 2, 4] {
            let frames: Vec<_> = (0..n).map(|_| toy_frame(&mut rng, 32, 2, 2)).collect();
            let mut g = Graph::new();
            let bp = model.bind_frozen(&mut g);
            let out = forward_frames(&mut g, &model, &bp, &frames, GlobalMode::Full).unwrap();
            assert_eq!(out.groups.len(), n);
            for grp in &out.groups {
                assert_eq!(grp.colors.shape().dims(), &[cfg.vertex_count, 3]);
                assert_eq!(grp.opacities.shape().dims(), &[cfg.vertex_count]);
                assert_eq!(grp.scales.shape().dims(), &[cfg.vertex_count, 3]);
                assert_eq!(grp.rotations.shape().dims(), &[cfg.vertex_count, 4]);
                assert_eq!(grp.offsets.shape().dims(), &[cfg.vertex_count, 3]);
            }
        }
    }
}
