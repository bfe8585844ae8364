//! Large Gaussian Reconstruction Transformer.
//!
//! Patch tokenizer with a learned linear embedding, a multi-granular
//! conditioning encoder (camera, expression, head pose appended as one extra
//! token), L interleaved (frame-attention, global-attention) pairs with 3-D
//! positional prompt tokens, a shared GS head predicting per-vertex Gaussian
//! attributes, and a landmark head over each frame's conditioning token.
//!
//! No frame-index encoding exists anywhere, so the stack is permutation
//! equivariant over input frames by construction.

pub mod blocks;
pub mod checkpoint;
pub mod heads;

pub use blocks::{aggregate, encode_conditioning, prompt_tokens, tokenize, GlobalMode};
pub use heads::{forward_frames, gs_head, landmark_head, GaussianTensors, LgrtForward};

use std::collections::HashMap;

use crate::avatar::{Camera, ExpressionPose, HeadProxy};
use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::tensor::{Graph, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// One input frame: image, camera, expression/pose conditioning, and
/// (training data only) ground-truth 2-D landmarks.
#[derive(Clone, Debug)]
pub struct FrameObservation<T> {
    /// 3×H×W linear RGB.
    pub image: Vec<T>,
    pub camera: Camera<T>,
    pub ep: ExpressionPose<T>,
    /// M×2 pixel coordinates, present only in training data.
    pub landmarks: Option<Vec<[T; 2]>>,
}

impl<T: Real> FrameObservation<T> {
    pub fn validate(&self, patch: usize) -> Result<()> {
        let (w, h) = (self.camera.width, self.camera.height);
        if self.image.len() != 3 * w * h {
            return Err(Error::contract(
                "FrameObservation",
                format!("image length {} != 3·{w}·{h}", self.image.len()),
            ));
        }
        if w % patch != 0 || h % patch != 0 {
            return Err(Error::contract(
                "FrameObservation",
                format!("{w}x{h} not divisible by patch {patch}"),
            ));
        }
        if let Some(lms) = &self.landmarks {
            for (i, lm) in lms.iter().enumerate() {
                let inside = lm[0] >= T::ZERO
                    && lm[0] <= T::from_usize(w)
                    && lm[1] >= T::ZERO
                    && lm[1] <= T::from_usize(h);
                if !inside {
                    return Err(Error::contract(
                        "FrameObservation",
                        format!("landmark {i} outside the image"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// All architecture dimensions in one record; serialized into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgrtConfig {
    /// Patch size p; H and W must divide by it.
    pub patch: usize,
    /// Token width D.
    pub dim: usize,
    pub heads: usize,
    /// Number of (frame, global) attention pairs L.
    pub pairs: usize,
    pub mlp_ratio: usize,
    /// Proxy vertex count V (= prompt token count).
    pub vertex_count: usize,
    /// Expression coefficient count K.
    pub exp_count: usize,
    pub joint_count: usize,
    /// Landmark count M.
    pub landmark_count: usize,
    /// Maximum number of input frames accepted by `aggregate`.
    pub max_frames: usize,
    /// Frequencies per axis in the 3-D prompt encoding.
    pub prompt_freqs: usize,
    /// Raw-scale shift so that zero GS-head input yields ~1% of the head
    /// diagonal after softplus.
    pub scale_shift: f64,
    /// Offsets squash to ±this via tanh (5% of the head diagonal).
    pub offset_bound: f64,
}

impl LgrtConfig {
    /// Desk-scale defaults for a given proxy.
    pub fn desk<T: Real>(proxy: &HeadProxy<T>) -> Self {
        let diag = proxy.bbox_diagonal().to_f64();
        let target = 0.01 * diag;
        LgrtConfig {
            patch: 8,
            dim: 64,
            heads: 4,
            pairs: 4,
            mlp_ratio: 4,
            vertex_count: proxy.vertex_count(),
            exp_count: proxy.expression_count(),
            joint_count: proxy.joint_count(),
            landmark_count: proxy.landmark_count(),
            max_frames: 16,
            prompt_freqs: 8,
            // softplus(x) = target  ⇔  x = ln(e^target − 1)
            scale_shift: (target.exp() - 1.0).ln(),
            offset_bound: 0.05 * diag,
        }
    }

    /// Conditioning vector width: normalized intrinsics (4) + extrinsic
    /// quaternion (4) + translation (3) + z_exp (K) + joint quats (4J) +
    /// head translation (3).
    pub fn cond_width(&self) -> usize {
        11 + self.exp_count + 4 * self.joint_count + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::contract("LgrtConfig", "dim must divide by heads"));
        }
        if self.dim % 4 != 0 {
            return Err(Error::contract(
                "LgrtConfig",
                "dim must be a multiple of 4 for the 2-D positional encoding",
            ));
        }
        if self.patch == 0 || self.pairs == 0 || self.max_frames == 0 {
            return Err(Error::contract("LgrtConfig", "zero-sized architecture"));
        }
        Ok(())
    }
}

/// One named parameter buffer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

/// The full model: trainable parameters plus proxy-derived constants
/// (canonical anchors and the prompt position encoding).
pub struct LgrtModel<T> {
    pub config: LgrtConfig,
    pub params: Vec<Param<T>>,
    /// Non-trainable buffers saved alongside parameters (`const.` prefix).
    pub constants: Vec<Param<T>>,
    index: HashMap<String, usize>,
    const_index: HashMap<String, usize>,
}

/// Graph handles for a bound model, parallel to `model.params` and
/// `model.constants`.
pub struct BoundParams {
    pub tensors: Vec<Tensor>,
    pub const_tensors: Vec<Tensor>,
}

impl<T: Real> LgrtModel<T> {
    /// Reassemble a model from deserialized parts (checkpoint loading).
    pub fn from_parts(
        config: LgrtConfig,
        params: Vec<Param<T>>,
        constants: Vec<Param<T>>,
    ) -> Result<Self> {
        config.validate()?;
        for need in ["const.anchors", "const.prompt_enc"] {
            if !constants.iter().any(|p| p.name == need) {
                return Err(Error::format("checkpoint", format!("missing {need}")));
            }
        }
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        let const_index = constants
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(LgrtModel {
            config,
            params,
            constants,
            index,
            const_index,
        })
    }

    /// Fresh model with seeded Xavier initialization.
    pub fn new(config: LgrtConfig, proxy: &HeadProxy<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        if proxy.vertex_count() != config.vertex_count
            || proxy.expression_count() != config.exp_count
            || proxy.joint_count() != config.joint_count
            || proxy.landmark_count() != config.landmark_count
        {
            return Err(Error::contract(
                "LgrtModel",
                "config dimensions disagree with the proxy",
            ));
        }
        let mut rng = crate::rng::stream(seed, "lgrt-init");
        let d = config.dim;
        let hid = d * config.mlp_ratio;
        let mut params: Vec<Param<T>> = Vec::new();

        let mut xavier = |name: &str, rows: usize, cols: usize, params: &mut Vec<Param<T>>| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let value = (0..rows * cols)
                .map(|_| lit::<T>(rng.gen_range(-a..a)))
                .collect();
            params.push(Param {
                name: name.to_string(),
                shape: vec![rows, cols],
                value,
            });
        };
        let zeros = |name: &str, n: usize, params: &mut Vec<Param<T>>| {
            params.push(Param {
                name: name.to_string(),
                shape: vec![n],
                value: vec![T::ZERO; n],
            });
        };
        let ones = |name: &str, n: usize, params: &mut Vec<Param<T>>| {
            params.push(Param {
                name: name.to_string(),
                shape: vec![n],
                value: vec![T::ONE; n],
            });
        };

        xavier(
            "patch_embed.w",
            config.patch * config.patch * 3,
            d,
            &mut params,
        );
        zeros("patch_embed.b", d, &mut params);

        xavier("cond.w1", config.cond_width(), d, &mut params);
        zeros("cond.b1", d, &mut params);
        xavier("cond.w2", d, d, &mut params);
        zeros("cond.b2", d, &mut params);

        xavier("prompt.w", 6 * config.prompt_freqs, d, &mut params);
        zeros("prompt.b", d, &mut params);

        for l in 0..config.pairs {
            for kind in ["frame", "global"] {
                let p = format!("blocks.{l}.{kind}");
                ones(&format!("{p}.ln1.g"), d, &mut params);
                zeros(&format!("{p}.ln1.b"), d, &mut params);
                for wn in ["wq", "wk", "wv", "wo"] {
                    xavier(&format!("{p}.attn.{wn}"), d, d, &mut params);
                    zeros(
                        &format!("{p}.attn.{}", wn.replace('w', "b")),
                        d,
                        &mut params,
                    );
                }
                ones(&format!("{p}.ln2.g"), d, &mut params);
                zeros(&format!("{p}.ln2.b"), d, &mut params);
                // dual stream: separate MLP weights for prompt vs image rows
                for stream in ["prompt", "img"] {
                    xavier(&format!("{p}.mlp_{stream}.w1"), d, hid, &mut params);
                    zeros(&format!("{p}.mlp_{stream}.b1"), hid, &mut params);
                    xavier(&format!("{p}.mlp_{stream}.w2"), hid, d, &mut params);
                    zeros(&format!("{p}.mlp_{stream}.b2"), d, &mut params);
                }
            }
        }

        xavier("gs_head.w1", d, d, &mut params);
        zeros("gs_head.b1", d, &mut params);
        for (attr, n) in [
            ("color", 3usize),
            ("opacity", 1),
            ("scale", 3),
            ("rot", 4),
            ("offset", 3),
        ] {
            xavier(&format!("gs_head.{attr}.w"), d, n, &mut params);
            zeros(&format!("gs_head.{attr}.b"), n, &mut params);
        }
        // identity quaternion bias: zero input must decode to [1,0,0,0]
        params
            .iter_mut()
            .find(|p| p.name == "gs_head.rot.b")
            .unwrap()
            .value[0] = T::ONE;

        xavier("lm_head.w1", d, d, &mut params);
        zeros("lm_head.b1", d, &mut params);
        xavier("lm_head.w2", d, 2 * config.landmark_count, &mut params);
        zeros("lm_head.b2", 2 * config.landmark_count, &mut params);

        let constants = vec![
            Param {
                name: "const.anchors".into(),
                shape: vec![config.vertex_count, 3],
                value: proxy.template.iter().flatten().copied().collect(),
            },
            Param {
                name: "const.prompt_enc".into(),
                shape: vec![config.vertex_count, 6 * config.prompt_freqs],
                value: prompt_encoding(proxy, config.prompt_freqs),
            },
        ];

        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        let const_index = constants
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(LgrtModel {
            config,
            params,
            constants,
            index,
            const_index,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Every parameter finite? Checked after each optimizer step.
    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Register all parameters as differentiable leaves in a fresh graph.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        self.bind_inner(g, true)
    }

    /// Register parameters as detached constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams {
        self.bind_inner(g, false)
    }

    fn bind_inner(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.value.clone(), &p.shape)
                } else {
                    g.constant(p.value.clone(), &p.shape)
                }
            })
            .collect();
        let const_tensors = self
            .constants
            .iter()
            .map(|p| g.constant(p.value.clone(), &p.shape))
            .collect();
        BoundParams {
            tensors,
            const_tensors,
        }
    }

    pub fn param_index(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn tensor(&self, bp: &BoundParams, name: &str) -> Tensor {
        bp.tensors[self.param_index(name)]
    }

    pub fn const_tensor(&self, bp: &BoundParams, name: &str) -> Tensor {
        bp.const_tensors[*self
            .const_index
            .get(name)
            .unwrap_or_else(|| panic!("unknown constant {name}"))]
    }

    /// Canonical anchor positions (the proxy template).
    pub fn anchors(&self) -> Vec<[T; 3]> {
        let c = &self.constants[self.const_index["const.anchors"]];
        c.value.chunks(3).map(|v| [v[0], v[1], v[2]]).collect()
    }
}

/// Sinusoidal encoding of canonical vertex positions, normalized to [−1, 1]
/// per axis by the template bounding box.
fn prompt_encoding<T: Real>(proxy: &HeadProxy<T>, freqs: usize) -> Vec<T> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &proxy.template {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a].to_f64());
            hi[a] = hi[a].max(v[a].to_f64());
        }
    }
    let mut out = Vec::with_capacity(proxy.vertex_count() * 6 * freqs);
    for v in &proxy.template {
        for a in 0..3 {
            let span = (hi[a] - lo[a]).max(1e-9);
            let u = 2.0 * (v[a].to_f64() - lo[a]) / span - 1.0;
            for f in 0..freqs {
                let w = (1u64 << f) as f64 * std::f64::consts::PI * u;
                out.push(lit::<T>(w.sin()));
                out.push(lit::<T>(w.cos()));
            }
        }
    }
    out
}


/// The flattened conditioning vector [π, z_exp, z_pose] for one frame.
/// Intrinsics are normalized by the image size.
pub fn conditioning_vector<T: Real>(
    config: &LgrtConfig,
    cam: &Camera<T>,
    ep: &ExpressionPose<T>,
) -> Vec<T> {
    let mut v = Vec::with_capacity(config.cond_width());
    let w = T::from_usize(cam.width);
    let h = T::from_usize(cam.height);
    v.push(cam.fx / w);
    v.push(cam.fy / h);
    v.push(cam.cx / w);
    v.push(cam.cy / h);
    v.extend_from_slice(&cam.rotation);
    v.extend_from_slice(&cam.translation);
    v.extend_from_slice(&ep.exp);
    for q in &ep.joint_rotations {
        v.extend_from_slice(q);
    }
    v.extend_from_slice(&ep.translation);
    debug_assert_eq!(v.len(), config.cond_width());
    v
}
