//! Tokenizer, conditioning encoder, prompt tokens and the interleaved
//! frame/global attention stack.

use super::{BoundParams, LgrtConfig, LgrtModel};
use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::tensor::{Graph, Tensor};

/// How global attention treats the concatenated token streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalMode {
    /// Attention over all frames' tokens jointly (the real model).
    Full,
    /// Diagnostic: score matrix masked to block-diagonal, so each frame
    /// attends only to itself.
    BlockDiagonal,
}

/// Extract p×p patches of a 3×H×W image as rows of a [T_tok, 3p²] matrix.
/// Patch pixels are laid out channel-major to match the embedding weight.
pub fn patch_matrix<T: Real>(image: &[T], h: usize, w: usize, p: usize) -> Vec<T> {
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(gh * gw * 3 * p * p);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..3 {
                for dy in 0..p {
                    for dx in 0..p {
                        out.push(image[c * h * w + (gy * p + dy) * w + gx * p + dx]);
                    }
                }
            }
        }
    }
    out
}

/// 2-D sinusoidal positional encoding over the patch grid, [T_tok, D].
pub fn posenc2d<T: Real>(gh: usize, gw: usize, d: usize) -> Vec<T> {
    let quarter = d / 4;
    let mut out = Vec::with_capacity(gh * gw * d);
    for r in 0..gh {
        for c in 0..gw {
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                out.push(lit::<T>((r as f64 * omega).sin()));
                out.push(lit::<T>((r as f64 * omega).cos()));
                out.push(lit::<T>((c as f64 * omega).sin()));
                out.push(lit::<T>((c as f64 * omega).cos()));
            }
        }
    }
    out
}

/// Encode one image into T_tok = (H/p)(W/p) tokens of width D: learned
/// linear patch embedding plus the fixed 2-D positional encoding.
pub fn tokenize<T: Real>(
    g: &mut Graph<T>,
    model: &LgrtModel<T>,
    bp: &BoundParams,
    image: &[T],
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let p = model.config.patch;
    if h % p != 0 || w % p != 0 {
        return Err(Error::contract(
            "tokenize",
            format!("{h}x{w} not divisible by patch {p}"),
        ));
    }
    if image.len() != 3 * h * w {
        return Err(Error::contract(
            "tokenize",
            format!("image length {} != 3·{h}·{w}", image.len()),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let patches = g.constant(patch_matrix(image, h, w, p), &[gh * gw, 3 * p * p]);
    let we = model.tensor(bp, "patch_embed.w");
    let be = model.tensor(bp, "patch_embed.b");
    let x = g.affine(patches, we, be)?;
    let pe = g.constant(posenc2d(gh, gw, model.config.dim), &[gh * gw, model.config.dim]);
    g.add(x, pe)
}

/// Append the conditioning token: MLP([π, z_exp, z_pose]) → one extra row.
pub fn encode_conditioning<T: Real>(
    g: &mut Graph<T>,
    model: &LgrtModel<T>,
    bp: &BoundParams,
    tokens: Tensor,
    cond: &[T],
) -> Result<Tensor> {
    let cfg = &model.config;
    if cond.len() != cfg.cond_width() {
        return Err(Error::contract(
            "encode_conditioning",
            format!("conditioning width {} != {}", cond.len(), cfg.cond_width()),
        ));
    }
    let c = g.constant(cond.to_vec(), &[1, cfg.cond_width()]);
    let h = g.affine(c, model.tensor(bp, "cond.w1"), model.tensor(bp, "cond.b1"))?;
    let h = g.relu(h);
    let tok = g.affine(h, model.tensor(bp, "cond.w2"), model.tensor(bp, "cond.b2"))?;
    g.concat_rows(&[tokens, tok])
}

/// Prompt tokens: learned projection of the fixed sinusoidal encoding of
/// canonical vertex positions. One token per proxy vertex, shared by every
/// frame in the forward pass.
pub fn prompt_tokens<T: Real>(
    g: &mut Graph<T>,
    model: &LgrtModel<T>,
    bp: &BoundParams,
) -> Result<Tensor> {
    let enc = model.const_tensor(bp, "const.prompt_enc");
    g.affine(enc, model.tensor(bp, "prompt.w"), model.tensor(bp, "prompt.b"))
}

/// Pre-norm multi-head attention with residual; `block` optionally masks the
/// score matrix to uniform block-diagonal.
fn attn_residual<T: Real>(
    g: &mut Graph<T>,
    model: &LgrtModel<T>,
    bp: &BoundParams,
    prefix: &str,
    x: Tensor,
    block: Option<usize>,
) -> Result<Tensor> {
    let cfg = &model.config;
    let (s, d) = (x.shape().dim(0), cfg.dim);
    let (heads, dh) = (cfg.heads, cfg.dim / cfg.heads);
    let t = |name: &str| model.tensor(bp, &format!("{prefix}.{name}"));
    let ln = g.layer_norm(x, t("ln1.g"), t("ln1.b"), lit(1e-5))?;
    let split = |g: &mut Graph<T>, y: Tensor| -> Result<Tensor> {
        let y = g.reshape(y, &[s, heads, dh])?;
        g.swap01(y)
    };
    let q = g.affine(ln, t("attn.wq"), t("attn.bq"))?;
    let k = g.affine(ln, t("attn.wk"), t("attn.bk"))?;
    let v = g.affine(ln, t("attn.wv"), t("attn.bv"))?;
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let o = match block {
        None => g.attention(q, k, v)?,
        Some(b) => g.attention_blocked(q, k, v, b)?,
    };
    let o = g.swap01(o)?;
    let o = g.reshape(o, &[s, d])?;
    let o = g.affine(o, t("attn.wo"), t("attn.bo"))?;
    g.add(x, o)
}

/// Pre-norm dual-stream MLP with residual: rows [0, V) use the prompt-stream
/// weights, the rest (image + conditioning tokens) the image-stream weights.
fn dual_mlp_residual<T: Real>(
    g: &mut Graph<T>,
    model: &LgrtModel<T>,
    bp: &BoundParams,
    prefix: &str,
    x: Tensor,
) -> Result<Tensor> {
    let v = model.config.vertex_count;
    let s = x.shape().dim(0);
    let t = |name: &str| model.tensor(bp, &format!("{prefix}.{name}"));
    let ln = g.layer_norm(x, t("ln2.g"), t("ln2.b"), lit(1e-5))?;
    let mut parts = Vec::new();
    for (range, stream) in [(0..v, "prompt"), (v..s, "img")] {
        if range.is_empty() {
            continue;
        }
        let rows = g.slice_rows(ln, range.start, range.end)?;
        let h = g.affine(
            rows,
            t(&format!("mlp_{stream}.w1")),
            t(&format!("mlp_{stream}.b1")),
        )?;
        let h = g.relu(h);
        let o = g.affine(
            h,
            t(&format!("mlp_{stream}.w2")),
            t(&format!("mlp_{stream}.b2")),
        )?;
        parts.push(o);
    }
    let mlp = g.concat_rows(&parts)?;
    g.add(x, mlp)
}

fn block<T: Real>(
    g: &mut Graph<T>,
    model: &LgrtModel<T>,
    bp: &BoundParams,
    prefix: &str,
    x: Tensor,
    mask: Option<usize>,
) -> Result<Tensor> {
    let x = attn_residual(g, model, bp, prefix, x, mask)?;
    dual_mlp_residual(g, model, bp, prefix, x)
}

/// The cascaded aggregation stack: prompt tokens are prepended to each
/// frame's stream; frame attention runs inside each stream; global attention
/// runs over the concatenation of all streams; L pairs total. Returns the
/// final per-frame streams (prompt rows first).
pub fn aggregate<T: Real>(
    g: &mut Graph<T>,
    model: &LgrtModel<T>,
    bp: &BoundParams,
    frame_streams: Vec<Tensor>,
    mode: GlobalMode,
) -> Result<Vec<Tensor>> {
    let cfg = &model.config;
    let n = frame_streams.len();
    if n == 0 {
        return Err(Error::contract("aggregate", "no input frames"));
    }
    if n > cfg.max_frames {
        return Err(Error::contract(
            "aggregate",
            format!("{n} frames exceeds the configured maximum {}", cfg.max_frames),
        ));
    }
    let s = frame_streams[0].shape().dim(0);
    let mut streams = frame_streams;
    for l in 0..cfg.pairs {
        // frame attention: each stream on its own
        let fp = format!("blocks.{l}.frame");
        for st in streams.iter_mut() {
            *st = block(g, model, bp, &fp, *st, None)?;
        }
        // global attention: concatenation of all streams. In the dual-stream
        // MLP the prompt rows of *each* frame must route to the prompt
        // stream, so attention runs on the concatenation and the MLP runs
        // per frame after splitting back.
        let gp = format!("blocks.{l}.global");
        let cat = g.concat_rows(&streams)?;
        let mask = match mode {
            GlobalMode::Full => None,
            GlobalMode::BlockDiagonal => Some(s),
        };
        let cat = attn_residual(g, model, bp, &gp, cat, mask)?;
        for (i, st) in streams.iter_mut().enumerate() {
            let rows = g.slice_rows(cat, i * s, (i + 1) * s)?;
            *st = dual_mlp_residual(g, model, bp, &gp, rows)?;
        }
    }
    Ok(streams)
}

/// Token stream for one frame: [prompts (V); image tokens (T); cond (1)].
pub fn frame_stream<T: Real>(
    g: &mut Graph<T>,
    model: &LgrtModel<T>,
    bp: &BoundParams,
    prompts: Tensor,
    image: &[T],
    h: usize,
    w: usize,
    cond: &[T],
) -> Result<Tensor> {
    let tokens = tokenize(g, model, bp, image, h, w)?;
    let with_cond = encode_conditioning(g, model, bp, tokens, cond)?;
    g.concat_rows(&[prompts, with_cond])
}

/// Expected stream length for an H×W frame: V + (H/p)(W/p) + 1.
pub fn stream_len(cfg: &LgrtConfig, h: usize, w: usize) -> usize {
    cfg.vertex_count + (h / cfg.patch) * (w / cfg.patch) + 1
}
