//! Define-by-run reverse-mode autodiff over dense tensors.
//!
//! A [`Graph`] is rebuilt every training step. Node ids are assigned in
//! creation order, which is also a topological order; backward walks ids in
//! reverse exactly once. A second backward on the same graph is an error.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::tensor::attention;
use crate::tensor::conv::{self, Conv2dSpec};
use crate::tensor::kernels;
use crate::tensor::shape::Shape;

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Clone, Copy, Debug)]
pub struct Tensor {
    pub(crate) id: u32,
    pub(crate) shape: Shape,
}

impl Tensor {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn id(&self) -> u32 {
        self.id
    }
}

/// Custom differentiable operation (used by the splat renderer).
///
/// Forward runs outside the graph; the op only has to push gradients from
/// `grad_out` into the input gradient buffers.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// `inputs` are the forward values of the op inputs, in registration
    /// order. `input_grads[i]` is `None` when input `i` does not require
    /// gradient; otherwise accumulate (+=) into the buffer.
    fn backward(&self, grad_out: &[T], inputs: &[&[T]], input_grads: &mut [Option<&mut [T]>]);
}

enum Op<T: Real> {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Ln(u32),
    Sqrt(u32),
    Abs(u32),
    Relu(u32),
    Sigmoid(u32),
    Tanh(u32),
    Softplus(u32),
    Matmul(u32, u32),
    Attention {
        q: u32,
        k: u32,
        v: u32,
        block: Option<usize>,
    },
    Reshape(u32),
    SwapAxes01(u32),
    ConcatRows(Vec<u32>),
    SliceRows { x: u32, start: usize },
    SumAll(u32),
    MeanAll(u32),
    SumRows(u32),
    Conv2d { x: u32, spec: Arc<Conv2dSpec<T>> },
    DepthwiseValid { x: u32, kernel: Arc<Vec<T>>, kh: usize, kw: usize },
    LayerNorm { x: u32, gamma: u32, beta: u32, eps: T },
    Custom { inputs: Vec<u32>, op: Arc<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Reverse-mode computation graph over scalars of type `T`.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Shape, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Tensor {
        debug_assert_eq!(shape.len(), data.len());
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Tensor { id, shape }
    }

    fn requires(&self, id: u32) -> bool {
        self.nodes[id as usize].requires_grad
    }

    /// Differentiable leaf (parameter or any tensor gradients should reach).
    pub fn leaf(&mut self, data: Vec<T>, dims: &[usize]) -> Tensor {
        let shape = Shape::of(dims);
        assert_eq!(shape.len(), data.len(), "leaf data/shape mismatch");
        self.push(shape, data, true, Op::Leaf)
    }

    /// Detached tensor: never receives gradient.
    pub fn constant(&mut self, data: Vec<T>, dims: &[usize]) -> Tensor {
        let shape = Shape::of(dims);
        assert_eq!(shape.len(), data.len(), "constant data/shape mismatch");
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: T) -> Tensor {
        self.push(Shape::scalar(), vec![v], false, Op::Leaf)
    }

    pub fn data(&self, t: Tensor) -> &[T] {
        &self.nodes[t.id as usize].data
    }

    pub fn scalar_value(&self, t: Tensor) -> T {
        debug_assert_eq!(t.shape.len(), 1);
        self.nodes[t.id as usize].data[0]
    }

    /// Gradient buffer of `t` after [`Graph::backward`]. None for detached
    /// tensors or before backward ran.
    pub fn grad(&self, t: Tensor) -> Option<&[T]> {
        self.grads
            .get(t.id as usize)
            .and_then(|g| g.as_deref())
    }

    // ---- elementwise ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(T, T) -> T,
        op: impl Fn(u32, u32) -> Op<T>,
    ) -> Result<Tensor> {
        let out_shape = Shape::broadcast(a.shape, b.shape)
            .ok_or_else(|| Error::dim(name, a.shape, b.shape))?;
        let data = broadcast_apply(
            self.data(a),
            a.shape,
            self.data(b),
            b.shape,
            out_shape,
            f,
        );
        let rg = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(out_shape, data, rg, op(a.id, b.id)))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Tensor, f: impl Fn(T) -> T, op: impl Fn(u32) -> Op<T>) -> Tensor {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let rg = self.requires(x.id);
        self.push(x.shape, data, rg, op(x.id))
    }

    pub fn neg(&mut self, x: Tensor) -> Tensor {
        self.unary(x, |v| -v, Op::Neg)
    }

    pub fn exp(&mut self, x: Tensor) -> Tensor {
        self.unary(x, |v| v.exp(), Op::Exp)
    }

    pub fn ln(&mut self, x: Tensor) -> Tensor {
        self.unary(x, |v| v.ln(), Op::Ln)
    }

    pub fn sqrt(&mut self, x: Tensor) -> Tensor {
        self.unary(x, |v| v.sqrt(), Op::Sqrt)
    }

    pub fn abs(&mut self, x: Tensor) -> Tensor {
        self.unary(x, |v| v.abs(), Op::Abs)
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        self.unary(x, |v| v.max(T::ZERO), Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        self.unary(x, sigmoid_scalar, Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Tensor) -> Tensor {
        self.unary(x, |v| v.tanh(), Op::Tanh)
    }

    /// ln(1 + e^x), computed in the overflow-safe branch form.
    pub fn softplus(&mut self, x: Tensor) -> Tensor {
        self.unary(x, softplus_scalar, Op::Softplus)
    }

    /// x * c for a plain scalar constant.
    pub fn scale(&mut self, x: Tensor, c: T) -> Tensor {
        let s = self.scalar_const(c);
        self.mul(x, s).expect("scalar broadcast always compatible")
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.shape.rank() != 2 || b.shape.rank() != 2 || a.shape.dim(1) != b.shape.dim(0) {
            return Err(Error::dim("matmul", a.shape, b.shape));
        }
        let (m, k) = (a.shape.dim(0), a.shape.dim(1));
        let n = b.shape.dim(1);
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul_nn(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Shape::of(&[m, n]), out, rg, Op::Matmul(a.id, b.id)))
    }

    /// Fused per-head scaled dot-product attention.
    ///
    /// `q`: [h, t, d], `k`/`v`: [h, t', d] → [h, t, d]. Softmax rows sum to 1.
    /// The attention matrix is never materialized whole; backward recomputes
    /// it in row blocks.
    pub fn attention(&mut self, q: Tensor, k: Tensor, v: Tensor) -> Result<Tensor> {
        self.attention_impl(q, k, v, None)
    }

    /// Attention masked to a block-diagonal score matrix with uniform block
    /// size (queries and keys must have the same length, divisible by it).
    pub fn attention_blocked(
        &mut self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        block: usize,
    ) -> Result<Tensor> {
        if q.shape != k.shape || q.shape.dim(1) % block != 0 {
            return Err(Error::dim(
                "attention_blocked",
                q.shape,
                format!("{} (block {block})", k.shape),
            ));
        }
        self.attention_impl(q, k, v, Some(block))
    }

    fn attention_impl(
        &mut self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        block: Option<usize>,
    ) -> Result<Tensor> {
        let (qs, ks, vs) = (q.shape, k.shape, v.shape);
        let ok = qs.rank() == 3
            && ks.rank() == 3
            && vs.rank() == 3
            && qs.dim(0) == ks.dim(0)
            && qs.dim(0) == vs.dim(0)
            && qs.dim(2) == ks.dim(2)
            && ks.dim(1) == vs.dim(1)
            && ks.dim(2) == vs.dim(2);
        if !ok {
            return Err(Error::dim("attention", qs, format!("{ks} / {vs}")));
        }
        let out = match block {
            None => attention::forward(
                self.data(q),
                self.data(k),
                self.data(v),
                qs.dim(0),
                qs.dim(1),
                ks.dim(1),
                qs.dim(2),
            ),
            Some(b) => attention::forward_blocked(
                self.data(q),
                self.data(k),
                self.data(v),
                qs.dim(0),
                qs.dim(1),
                qs.dim(2),
                b,
            ),
        };
        let rg = self.requires(q.id) || self.requires(k.id) || self.requires(v.id);
        Ok(self.push(
            qs,
            out,
            rg,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                block,
            },
        ))
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Tensor, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::of(dims);
        if shape.len() != x.shape.len() {
            return Err(Error::dim("reshape", x.shape, shape));
        }
        let data = self.data(x).to_vec();
        let rg = self.requires(x.id);
        Ok(self.push(shape, data, rg, Op::Reshape(x.id)))
    }

    /// Swap the two leading axes: [a,b] → [b,a] or [a,b,c] → [b,a,c].
    pub fn swap01(&mut self, x: Tensor) -> Result<Tensor> {
        let r = x.shape.rank();
        if r != 2 && r != 3 {
            return Err(Error::dim("swap01", x.shape, "rank 2 or 3"));
        }
        let (a, b) = (x.shape.dim(0), x.shape.dim(1));
        let inner = if r == 3 { x.shape.dim(2) } else { 1 };
        let data = swap01_copy(self.data(x), a, b, inner);
        let mut dims = vec![b, a];
        if r == 3 {
            dims.push(inner);
        }
        let rg = self.requires(x.id);
        Ok(self.push(Shape::of(&dims), data, rg, Op::SwapAxes01(x.id)))
    }

    /// Concatenate along axis 0. All inputs must agree on trailing dims.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows", "empty input list"));
        }
        let first = parts[0].shape;
        let mut rows = 0;
        for p in parts {
            if p.shape.rank() != first.rank()
                || p.shape.dims()[1..] != first.dims()[1..]
                || p.shape.rank() == 0
            {
                return Err(Error::dim("concat_rows", first, p.shape));
            }
            rows += p.shape.dim(0);
        }
        let mut dims = first.dims().to_vec();
        dims[0] = rows;
        let mut data = Vec::with_capacity(rows * first.dims()[1..].iter().product::<usize>());
        for p in parts {
            data.extend_from_slice(self.data(*p));
        }
        let rg = parts.iter().any(|p| self.requires(p.id));
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Shape::of(&dims), data, rg, Op::ConcatRows(ids)))
    }

    /// Rows [start, end) along axis 0.
    pub fn slice_rows(&mut self, x: Tensor, start: usize, end: usize) -> Result<Tensor> {
        if x.shape.rank() == 0 || end > x.shape.dim(0) || start > end {
            return Err(Error::contract(
                "slice_rows",
                format!("range {start}..{end} out of {}", x.shape),
            ));
        }
        let stride: usize = x.shape.dims()[1..].iter().product();
        let data = self.data(x)[start * stride..end * stride].to_vec();
        let mut dims = x.shape.dims().to_vec();
        dims[0] = end - start;
        let rg = self.requires(x.id);
        Ok(self.push(
            Shape::of(&dims),
            data,
            rg,
            Op::SliceRows { x: x.id, start },
        ))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let s: T = self.data(x).iter().copied().sum();
        let rg = self.requires(x.id);
        self.push(Shape::scalar(), vec![s], rg, Op::SumAll(x.id))
    }

    pub fn mean_all(&mut self, x: Tensor) -> Tensor {
        let n = self.data(x).len().max(1);
        let s: T = self.data(x).iter().copied().sum();
        let rg = self.requires(x.id);
        self.push(
            Shape::scalar(),
            vec![s / T::from_usize(n)],
            rg,
            Op::MeanAll(x.id),
        )
    }

    /// Sum along axis 1 of a 2-D tensor: [R,C] → [R].
    pub fn sum_rows(&mut self, x: Tensor) -> Result<Tensor> {
        if x.shape.rank() != 2 {
            return Err(Error::dim("sum_rows", x.shape, "rank 2"));
        }
        let (r, c) = (x.shape.dim(0), x.shape.dim(1));
        let data = self.data(x);
        let out: Vec<T> = (0..r)
            .map(|i| data[i * c..(i + 1) * c].iter().copied().sum())
            .collect();
        let rg = self.requires(x.id);
        Ok(self.push(Shape::of(&[r]), out, rg, Op::SumRows(x.id)))
    }

    // ---- structured ops ----

    pub fn conv2d(&mut self, x: Tensor, spec: Arc<Conv2dSpec<T>>) -> Result<Tensor> {
        let (out, out_shape) = conv::conv2d_forward(self.data(x), x.shape, &spec)?;
        let rg = self.requires(x.id);
        Ok(self.push(out_shape, out, rg, Op::Conv2d { x: x.id, spec }))
    }

    /// Per-channel valid convolution with one shared 2-D kernel.
    /// [C,H,W] → [C, H-kh+1, W-kw+1].
    pub fn depthwise_valid(
        &mut self,
        x: Tensor,
        kernel: Arc<Vec<T>>,
        kh: usize,
        kw: usize,
    ) -> Result<Tensor> {
        let (out, out_shape) = conv::depthwise_valid_forward(self.data(x), x.shape, &kernel, kh, kw)?;
        let rg = self.requires(x.id);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::DepthwiseValid {
                x: x.id,
                kernel,
                kh,
                kw,
            },
        ))
    }

    /// Row-wise layer norm over the last axis of a 2-D tensor.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: T) -> Result<Tensor> {
        if x.shape.rank() != 2
            || gamma.shape.rank() != 1
            || gamma.shape.dim(0) != x.shape.dim(1)
            || beta.shape != gamma.shape
        {
            return Err(Error::dim("layer_norm", x.shape, gamma.shape));
        }
        let (r, c) = (x.shape.dim(0), x.shape.dim(1));
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![T::ZERO; r * c];
        let inv_c = T::from_usize(c).recip();
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean: T = row.iter().copied().sum::<T>() * inv_c;
            let var: T = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                * inv_c;
            let inv_std = (var + eps).sqrt().recip();
            let o = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                o[j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let rg = self.requires(x.id) || self.requires(gamma.id) || self.requires(beta.id);
        Ok(self.push(
            x.shape,
            out,
            rg,
            Op::LayerNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        ))
    }

    /// Register an externally computed differentiable op.
    pub fn custom(
        &mut self,
        inputs: &[Tensor],
        out_data: Vec<T>,
        out_dims: &[usize],
        op: Arc<dyn CustomOp<T>>,
    ) -> Tensor {
        let rg = inputs.iter().any(|t| self.requires(t.id));
        let ids = inputs.iter().map(|t| t.id).collect();
        self.push(
            Shape::of(out_dims),
            out_data,
            rg,
            Op::Custom { inputs: ids, op },
        )
    }

    // ---- composite helpers ----

    /// x·W + b (b broadcast over rows).
    pub fn affine(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Mean of |a - b| over all elements.
    pub fn l1(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean_all(d))
    }

    // ---- backward ----

    /// Populate gradients of every reachable differentiable tensor from a
    /// scalar loss. Unreached parameters hold zeros. Errors when the loss is
    /// not scalar or backward already ran on this graph.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if loss.shape.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got {}", loss.shape),
            ));
        }
        if self.backward_done {
            return Err(Error::contract(
                "backward",
                "backward already ran on this graph",
            ));
        }
        self.backward_done = true;

        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    Some(vec![T::ZERO; n.data.len()])
                } else {
                    None
                }
            })
            .collect();
        if let Some(g) = self.grads[loss.id as usize].as_mut() {
            g[0] = T::ONE;
        } else {
            // Loss detached from every parameter: all grads stay zero.
            return Ok(());
        }

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let go = match upper[0].as_deref() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    reduce_acc(lower, a, self.nodes[a as usize].shape, node.shape, go, |g| g);
                    reduce_acc(lower, b, self.nodes[b as usize].shape, node.shape, go, |g| g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    reduce_acc(lower, a, self.nodes[a as usize].shape, node.shape, go, |g| g);
                    reduce_acc(lower, b, self.nodes[b as usize].shape, node.shape, go, |g| -g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (asb, bsb) = (self.nodes[a as usize].shape, self.nodes[b as usize].shape);
                    if lower[a as usize].is_some() {
                        let term = broadcast_apply(
                            go,
                            node.shape,
                            &self.nodes[b as usize].data,
                            bsb,
                            node.shape,
                            |g, bv| g * bv,
                        );
                        reduce_acc(lower, a, asb, node.shape, &term, |g| g);
                    }
                    if lower[b as usize].is_some() {
                        let term = broadcast_apply(
                            go,
                            node.shape,
                            &self.nodes[a as usize].data,
                            asb,
                            node.shape,
                            |g, av| g * av,
                        );
                        reduce_acc(lower, b, bsb, node.shape, &term, |g| g);
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let (asb, bsb) = (self.nodes[a as usize].shape, self.nodes[b as usize].shape);
                    if lower[a as usize].is_some() {
                        let term = broadcast_apply(
                            go,
                            node.shape,
                            &self.nodes[b as usize].data,
                            bsb,
                            node.shape,
                            |g, bv| g / bv,
                        );
                        reduce_acc(lower, a, asb, node.shape, &term, |g| g);
                    }
                    if lower[b as usize].is_some() {
                        // d/db (a/b) = -a / b²; recompute a/b from saved inputs.
                        let num = broadcast_apply(
                            go,
                            node.shape,
                            &self.nodes[a as usize].data,
                            asb,
                            node.shape,
                            |g, av| g * av,
                        );
                        let term = broadcast_apply(
                            &num,
                            node.shape,
                            &self.nodes[b as usize].data,
                            bsb,
                            node.shape,
                            |g, bv| -g / (bv * bv),
                        );
                        reduce_acc(lower, b, bsb, node.shape, &term, |g| g);
                    }
                }
                Op::Neg(x) => unary_acc(lower, *x, go, &node.data, &self.nodes, |g, _, _| -g),
                Op::Exp(x) => unary_acc(lower, *x, go, &node.data, &self.nodes, |g, _, y| g * y),
                Op::Ln(x) => unary_acc(lower, *x, go, &node.data, &self.nodes, |g, xv, _| g / xv),
                Op::Sqrt(x) => unary_acc(lower, *x, go, &node.data, &self.nodes, |g, _, y| {
                    if y == T::ZERO {
                        T::ZERO // subgradient at 0 keeps tracking loss finite
                    } else {
                        g / (lit::<T>(2.0) * y)
                    }
                }),
                Op::Abs(x) => unary_acc(lower, *x, go, &node.data, &self.nodes, |g, xv, _| {
                    if xv > T::ZERO {
                        g
                    } else if xv < T::ZERO {
                        -g
                    } else {
                        T::ZERO
                    }
                }),
                Op::Relu(x) => unary_acc(lower, *x, go, &node.data, &self.nodes, |g, xv, _| {
                    if xv > T::ZERO {
                        g
                    } else {
                        T::ZERO
                    }
                }),
                Op::Sigmoid(x) => unary_acc(lower, *x, go, &node.data, &self.nodes, |g, _, y| {
                    g * y * (T::ONE - y)
                }),
                Op::Tanh(x) => unary_acc(lower, *x, go, &node.data, &self.nodes, |g, _, y| {
                    g * (T::ONE - y * y)
                }),
                Op::Softplus(x) => unary_acc(lower, *x, go, &node.data, &self.nodes, |g, xv, _| {
                    g * sigmoid_scalar(xv)
                }),
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let m = self.nodes[a as usize].shape.dim(0);
                    let k = self.nodes[a as usize].shape.dim(1);
                    let n = node.shape.dim(1);
                    if let Some(ga) = lower[a as usize].as_deref_mut() {
                        // dA += dC · Bᵀ
                        let mut tmp = vec![T::ZERO; m * k];
                        kernels::matmul_nt(go, &self.nodes[b as usize].data, m, n, k, &mut tmp);
                        kernels::axpy(T::ONE, &tmp, ga);
                    }
                    if let Some(gb) = lower[b as usize].as_deref_mut() {
                        // dB += Aᵀ · dC
                        kernels::matmul_tn_acc(&self.nodes[a as usize].data, go, k, m, n, gb);
                    }
                }
                Op::Attention { q, k, v, block } => {
                    let (q, k, v) = (*q, *k, *v);
                    let qs = self.nodes[q as usize].shape;
                    let ks = self.nodes[k as usize].shape;
                    let (h, t, t2, d) = (qs.dim(0), qs.dim(1), ks.dim(1), qs.dim(2));
                    let (dq, dk, dv) = match block {
                        None => attention::backward(
                            &self.nodes[q as usize].data,
                            &self.nodes[k as usize].data,
                            &self.nodes[v as usize].data,
                            go,
                            h,
                            t,
                            t2,
                            d,
                        ),
                        Some(b) => attention::backward_blocked(
                            &self.nodes[q as usize].data,
                            &self.nodes[k as usize].data,
                            &self.nodes[v as usize].data,
                            go,
                            h,
                            t,
                            d,
                            *b,
                        ),
                    };
                    if let Some(g) = lower[q as usize].as_deref_mut() {
                        kernels::axpy(T::ONE, &dq, g);
                    }
                    if let Some(g) = lower[k as usize].as_deref_mut() {
                        kernels::axpy(T::ONE, &dk, g);
                    }
                    if let Some(g) = lower[v as usize].as_deref_mut() {
                        kernels::axpy(T::ONE, &dv, g);
                    }
                }
                Op::Reshape(x) => {
                    if let Some(g) = lower[*x as usize].as_deref_mut() {
                        kernels::axpy(T::ONE, go, g);
                    }
                }
                Op::SwapAxes01(x) => {
                    let x = *x;
                    if lower[x as usize].is_some() {
                        let (a, b) = (node.shape.dim(0), node.shape.dim(1));
                        let inner = if node.shape.rank() == 3 {
                            node.shape.dim(2)
                        } else {
                            1
                        };
                        let back = swap01_copy(go, a, b, inner);
                        let g = lower[x as usize].as_deref_mut().unwrap();
                        kernels::axpy(T::ONE, &back, g);
                    }
                }
                Op::ConcatRows(ids) => {
                    let mut off = 0;
                    for &xid in ids {
                        let len = self.nodes[xid as usize].data.len();
                        if let Some(g) = lower[xid as usize].as_deref_mut() {
                            kernels::axpy(T::ONE, &go[off..off + len], g);
                        }
                        off += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    let x = *x;
                    if let Some(g) = lower[x as usize].as_deref_mut() {
                        let stride: usize =
                            self.nodes[x as usize].shape.dims()[1..].iter().product();
                        let off = start * stride;
                        kernels::axpy(T::ONE, go, &mut g[off..off + go.len()]);
                    }
                }
                Op::SumAll(x) => {
                    if let Some(g) = lower[*x as usize].as_deref_mut() {
                        let gv = go[0];
                        for gi in g.iter_mut() {
                            *gi += gv;
                        }
                    }
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    if let Some(g) = lower[x as usize].as_deref_mut() {
                        let n = self.nodes[x as usize].data.len().max(1);
                        let gv = go[0] / T::from_usize(n);
                        for gi in g.iter_mut() {
                            *gi += gv;
                        }
                    }
                }
                Op::SumRows(x) => {
                    let x = *x;
                    if let Some(g) = lower[x as usize].as_deref_mut() {
                        let c = self.nodes[x as usize].shape.dim(1);
                        for (i, gi) in g.chunks_mut(c).enumerate() {
                            let gv = go[i];
                            for v in gi.iter_mut() {
                                *v += gv;
                            }
                        }
                    }
                }
                Op::Conv2d { x, spec } => {
                    let x = *x;
                    if let Some(g) = lower[x as usize].as_deref_mut() {
                        conv::conv2d_backward_input(
                            go,
                            node.shape,
                            self.nodes[x as usize].shape,
                            spec,
                            g,
                        );
                    }
                }
                Op::DepthwiseValid { x, kernel, kh, kw } => {
                    let x = *x;
                    if let Some(g) = lower[x as usize].as_deref_mut() {
                        conv::depthwise_valid_backward_input(
                            go,
                            node.shape,
                            self.nodes[x as usize].shape,
                            kernel,
                            *kh,
                            *kw,
                            g,
                        );
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    layer_norm_backward(
                        &self.nodes,
                        lower,
                        go,
                        *x,
                        *gamma,
                        *beta,
                        *eps,
                    );
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&[T]> = inputs
                        .iter()
                        .map(|&id| self.nodes[id as usize].data.as_slice())
                        .collect();
                    // Distinct slots for duplicated inputs are not supported;
                    // the renderer never passes the same tensor twice.
                    let mut guards: Vec<Option<&mut [T]>> = Vec::with_capacity(inputs.len());
                    let lower_ptr = lower.as_mut_ptr();
                    let mut seen = std::collections::HashSet::new();
                    for &id in inputs {
                        if !seen.insert(id) {
                            guards.push(None);
                            continue;
                        }
                        // Safe: ids are unique here and all < i.
                        let slot = unsafe { &mut *lower_ptr.add(id as usize) };
                        guards.push(slot.as_deref_mut());
                    }
                    op.backward(go, &vals, &mut guards);
                }
            }
        }
        Ok(())
    }
}

fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

fn softplus_scalar<T: Real>(v: T) -> T {
    if v > lit(30.0) {
        v
    } else if v < lit(-30.0) {
        v.exp()
    } else {
        (T::ONE + v.exp()).ln()
    }
}

/// Apply `f` elementwise under trailing-axis broadcasting into `out_shape`.
fn broadcast_apply<T: Real>(
    a: &[T],
    ash: Shape,
    b: &[T],
    bsh: Shape,
    out: Shape,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let n = out.len();
    // Fast paths: identical shapes, scalar operands, suffix operands.
    if ash == out && bsh == out {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if ash == out && b.len() == 1 {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if bsh == out && a.len() == 1 {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    if ash == out && is_suffix(bsh, out) {
        let bl = b.len().max(1);
        return a
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b[i % bl]))
            .collect();
    }
    if bsh == out && is_suffix(ash, out) {
        let al = a.len().max(1);
        return b
            .iter()
            .enumerate()
            .map(|(i, &y)| f(a[i % al], y))
            .collect();
    }
    // General odometer walk.
    let r = out.rank();
    let sa = broadcast_strides(ash, out);
    let sb = broadcast_strides(bsh, out);
    let mut coords = [0usize; crate::tensor::shape::MAX_RANK];
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        res.push(f(a[ia], b[ib]));
        // increment odometer from the last axis
        for d in (0..r).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out.dim(d) {
                break;
            }
            ia -= sa[d] * coords[d];
            ib -= sb[d] * coords[d];
            coords[d] = 0;
        }
    }
    res
}

fn is_suffix(small: Shape, big: Shape) -> bool {
    let rs = small.rank();
    let rb = big.rank();
    rs <= rb && small.dims() == &big.dims()[rb - rs..]
}

/// Per-output-axis element strides into a broadcast input (0 on expanded axes).
fn broadcast_strides(input: Shape, out: Shape) -> [usize; crate::tensor::shape::MAX_RANK] {
    let r = out.rank();
    let ri = input.rank();
    let mut strides = [0usize; crate::tensor::shape::MAX_RANK];
    let mut acc = 1usize;
    for i in 0..ri {
        let d = ri - 1 - i; // input axis from the right
        let od = r - 1 - i; // matching output axis
        if input.dim(d) != 1 {
            strides[od] = acc;
        }
        acc *= input.dim(d);
    }
    strides
}

/// Accumulate `term` (shaped like `out_shape`) into the gradient of input
/// `id`, summing over broadcast axes.
fn reduce_acc<T: Real>(
    grads: &mut [Option<Vec<T>>],
    id: u32,
    in_shape: Shape,
    out_shape: Shape,
    term: &[T],
    f: impl Fn(T) -> T,
) {
    let Some(g) = grads[id as usize].as_deref_mut() else {
        return;
    };
    if in_shape == out_shape {
        for (gi, &t) in g.iter_mut().zip(term) {
            *gi += f(t);
        }
        return;
    }
    let r = out_shape.rank();
    let s = broadcast_strides(in_shape, out_shape);
    let mut coords = [0usize; crate::tensor::shape::MAX_RANK];
    let mut ii = 0usize;
    for &t in term {
        g[ii] += f(t);
        for d in (0..r).rev() {
            coords[d] += 1;
            ii += s[d];
            if coords[d] < out_shape.dim(d) {
                break;
            }
            ii -= s[d] * coords[d];
            coords[d] = 0;
        }
    }
}

fn unary_acc<T: Real>(
    grads: &mut [Option<Vec<T>>],
    id: u32,
    go: &[T],
    out_data: &[T],
    nodes: &[Node<T>],
    df: impl Fn(T, T, T) -> T, // (grad, x, y) -> dx
) {
    if let Some(g) = grads[id as usize].as_deref_mut() {
        let x = &nodes[id as usize].data;
        for i in 0..g.len() {
            g[i] += df(go[i], x[i], out_data[i]);
        }
    }
}

fn swap01_copy<T: Real>(data: &[T], a: usize, b: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; data.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * inner;
            let dst = (j * a + i) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

fn layer_norm_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    go: &[T],
    x: u32,
    gamma: u32,
    beta: u32,
    eps: T,
) {
    let xs = nodes[x as usize].shape;
    let (r, c) = (xs.dim(0), xs.dim(1));
    let xd = &nodes[x as usize].data;
    let gd = &nodes[gamma as usize].data;
    let inv_c = T::from_usize(c).recip();

    for i in 0..r {
        let row = &xd[i * c..(i + 1) * c];
        let gr = &go[i * c..(i + 1) * c];
        let mean: T = row.iter().copied().sum::<T>() * inv_c;
        let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let inv_std = (var + eps).sqrt().recip();

        if grads[beta as usize].is_some() || grads[gamma as usize].is_some() {
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                if let Some(gg) = grads[gamma as usize].as_deref_mut() {
                    gg[j] += gr[j] * xhat;
                }
                if let Some(gb) = grads[beta as usize].as_deref_mut() {
                    gb[j] += gr[j];
                }
            }
        }
        if grads[x as usize].is_some() {
            // dx = inv_std * (dyγ − mean(dyγ) − x̂·mean(dyγ·x̂))
            let mut m1 = T::ZERO;
            let mut m2 = T::ZERO;
            for j in 0..c {
                let dyg = gr[j] * gd[j];
                let xhat = (row[j] - mean) * inv_std;
                m1 += dyg;
                m2 += dyg * xhat;
            }
            m1 *= inv_c;
            m2 *= inv_c;
            let gx = grads[x as usize].as_deref_mut().unwrap();
            for j in 0..c {
                let dyg = gr[j] * gd[j];
                let xhat = (row[j] - mean) * inv_std;
                gx[i * c + j] += inv_std * (dyg - m1 - xhat * m2);
            }
        }
    }
}
