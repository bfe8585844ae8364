//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The default scalar type in production paths is f32; every kernel is
//! generic over [`crate::real::Real`] so the verification suite can rerun the
//! same graphs in f64 where finite-difference checks are trustworthy.

pub mod attention;
pub mod conv;
pub mod graph;
pub mod kernels;
pub mod shape;

pub use conv::Conv2dSpec;
pub use graph::{CustomOp, Graph, Tensor};
pub use shape::Shape;
