//! Compact tensor shape, rank ≤ 4, copyable.

use std::fmt;

pub const MAX_RANK: usize = 4;

/// Extents of a dense row-major tensor. Rank 0 is a scalar.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; MAX_RANK],
    rank: u8,
}

impl Shape {
    pub fn scalar() -> Self {
        Shape {
            dims: [1; MAX_RANK],
            rank: 0,
        }
    }

    /// Shape from explicit extents. Panics above rank 4; dimension *values*
    /// are unconstrained (zero-sized tensors are legal).
    pub fn of(dims: &[usize]) -> Self {
        assert!(dims.len() <= MAX_RANK, "rank {} > {}", dims.len(), MAX_RANK);
        let mut d = [1; MAX_RANK];
        d[..dims.len()].copy_from_slice(dims);
        Shape {
            dims: d,
            rank: dims.len() as u8,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn dim(&self, i: usize) -> usize {
        self.dims()[i]
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rank == 0
    }

    /// Broadcast result under trailing-dimension alignment with size-1
    /// expansion only. None when incompatible.
    pub fn broadcast(a: Shape, b: Shape) -> Option<Shape> {
        let ra = a.rank();
        let rb = b.rank();
        let r = ra.max(rb);
        let mut out = [1usize; MAX_RANK];
        for i in 0..r {
            // i counts from the trailing axis.
            let da = if i < ra { a.dims()[ra - 1 - i] } else { 1 };
            let db = if i < rb { b.dims()[rb - 1 - i] } else { 1 };
            out[r - 1 - i] = if da == db {
                da
            } else if da == 1 {
                db
            } else if db == 1 {
                da
            } else {
                return None;
            };
        }
        Some(Shape::of(&out[..r]))
    }
}

fn fmt_shape(s: &Shape, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    write!(f, "[")?;
    for (i, d) in s.dims().iter().enumerate() {
        if i > 0 {
            write!(f, "x")?;
        }
        write!(f, "{d}")?;
    }
    write!(f, "]")
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_shape(self, f)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_shape(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_trailing_alignment() {
        let a = Shape::of(&[3, 1]);
        let b = Shape::of(&[1, 4]);
        assert_eq!(Shape::broadcast(a, b), Some(Shape::of(&[3, 4])));
        let c = Shape::of(&[5, 3, 1]);
        assert_eq!(Shape::broadcast(c, b), Some(Shape::of(&[5, 3, 4])));
        assert_eq!(Shape::broadcast(Shape::of(&[2]), Shape::of(&[3])), None);
        // scalars broadcast with anything
        assert_eq!(
            Shape::broadcast(Shape::scalar(), Shape::of(&[2, 2])),
            Some(Shape::of(&[2, 2]))
        );
    }
}
