//! Dense matrix kernels. Row-major throughout. Parallelism is over disjoint
//! output row blocks, so results are identical for any thread count.

use crate::real::Real;
use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 64 * 1024;

/// C = A[m×k] · B[k×n], overwriting C.
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |c_row: &mut [T], i: usize| {
        c_row.fill(T::ZERO);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_ip * bj;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
}

/// C = A[m×k] · B[n×k]ᵀ, overwriting C. (Dot products of rows.)
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |c_row: &mut [T], i: usize| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cj) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *cj = dot(a_row, b_row);
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
}

/// C += A[k×m]ᵀ · B[k×n]. Accumulates into C.
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let rows = |c_rows: &mut [T], i0: usize| {
        let nrows = c_rows.len() / n;
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            for r in 0..nrows {
                let a_pi = a[p * m + i0 + r];
                let c_row = &mut c_rows[r * n..(r + 1) * n];
                for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                    *cj += a_pi * bj;
                }
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        // Chunk output rows so each worker streams B once per chunk.
        let chunk = 16.max(m / (rayon::current_num_threads() * 4).max(1));
        c.par_chunks_mut(chunk * n)
            .enumerate()
            .for_each(|(ci, c_rows)| rows(c_rows, ci * chunk));
    } else {
        rows(c, 0);
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators keep the FMA pipeline busy.
    let mut s0 = T::ZERO;
    let mut s1 = T::ZERO;
    let mut s2 = T::ZERO;
    let mut s3 = T::ZERO;
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    for j in chunks * 4..a.len() {
        s0 += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3)
}

/// y += alpha * x
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
