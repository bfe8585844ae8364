//! Fused scaled dot-product attention, forward and backward.
//!
//! Works in row blocks so the [t × t'] attention matrix is never held whole;
//! backward recomputes each block's softmax from q and k. Heads are
//! independent and processed in parallel; all writes are disjoint, so the
//! result does not depend on the thread count.

use crate::real::Real;
use crate::tensor::kernels::{matmul_nn, matmul_nt, matmul_tn_acc};
use rayon::prelude::*;

const BLOCK: usize = 64;

/// Block-diagonal variant: rows [b·s, (b+1)·s) attend only to the matching
/// key block. Each block is an independent dense attention, so this equals
/// masking the score matrix to block-diagonal.
pub fn forward_blocked<T: Real>(q: &[T], k: &[T], v: &[T], h: usize, t: usize, d: usize, block: usize) -> Vec<T> {
    debug_assert_eq!(t % block, 0);
    let n_blocks = t / block;
    let mut out = vec![T::ZERO; h * t * d];
    for hi in 0..h {
        for b in 0..n_blocks {
            let lo = (hi * t + b * block) * d;
            let hi_ = lo + block * d;
            let sub = forward(&q[lo..hi_], &k[lo..hi_], &v[lo..hi_], 1, block, block, d);
            out[lo..hi_].copy_from_slice(&sub);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn backward_blocked<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    grad_out: &[T],
    h: usize,
    t: usize,
    d: usize,
    block: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n_blocks = t / block;
    let mut dq = vec![T::ZERO; h * t * d];
    let mut dk = vec![T::ZERO; h * t * d];
    let mut dv = vec![T::ZERO; h * t * d];
    for hi in 0..h {
        for b in 0..n_blocks {
            let lo = (hi * t + b * block) * d;
            let hi_ = lo + block * d;
            let (sq, sk, sv) = backward(
                &q[lo..hi_],
                &k[lo..hi_],
                &v[lo..hi_],
                &grad_out[lo..hi_],
                1,
                block,
                block,
                d,
            );
            dq[lo..hi_].copy_from_slice(&sq);
            dk[lo..hi_].copy_from_slice(&sk);
            dv[lo..hi_].copy_from_slice(&sv);
        }
    }
    (dq, dk, dv)
}

/// q: [h,t,d], k/v: [h,t2,d] → out [h,t,d].
pub fn forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    h: usize,
    t: usize,
    t2: usize,
    d: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; h * t * d];
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    out.par_chunks_mut(t * d).enumerate().for_each(|(hi, oh)| {
        let qh = &q[hi * t * d..(hi + 1) * t * d];
        let kh = &k[hi * t2 * d..(hi + 1) * t2 * d];
        let vh = &v[hi * t2 * d..(hi + 1) * t2 * d];
        let mut scores = vec![T::ZERO; BLOCK * t2];
        for b0 in (0..t).step_by(BLOCK) {
            let rows = BLOCK.min(t - b0);
            let qb = &qh[b0 * d..(b0 + rows) * d];
            let sc = &mut scores[..rows * t2];
            matmul_nt(qb, kh, rows, d, t2, sc);
            for row in sc.chunks_mut(t2) {
                softmax_row(row, scale);
            }
            matmul_nn(sc, vh, rows, t2, d, &mut oh[b0 * d..(b0 + rows) * d]);
        }
    });
    out
}

/// Gradients for q, k, v given the upstream gradient of the output.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    grad_out: &[T],
    h: usize,
    t: usize,
    t2: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut dq = vec![T::ZERO; h * t * d];
    let mut dk = vec![T::ZERO; h * t2 * d];
    let mut dv = vec![T::ZERO; h * t2 * d];

    dq.par_chunks_mut(t * d)
        .zip(dk.par_chunks_mut(t2 * d))
        .zip(dv.par_chunks_mut(t2 * d))
        .enumerate()
        .for_each(|(hi, ((dqh, dkh), dvh))| {
            let qh = &q[hi * t * d..(hi + 1) * t * d];
            let kh = &k[hi * t2 * d..(hi + 1) * t2 * d];
            let vh = &v[hi * t2 * d..(hi + 1) * t2 * d];
            let goh = &grad_out[hi * t * d..(hi + 1) * t * d];

            let mut a = vec![T::ZERO; BLOCK * t2];
            let mut ds = vec![T::ZERO; BLOCK * t2];
            for b0 in (0..t).step_by(BLOCK) {
                let rows = BLOCK.min(t - b0);
                let qb = &qh[b0 * d..(b0 + rows) * d];
                let gob = &goh[b0 * d..(b0 + rows) * d];

                // Recompute the softmax block A.
                let ab = &mut a[..rows * t2];
                matmul_nt(qb, kh, rows, d, t2, ab);
                for row in ab.chunks_mut(t2) {
                    softmax_row(row, scale);
                }

                // dV += Aᵀ · dOut
                matmul_tn_acc(ab, gob, t2, rows, d, dvh);

                // dA = dOut · Vᵀ ; dS = A ⊙ (dA − rowsum(dA ⊙ A)) · scale
                let dsb = &mut ds[..rows * t2];
                matmul_nt(gob, vh, rows, d, t2, dsb);
                for (arow, dsrow) in ab.chunks(t2).zip(dsb.chunks_mut(t2)) {
                    let mut dot = T::ZERO;
                    for (&av, &dav) in arow.iter().zip(dsrow.iter()) {
                        dot += av * dav;
                    }
                    for (&av, dsv) in arow.iter().zip(dsrow.iter_mut()) {
                        *dsv = av * (*dsv - dot) * scale;
                    }
                }

                // dQ_block = dS · K ; dK += dSᵀ · Q_block
                matmul_nn(dsb, kh, rows, t2, d, &mut dqh[b0 * d..(b0 + rows) * d]);
                matmul_tn_acc(dsb, qb, t2, rows, d, dkh);
            }
        });
    (dq, dk, dv)
}

#[inline]
fn softmax_row<T: Real>(row: &mut [T], scale: T) {
    let mut m = row[0] * scale;
    for &v in row.iter() {
        m = m.max(v * scale);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v * scale - m).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}
