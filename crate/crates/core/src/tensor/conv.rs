//! Fixed-filter 2-D convolutions. Filters are frozen constants (SSIM window,
//! perceptual pyramid), so backward only propagates to the input.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::shape::Shape;

/// Dense convolution: input [C,H,W], weights [F,C,k,k], zero padding.
pub struct Conv2dSpec<T> {
    pub weights: Vec<T>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2dSpec<T> {
    pub fn new(weights: Vec<T>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert_eq!(weights.len(), cout * cin * k * k);
        Conv2dSpec {
            weights,
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

pub fn conv2d_forward<T: Real>(
    x: &[T],
    xs: Shape,
    spec: &Conv2dSpec<T>,
) -> Result<(Vec<T>, Shape)> {
    if xs.rank() != 3 || xs.dim(0) != spec.cin {
        return Err(Error::dim("conv2d", xs, format!("[{}xHxW]", spec.cin)));
    }
    let (h, w) = (xs.dim(1), xs.dim(2));
    if h + 2 * spec.pad < spec.k || w + 2 * spec.pad < spec.k {
        return Err(Error::contract(
            "conv2d",
            format!("input {xs} smaller than {}x{} kernel", spec.k, spec.k),
        ));
    }
    let (oh, ow) = spec.out_hw(h, w);
    let mut out = vec![T::ZERO; spec.cout * oh * ow];
    let kk = spec.k;
    for f in 0..spec.cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::ZERO;
                for c in 0..spec.cin {
                    let wbase = ((f * spec.cin + c) * kk) * kk;
                    for dy in 0..kk {
                        let iy = (oy * spec.stride + dy) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..kk {
                            let ix = (ox * spec.stride + dx) as isize - spec.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += spec.weights[wbase + dy * kk + dx]
                                * x[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(f * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok((out, Shape::of(&[spec.cout, oh, ow])))
}

pub fn conv2d_backward_input<T: Real>(
    grad_out: &[T],
    os: Shape,
    xs: Shape,
    spec: &Conv2dSpec<T>,
    grad_in: &mut [T],
) {
    let (h, w) = (xs.dim(1), xs.dim(2));
    let (oh, ow) = (os.dim(1), os.dim(2));
    let kk = spec.k;
    for f in 0..spec.cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(f * oh + oy) * ow + ox];
                for c in 0..spec.cin {
                    let wbase = ((f * spec.cin + c) * kk) * kk;
                    for dy in 0..kk {
                        let iy = (oy * spec.stride + dy) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..kk {
                            let ix = (ox * spec.stride + dx) as isize - spec.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            grad_in[(c * h + iy as usize) * w + ix as usize] +=
                                g * spec.weights[wbase + dy * kk + dx];
                        }
                    }
                }
            }
        }
    }
}

/// One shared 2-D kernel applied per channel, valid region only.
pub fn depthwise_valid_forward<T: Real>(
    x: &[T],
    xs: Shape,
    kernel: &[T],
    kh: usize,
    kw: usize,
) -> Result<(Vec<T>, Shape)> {
    if xs.rank() != 3 {
        return Err(Error::dim("depthwise_valid", xs, "[CxHxW]"));
    }
    let (c, h, w) = (xs.dim(0), xs.dim(1), xs.dim(2));
    if h < kh || w < kw {
        return Err(Error::contract(
            "depthwise_valid",
            format!("input {xs} smaller than {kh}x{kw} window"),
        ));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![T::ZERO; c * oh * ow];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        let oplane = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::ZERO;
                for dy in 0..kh {
                    let row = &plane[(oy + dy) * w + ox..(oy + dy) * w + ox + kw];
                    let krow = &kernel[dy * kw..(dy + 1) * kw];
                    for (kv, xv) in krow.iter().zip(row) {
                        acc += *kv * *xv;
                    }
                }
                oplane[oy * ow + ox] = acc;
            }
        }
    }
    Ok((out, Shape::of(&[c, oh, ow])))
}

pub fn depthwise_valid_backward_input<T: Real>(
    grad_out: &[T],
    os: Shape,
    xs: Shape,
    kernel: &[T],
    kh: usize,
    kw: usize,
    grad_in: &mut [T],
) {
    let (c, h, w) = (xs.dim(0), xs.dim(1), xs.dim(2));
    let (oh, ow) = (os.dim(1), os.dim(2));
    for ci in 0..c {
        let gplane = &grad_out[ci * oh * ow..(ci + 1) * oh * ow];
        let iplane = &mut grad_in[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gplane[oy * ow + ox];
                for dy in 0..kh {
                    for dx in 0..kw {
                        iplane[(oy + dy) * w + ox + dx] += g * kernel[dy * kw + dx];
                    }
                }
            }
        }
    }
}
