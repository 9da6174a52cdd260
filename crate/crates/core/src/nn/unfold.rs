//! Dilated neighbourhood unfolding (im2col without the transpose).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

/// Input offsets `(dy, dx)` of kernel position `q` (row-major over `k x k`).
#[inline]
pub fn tap_offset(q: usize, k: usize, dilation: usize) -> (isize, isize) {
    let half = (k as isize - 1) / 2;
    let r = dilation as isize;
    (r * ((q / k) as isize - half), r * ((q % k) as isize - half))
}

pub(crate) fn check_kernel(k: usize, dilation: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::Unsupported(format!("even kernel size {k}")));
    }
    if dilation == 0 {
        return Err(Error::Config("dilation must be positive".into()));
    }
    Ok(())
}

/// `(n, c, h, w)` to `(n, c, k*k, h*w)`: entry `(b, ch, q, y*w + x)` is the input
/// at `(y, x)` displaced by tap `q`, or zero outside the image.
pub fn unfold_dilated<T: Scalar>(x: &Tensor4<T>, k: usize, dilation: usize) -> Result<Tensor4<T>> {
    check_kernel(k, dilation)?;
    let d = x.dims();
    let kk = k * k;
    let od = Dims::new(d.n, d.c, kk, d.plane());
    let mut out = Tensor4::zeros(od);
    let xs = x.data();
    let os = out.data_mut();
    for b in 0..d.n {
        for ch in 0..d.c {
            let src = &xs[d.offset(b, ch, 0, 0)..][..d.plane()];
            for q in 0..kk {
                let (dy, dx) = tap_offset(q, k, dilation);
                let dst = &mut os[od.offset(b, ch, q, 0)..][..d.plane()];
                for y in 0..d.h {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for xx in 0..d.w {
                        let ix = xx as isize + dx;
                        if ix >= 0 && ix < d.w as isize {
                            dst[y * d.w + xx] = src[iy as usize * d.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn unfold_dilated_backward<T: Scalar>(input: Dims, k: usize, dilation: usize, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let kk = k * k;
    let od = Dims::new(input.n, input.c, kk, input.plane());
    let mut dx = Tensor4::zeros(input);
    let gs = grad_out.data();
    let dd = dx.data_mut();
    for b in 0..input.n {
        for ch in 0..input.c {
            let base = input.offset(b, ch, 0, 0);
            for q in 0..kk {
                let (dy, dxo) = tap_offset(q, k, dilation);
                let g = &gs[od.offset(b, ch, q, 0)..][..input.plane()];
                for y in 0..input.h {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for x in 0..input.w {
                        let ix = x as isize + dxo;
                        if ix >= 0 && ix < input.w as isize {
                            dd[base + iy as usize * input.w + ix as usize] += g[y * input.w + x];
                        }
                    }
                }
            }
        }
    }
    dx
}
