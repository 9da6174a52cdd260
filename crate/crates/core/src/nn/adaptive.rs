//! Per-pixel kernel application over a dilated neighbourhood.
//!
//! `out(b, ch, y, x) = sum_q K(b, group(ch), q, y*w + x) * X(b, ch, y + dy_q, x + dx_q)`
//! where `(dy_q, dx_q)` are the dilated `k x k` tap offsets and reads outside
//! the image are zero. `K` is `(n, groups, k*k, h*w)`; channel `ch` uses group
//! `ch / (c / groups)`.

use crate::error::{Error, Result};
use crate::nn::unfold::{check_kernel, tap_offset};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaptiveGeometry {
    pub kernel: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl AdaptiveGeometry {
    pub fn kernel_dims(&self, x: Dims) -> Dims {
        Dims::new(x.n, self.groups, self.kernel * self.kernel, x.plane())
    }

    fn check(&self, x: Dims, kernels: Dims) -> Result<()> {
        check_kernel(self.kernel, self.dilation)?;
        if self.groups == 0 || !x.c.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "{} channels not divisible by {} kernel groups",
                x.c, self.groups
            )));
        }
        if kernels != self.kernel_dims(x) {
            return Err(Error::shape(format!(
                "adaptive kernels are {kernels}, expected {} for input {x}",
                self.kernel_dims(x)
            )));
        }
        Ok(())
    }
}

/// Flat source index for tap `(dy, dx)` at pixel `(y, x)`, if in bounds.
#[inline]
fn shifted(d: Dims, y: usize, x: usize, dy: isize, dx: isize) -> Option<usize> {
    let sy = y as isize + dy;
    let sx = x as isize + dx;
    (sy >= 0 && sx >= 0 && sy < d.h as isize && sx < d.w as isize).then(|| sy as usize * d.w + sx as usize)
}

pub fn adaptive_conv_apply<T: Scalar>(
    x: &Tensor4<T>,
    kernels: &Tensor4<T>,
    geo: AdaptiveGeometry,
) -> Result<Tensor4<T>> {
    let d = x.dims();
    geo.check(d, kernels.dims())?;
    let kd = kernels.dims();
    let kk = geo.kernel * geo.kernel;
    let per_group = d.c / geo.groups;
    let taps: Vec<(isize, isize)> = (0..kk).map(|q| tap_offset(q, geo.kernel, geo.dilation)).collect();
    let (xs, ks) = (x.data(), kernels.data());
    let mut out = Tensor4::zeros(d);
    let os = out.data_mut();
    for b in 0..d.n {
        for ch in 0..d.c {
            let g = ch / per_group;
            let src = &xs[d.offset(b, ch, 0, 0)..][..d.plane()];
            let dst = &mut os[d.offset(b, ch, 0, 0)..][..d.plane()];
            for (q, &(dy, dx)) in taps.iter().enumerate() {
                let kq = &ks[kd.offset(b, g, q, 0)..][..d.plane()];
                for y in 0..d.h {
                    for xx in 0..d.w {
                        if let Some(s) = shifted(d, y, xx, dy, dx) {
                            let p = y * d.w + xx;
                            dst[p] += kq[p] * src[s];
                        }
                    }
                }
            }
        }
    }
    out.ensure_finite("adaptive_conv_apply")?;
    Ok(out)
}

/// Returns `(d_input, d_kernels)`.
pub fn adaptive_conv_apply_backward<T: Scalar>(
    x: &Tensor4<T>,
    kernels: &Tensor4<T>,
    geo: AdaptiveGeometry,
    grad_out: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let d = x.dims();
    let kd = kernels.dims();
    let kk = geo.kernel * geo.kernel;
    let per_group = d.c / geo.groups;
    let taps: Vec<(isize, isize)> = (0..kk).map(|q| tap_offset(q, geo.kernel, geo.dilation)).collect();
    let (xs, ks, gs) = (x.data(), kernels.data(), grad_out.data());
    let mut dx = Tensor4::zeros(d);
    let mut dk = Tensor4::zeros(kd);
    {
        let dxs = dx.data_mut();
        let dks = dk.data_mut();
        for b in 0..d.n {
            for ch in 0..d.c {
                let g = ch / per_group;
                let base = d.offset(b, ch, 0, 0);
                let src = &xs[base..][..d.plane()];
                let gp = &gs[base..][..d.plane()];
                for (q, &(dy, dxo)) in taps.iter().enumerate() {
                    let kbase = kd.offset(b, g, q, 0);
                    for y in 0..d.h {
                        for xx in 0..d.w {
                            if let Some(s) = shifted(d, y, xx, dy, dxo) {
                                let p = y * d.w + xx;
                                dxs[base + s] += gp[p] * ks[kbase + p];
                                dks[kbase + p] += gp[p] * src[s];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}
