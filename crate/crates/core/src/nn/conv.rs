//! Grouped, strided, dilated 2-D convolution with zero padding.
//!
//! Every output element accumulates its taps in `(input channel, ky, kx)`
//! order starting from zero, then adds the bias. Work is split across output
//! planes only, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution that preserves spatial size (odd `kernel`).
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups: 1,
            bias: true,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.kernel,
            self.stride,
            self.dilation,
            self.groups,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("conv spec has a zero field: {self:?}")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "channels {}->{} not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn weight_dims(&self) -> Dims {
        Dims::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        )
    }

    pub fn bias_dims(&self) -> Dims {
        Dims::new(1, self.out_channels, 1, 1)
    }

    /// `floor((len + 2p - r(k-1) - 1) / s) + 1` along one axis.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            return Err(Error::shape(format!(
                "conv with receptive span {span} does not fit input length {len} (padding {})",
                self.padding
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        if input.c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {input}",
                self.in_channels
            )));
        }
        Ok(Dims::new(
            input.n,
            self.out_channels,
            self.output_len(input.h)?,
            self.output_len(input.w)?,
        ))
    }

    fn check_params<T: Scalar>(&self, weight: &Tensor4<T>, bias: Option<&Tensor4<T>>) -> Result<()> {
        self.validate()?;
        if weight.dims() != self.weight_dims() {
            return Err(Error::shape(format!(
                "conv weight is {}, expected {}",
                weight.dims(),
                self.weight_dims()
            )));
        }
        match (self.bias, bias) {
            (true, Some(b)) if b.dims() == self.bias_dims() => Ok(()),
            (true, Some(b)) => Err(Error::shape(format!(
                "conv bias is {}, expected {}",
                b.dims(),
                self.bias_dims()
            ))),
            (true, None) => Err(Error::shape("conv spec has bias but none supplied")),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(Error::shape("conv spec has no bias but one was supplied")),
        }
    }
}

/// Range of output columns `ox` whose input column `ox*s + tap - p` is in
/// `[0, in_len)`. Returned as `(lo, hi)` with `hi` exclusive.
#[inline]
pub(crate) fn valid_range(out_len: usize, in_len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    // ix = ox*s + tap - pad >= 0  <=>  ox >= ceil((pad - tap) / s)
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    // ix < in_len  <=>  ox*s < in_len + pad - tap
    let limit = in_len + pad;
    let hi = if limit > tap {
        ((limit - tap - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    spec.check_params(weight, bias)?;
    let xd = x.dims();
    let od = spec.output_dims(xd)?;
    let k = spec.kernel;
    let (s, p, r) = (spec.stride, spec.padding, spec.dilation);
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let xs = x.data();
    let ws = weight.data();
    let mut out = Tensor4::zeros(od);
    let oplane = od.plane();

    out.data_mut()
        .par_chunks_mut(oplane)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (b, o) = (idx / od.c, idx % od.c);
            let g = o / cout_g;
            for ci_l in 0..cin_g {
                let ci = g * cin_g + ci_l;
                let xplane = &xs[xd.offset(b, ci, 0, 0)..][..xd.plane()];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(od.h, xd.h, s, ky * r, p);
                    for kx in 0..k {
                        let wv = ws[((o * cin_g + ci_l) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(od.w, xd.w, s, kx * r, p);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky * r - p;
                            let row = &xplane[iy * xd.w..][..xd.w];
                            let orow = &mut plane[oy * od.w..][..od.w];
                            if s == 1 {
                                let ix0 = ox_lo + kx * r - p;
                                let src = &row[ix0..ix0 + (ox_hi - ox_lo)];
                                for (o_v, &x_v) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *o_v += wv * x_v;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * row[ox * s + kx * r - p];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(bias) = bias {
                let bv = bias.data()[o];
                for v in plane.iter_mut() {
                    *v += bv;
                }
            }
        });
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Gradients of [`conv2d`]; the bias gradient is `None` when the spec has no bias.
pub struct Conv2dGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Option<Tensor4<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    spec: &ConvSpec,
    grad_out: &Tensor4<T>,
) -> Result<Conv2dGrads<T>> {
    let xd = x.dims();
    let od = spec.output_dims(xd)?;
    if grad_out.dims() != od {
        return Err(Error::shape(format!(
            "conv2d backward: gradient {} does not match output {od}",
            grad_out.dims()
        )));
    }
    let k = spec.kernel;
    let (s, p, r) = (spec.stride, spec.padding, spec.dilation);
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let xs = x.data();
    let ws = weight.data();
    let gs = grad_out.data();

    let mut dx = Tensor4::zeros(xd);
    dx.data_mut()
        .par_chunks_mut(xd.plane())
        .enumerate()
        .for_each(|(idx, plane)| {
            let (b, ci) = (idx / xd.c, idx % xd.c);
            let g = ci / cin_g;
            let ci_l = ci % cin_g;
            for o in g * cout_g..(g + 1) * cout_g {
                let gplane = &gs[od.offset(b, o, 0, 0)..][..od.plane()];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(od.h, xd.h, s, ky * r, p);
                    for kx in 0..k {
                        let wv = ws[((o * cin_g + ci_l) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(od.w, xd.w, s, kx * r, p);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky * r - p;
                            let grow = &gplane[oy * od.w..][..od.w];
                            let drow = &mut plane[iy * xd.w..][..xd.w];
                            for ox in ox_lo..ox_hi {
                                drow[ox * s + kx * r - p] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        });

    let wd = spec.weight_dims();
    let per_out = cin_g * k * k;
    let mut dw = Tensor4::zeros(wd);
    dw.data_mut()
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(o, wslab)| {
            let g = o / cout_g;
            for ci_l in 0..cin_g {
                let ci = g * cin_g + ci_l;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(od.h, xd.h, s, ky * r, p);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = valid_range(od.w, xd.w, s, kx * r, p);
                        let mut acc = T::zero();
                        for b in 0..xd.n {
                            let gplane = &gs[od.offset(b, o, 0, 0)..][..od.plane()];
                            let xplane = &xs[xd.offset(b, ci, 0, 0)..][..xd.plane()];
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky * r - p;
                                let grow = &gplane[oy * od.w..][..od.w];
                                let xrow = &xplane[iy * xd.w..][..xd.w];
                                for ox in ox_lo..ox_hi {
                                    acc += grow[ox] * xrow[ox * s + kx * r - p];
                                }
                            }
                        }
                        wslab[(ci_l * k + ky) * k + kx] = acc;
                    }
                }
            }
        });

    let db = spec.bias.then(|| {
        let mut db = Tensor4::zeros(spec.bias_dims());
        for o in 0..od.c {
            let mut acc = T::zero();
            for b in 0..od.n {
                for &v in &gs[od.offset(b, o, 0, 0)..][..od.plane()] {
                    acc += v;
                }
            }
            db.data_mut()[o] = acc;
        }
        db
    });

    Ok(Conv2dGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct transcription of the convolution sum, used as the oracle.
    fn naive(x: &Tensor4<f64>, w: &Tensor4<f64>, b: Option<&Tensor4<f64>>, spec: &ConvSpec) -> Tensor4<f64> {
        let od = spec.output_dims(x.dims()).unwrap();
        let xd = x.dims();
        let cin_g = spec.in_channels / spec.groups;
        let cout_g = spec.out_channels / spec.groups;
        Tensor4::from_fn(od, |n, o, oy, ox| {
            let g = o / cout_g;
            let mut acc = 0.0;
            for ci_l in 0..cin_g {
                for ky in 0..spec.kernel {
                    for kx in 0..spec.kernel {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if iy < 0 || ix < 0 || iy >= xd.h as isize || ix >= xd.w as isize {
                            continue;
                        }
                        acc += w.get(o, ci_l, ky, kx) * x.get(n, g * cin_g + ci_l, iy as usize, ix as usize);
                    }
                }
            }
            acc + b.map_or(0.0, |b| b.data()[o])
        })
    }

    fn ramp(d: Dims, k: f64) -> Tensor4<f64> {
        Tensor4::from_vec(d, (0..d.len()).map(|i| ((i as f64) * k).sin()).collect()).unwrap()
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let spec = ConvSpec::same(1, 1, 3, 1).without_bias();
        let x = Tensor4::full(Dims::new(1, 1, 3, 3), 1.0f64);
        let w = Tensor4::full(spec.weight_dims(), 1.0);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 9.0);
        assert_eq!(y.get(0, 0, 0, 0), 4.0);
        assert_eq!(y.get(0, 0, 2, 2), 4.0);
        assert_eq!(y.get(0, 0, 0, 1), 6.0);
        assert_eq!(y.get(0, 0, 1, 2), 6.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let spec = ConvSpec::same(1, 1, 3, 1).without_bias();
        let x = ramp(Dims::new(2, 1, 5, 4), 0.7);
        let mut w = Tensor4::zeros(spec.weight_dims());
        w.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &w, None, &spec).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let spec = ConvSpec::same(2, 3, 3, 2);
        let x = ramp(Dims::new(1, 2, 6, 6), 0.3);
        let w = Tensor4::zeros(spec.weight_dims());
        let b = Tensor4::from_vec(spec.bias_dims(), vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), &spec).unwrap();
        for o in 0..3 {
            for yy in 0..6 {
                for xx in 0..6 {
                    assert_eq!(y.get(0, o, yy, xx), b.data()[o]);
                }
            }
        }
    }

    #[test]
    fn matches_naive_over_configurations() {
        for &(cin, cout, k, s, r, g, h, w) in &[
            (3, 4, 3, 1, 1, 1, 7, 6),
            (4, 6, 3, 2, 1, 2, 8, 8),
            (2, 2, 3, 1, 3, 1, 9, 5),
            (4, 4, 1, 2, 1, 4, 5, 5),
            (3, 2, 5, 3, 2, 1, 11, 10),
        ] {
            let mut spec = ConvSpec::same(cin, cout, k, r).with_stride(s).with_groups(g);
            spec.padding = if k == 5 { 1 } else { spec.padding };
            let x = ramp(Dims::new(2, cin, h, w), 0.37);
            let wt = ramp(spec.weight_dims(), 1.3);
            let b = ramp(spec.bias_dims(), 2.1);
            let y = conv2d(&x, &wt, Some(&b), &spec).unwrap();
            let e = naive(&x, &wt, Some(&b), &spec);
            assert!(y.max_abs_diff(&e).unwrap() < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn output_size_formula() {
        let spec = ConvSpec::same(1, 1, 3, 2).with_stride(2);
        assert_eq!(spec.output_len(9).unwrap(), (9 + 4 - 4 - 1) / 2 + 1);
        let tight = ConvSpec {
            padding: 0,
            ..ConvSpec::same(1, 1, 3, 3)
        };
        assert!(tight.output_len(6).is_err());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let spec = ConvSpec::same(3, 1, 3, 1).without_bias();
        let x = Tensor4::<f64>::zeros(Dims::new(1, 2, 4, 4));
        let w = Tensor4::zeros(spec.weight_dims());
        assert!(matches!(conv2d(&x, &w, None, &spec), Err(Error::Shape(_))));
        assert!(ConvSpec::same(3, 4, 3, 1).with_groups(2).validate().is_err());
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for out_len in 1..7 {
            for in_len in 1..9 {
                for stride in 1..4 {
                    for tap in 0..7 {
                        for pad in 0..4 {
                            let (lo, hi) = valid_range(out_len, in_len, stride, tap, pad);
                            for ox in 0..out_len {
                                let ix = (ox * stride + tap) as isize - pad as isize;
                                let ok = ix >= 0 && ix < in_len as isize;
                                assert_eq!(ok, ox >= lo && ox < hi);
                            }
                        }
                    }
                }
            }
        }
    }
}
