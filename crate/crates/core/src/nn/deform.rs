//! Deformable convolution (v1, one offset group): every tap of every output
//! pixel reads the input at its regular grid position plus a learned
//! fractional displacement, via bilinear interpolation with zero outside the
//! image.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl DeformSpec {
    /// Spatial-size preserving: padding `r(k-1)/2`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        DeformSpec {
            in_channels,
            out_channels,
            kernel,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn weight_dims(&self) -> Dims {
        Dims::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn bias_dims(&self) -> Dims {
        Dims::new(1, self.out_channels, 1, 1)
    }

    pub fn output_dims(&self, x: Dims) -> Result<Dims> {
        if x.c != self.in_channels {
            return Err(Error::shape(format!(
                "deform_conv2d expects {} channels, got {x}",
                self.in_channels
            )));
        }
        let span = self.dilation * (self.kernel - 1);
        if x.h + 2 * self.padding <= span || x.w + 2 * self.padding <= span {
            return Err(Error::shape(format!("deform_conv2d kernel does not fit {x}")));
        }
        Ok(Dims::new(
            x.n,
            self.out_channels,
            x.h + 2 * self.padding - span,
            x.w + 2 * self.padding - span,
        ))
    }

    pub fn offset_dims(&self, x: Dims) -> Result<Dims> {
        let od = self.output_dims(x)?;
        Ok(Dims::new(x.n, 2 * self.taps(), od.h, od.w))
    }
}

/// Bilinear footprint of one fractional sample position.
#[derive(Clone, Copy, Debug)]
struct Footprint<T> {
    y0: isize,
    x0: isize,
    ly: T,
    lx: T,
}

impl<T: Scalar> Footprint<T> {
    fn at(py: T, px: T) -> Self {
        let fy = py.floor();
        let fx = px.floor();
        Footprint {
            y0: fy.to_isize().unwrap_or(isize::MIN / 2),
            x0: fx.to_isize().unwrap_or(isize::MIN / 2),
            ly: py - fy,
            lx: px - fx,
        }
    }

    #[inline]
    fn corner(&self, plane: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
        let (y, x) = (self.y0 + dy, self.x0 + dx);
        if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
            plane[y as usize * w + x as usize]
        } else {
            T::zero()
        }
    }

    fn corners(&self, plane: &[T], h: usize, w: usize) -> [T; 4] {
        [
            self.corner(plane, h, w, 0, 0),
            self.corner(plane, h, w, 0, 1),
            self.corner(plane, h, w, 1, 0),
            self.corner(plane, h, w, 1, 1),
        ]
    }

    fn sample(&self, plane: &[T], h: usize, w: usize) -> T {
        let [v00, v01, v10, v11] = self.corners(plane, h, w);
        let one = T::one();
        (one - self.ly) * (one - self.lx) * v00
            + (one - self.ly) * self.lx * v01
            + self.ly * (one - self.lx) * v10
            + self.ly * self.lx * v11
    }
}

/// Sample positions for every `(batch, tap, output pixel)`.
fn footprints<T: Scalar>(spec: &DeformSpec, od: Dims, offsets: &Tensor4<T>) -> Vec<Footprint<T>> {
    let kk = spec.taps();
    let k = spec.kernel;
    let odims = offsets.dims();
    let mut fps = Vec::with_capacity(od.n * kk * od.plane());
    for b in 0..od.n {
        for q in 0..kk {
            let (ky, kx) = (q / k, q % k);
            for y in 0..od.h {
                for x in 0..od.w {
                    let base_y = (y + ky * spec.dilation) as f64 - spec.padding as f64;
                    let base_x = (x + kx * spec.dilation) as f64 - spec.padding as f64;
                    let dy = offsets.data()[odims.offset(b, 2 * q, y, x)];
                    let dx = offsets.data()[odims.offset(b, 2 * q + 1, y, x)];
                    fps.push(Footprint::at(T::lit(base_y) + dy, T::lit(base_x) + dx));
                }
            }
        }
    }
    fps
}

/// Forward output plus the sampled columns `(n, c_in, k*k, h_out*w_out)`
/// that the backward rule reuses.
pub fn deform_conv2d<T: Scalar>(
    x: &Tensor4<T>,
    offsets: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    spec: &DeformSpec,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let xd = x.dims();
    let od = spec.output_dims(xd)?;
    if offsets.dims() != spec.offset_dims(xd)? {
        return Err(Error::shape(format!(
            "offsets are {}, expected {}",
            offsets.dims(),
            spec.offset_dims(xd)?
        )));
    }
    if weight.dims() != spec.weight_dims() {
        return Err(Error::shape(format!(
            "deform weight is {}, expected {}",
            weight.dims(),
            spec.weight_dims()
        )));
    }
    if let Some(b) = bias {
        if b.dims() != spec.bias_dims() {
            return Err(Error::shape(format!("deform bias is {}", b.dims())));
        }
    }
    offsets.ensure_finite("deform_conv2d offsets")?;
    let kk = spec.taps();
    let plane = od.plane();
    let fps = footprints(spec, od, offsets);
    let cd = Dims::new(xd.n, xd.c, kk, plane);
    let mut cols = Tensor4::zeros(cd);
    {
        let cs = cols.data_mut();
        for b in 0..xd.n {
            for ch in 0..xd.c {
                let src = &x.data()[xd.offset(b, ch, 0, 0)..][..xd.plane()];
                for q in 0..kk {
                    let fp = &fps[(b * kk + q) * plane..][..plane];
                    let dst = &mut cs[cd.offset(b, ch, q, 0)..][..plane];
                    for (d, f) in dst.iter_mut().zip(fp) {
                        *d = f.sample(src, xd.h, xd.w);
                    }
                }
            }
        }
    }
    let mut out = Tensor4::zeros(od);
    {
        let (os, cs, ws) = (out.data_mut(), cols.data(), weight.data());
        for b in 0..od.n {
            for o in 0..od.c {
                let dst = &mut os[od.offset(b, o, 0, 0)..][..plane];
                for ch in 0..xd.c {
                    for q in 0..kk {
                        let wv = ws[(o * xd.c + ch) * kk + q];
                        let col = &cs[cd.offset(b, ch, q, 0)..][..plane];
                        for (d, &c) in dst.iter_mut().zip(col) {
                            *d += wv * c;
                        }
                    }
                }
                if let Some(bias) = bias {
                    let bv = bias.data()[o];
                    for d in dst.iter_mut() {
                        *d += bv;
                    }
                }
            }
        }
    }
    out.ensure_finite("deform_conv2d")?;
    Ok((out, cols))
}

pub struct DeformGrads<T> {
    pub input: Tensor4<T>,
    pub offsets: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Tensor4<T>,
}

pub fn deform_conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    offsets: &Tensor4<T>,
    weight: &Tensor4<T>,
    cols: &Tensor4<T>,
    spec: &DeformSpec,
    grad_out: &Tensor4<T>,
) -> Result<DeformGrads<T>> {
    let xd = x.dims();
    let od = spec.output_dims(xd)?;
    let kk = spec.taps();
    let plane = od.plane();
    let cd = cols.dims();
    let (gs, ws, cs) = (grad_out.data(), weight.data(), cols.data());

    let mut dw = Tensor4::zeros(spec.weight_dims());
    let mut db = Tensor4::zeros(spec.bias_dims());
    {
        let dws = dw.data_mut();
        for o in 0..od.c {
            for ch in 0..xd.c {
                for q in 0..kk {
                    let mut acc = T::zero();
                    for b in 0..od.n {
                        let g = &gs[od.offset(b, o, 0, 0)..][..plane];
                        let c = &cs[cd.offset(b, ch, q, 0)..][..plane];
                        for (&gv, &cv) in g.iter().zip(c) {
                            acc += gv * cv;
                        }
                    }
                    dws[(o * xd.c + ch) * kk + q] = acc;
                }
            }
            let mut acc = T::zero();
            for b in 0..od.n {
                for &gv in &gs[od.offset(b, o, 0, 0)..][..plane] {
                    acc += gv;
                }
            }
            db.data_mut()[o] = acc;
        }
    }

    let fps = footprints(spec, od, offsets);
    let mut dx = Tensor4::zeros(xd);
    let mut doff = Tensor4::zeros(offsets.dims());
    let offd = offsets.dims();
    let one = T::one();
    let mut dcol = vec![T::zero(); plane];
    for b in 0..xd.n {
        for ch in 0..xd.c {
            let src = &x.data()[xd.offset(b, ch, 0, 0)..][..xd.plane()];
            for q in 0..kk {
                dcol.iter_mut().for_each(|v| *v = T::zero());
                for o in 0..od.c {
                    let wv = ws[(o * xd.c + ch) * kk + q];
                    let g = &gs[od.offset(b, o, 0, 0)..][..plane];
                    for (d, &gv) in dcol.iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
                let fp = &fps[(b * kk + q) * plane..][..plane];
                for (p, f) in fp.iter().enumerate() {
                    let gcol = dcol[p];
                    let [v00, v01, v10, v11] = f.corners(src, xd.h, xd.w);
                    let (ly, lx) = (f.ly, f.lx);
                    let dpy = (one - lx) * (v10 - v00) + lx * (v11 - v01);
                    let dpx = (one - ly) * (v01 - v00) + ly * (v11 - v10);
                    let (y, xx) = (p / od.w, p % od.w);
                    doff.data_mut()[offd.offset(b, 2 * q, y, xx)] += gcol * dpy;
                    doff.data_mut()[offd.offset(b, 2 * q + 1, y, xx)] += gcol * dpx;
                    let corners = [
                        (0, 0, (one - ly) * (one - lx)),
                        (0, 1, (one - ly) * lx),
                        (1, 0, ly * (one - lx)),
                        (1, 1, ly * lx),
                    ];
                    for (cy, cx, wgt) in corners {
                        let (sy, sx) = (f.y0 + cy, f.x0 + cx);
                        if sy >= 0 && sx >= 0 && sy < xd.h as isize && sx < xd.w as isize {
                            let i = xd.offset(b, ch, sy as usize, sx as usize);
                            dx.data_mut()[i] += gcol * wgt;
                        }
                    }
                }
            }
        }
    }
    Ok(DeformGrads {
        input: dx,
        offsets: doff,
        weight: dw,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv::{conv2d, ConvSpec};

    fn seeded(d: Dims, k: f64) -> Tensor4<f64> {
        Tensor4::from_vec(d, (0..d.len()).map(|i| (i as f64 * k).sin()).collect()).unwrap()
    }

    #[test]
    fn zero_offsets_match_conv2d() {
        for k in [1, 3] {
            for r in [1, 2] {
                let spec = DeformSpec::same(3, 4, k, r);
                let x = seeded(Dims::new(2, 3, 6, 5), 0.77);
                let w = seeded(spec.weight_dims(), 1.9);
                let b = seeded(spec.bias_dims(), 2.3);
                let off = Tensor4::zeros(spec.offset_dims(x.dims()).unwrap());
                let (y, _) = deform_conv2d(&x, &off, &w, Some(&b), &spec).unwrap();
                let c = conv2d(&x, &w, Some(&b), &ConvSpec::same(3, 4, k, r)).unwrap();
                assert!(y.max_abs_diff(&c).unwrap() <= 1e-12, "k={k} r={r}");
            }
        }
    }

    #[test]
    fn unit_row_offset_shifts_input_up() {
        let spec = DeformSpec::same(2, 2, 3, 1);
        let x = seeded(Dims::new(1, 2, 6, 6), 0.41);
        let w = seeded(spec.weight_dims(), 1.1);
        let od = spec.offset_dims(x.dims()).unwrap();
        let off = Tensor4::from_fn(od, |_, ch, _, _| if ch % 2 == 0 { 1.0 } else { 0.0 });
        let (y, _) = deform_conv2d(&x, &off, &w, None, &spec).unwrap();
        let shifted = Tensor4::from_fn(
            x.dims(),
            |b, ch, yy, xx| if yy + 1 < 6 { x.get(b, ch, yy + 1, xx) } else { 0.0 },
        );
        let c = conv2d(&shifted, &w, None, &ConvSpec::same(2, 2, 3, 1).without_bias()).unwrap();
        // Row 0 differs: its top tap reads real row 0 where the shifted copy sees padding.
        for ch in 0..2 {
            for yy in 1..6 {
                for xx in 0..6 {
                    assert!((y.get(0, ch, yy, xx) - c.get(0, ch, yy, xx)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_exact_on_affine_ramp() {
        let spec = DeformSpec::same(1, 1, 1, 1);
        let (a, bcoef) = (0.75, -1.25);
        let x = Tensor4::from_fn(Dims::new(1, 1, 6, 7), |_, _, y, xx| a * y as f64 + bcoef * xx as f64);
        let off = Tensor4::full(spec.offset_dims(x.dims()).unwrap(), 0.5);
        let w = Tensor4::full(spec.weight_dims(), 1.0);
        let (y, _) = deform_conv2d(&x, &off, &w, None, &spec).unwrap();
        for yy in 0..5 {
            for xx in 0..6 {
                let want = a * (yy as f64 + 0.5) + bcoef * (xx as f64 + 0.5);
                assert!((y.get(0, 0, yy, xx) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn offset_shape_mismatch_is_rejected() {
        let spec = DeformSpec::same(1, 1, 3, 1);
        let x = seeded(Dims::new(1, 1, 4, 4), 0.2);
        let w = seeded(spec.weight_dims(), 0.3);
        let off = Tensor4::zeros(Dims::new(1, 17, 4, 4));
        assert!(deform_conv2d(&x, &off, &w, None, &spec).is_err());
    }
}
