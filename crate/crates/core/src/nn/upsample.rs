//! Spatial upsampling: nearest neighbour and half-pixel-centre bilinear.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Source taps for one output coordinate: `(lo, hi, frac)` with the value
/// `(1 - frac) * v[lo] + frac * v[hi]`.
fn bilinear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

fn nearest_tap(dst: usize, in_len: usize, out_len: usize) -> usize {
    ((dst * in_len) / out_len).min(in_len - 1)
}

fn check(d: Dims, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!("upsample to zero size {out_h}x{out_w}")));
    }
    if out_h < d.h || out_w < d.w || d.h == 0 || d.w == 0 {
        return Err(Error::shape(format!(
            "upsample of {d} to {out_h}x{out_w} would shrink it"
        )));
    }
    Ok(())
}

pub fn upsample<T: Scalar>(x: &Tensor4<T>, out_h: usize, out_w: usize, mode: UpsampleMode) -> Result<Tensor4<T>> {
    let d = x.dims();
    check(d, out_h, out_w)?;
    let od = Dims::new(d.n, d.c, out_h, out_w);
    let out = match mode {
        UpsampleMode::Nearest => {
            let ys: Vec<usize> = (0..out_h).map(|y| nearest_tap(y, d.h, out_h)).collect();
            let xs: Vec<usize> = (0..out_w).map(|x| nearest_tap(x, d.w, out_w)).collect();
            Tensor4::from_fn(od, |b, ch, y, xx| x.get(b, ch, ys[y], xs[xx]))
        }
        UpsampleMode::Bilinear => {
            let ys: Vec<_> = (0..out_h).map(|y| bilinear_taps(y, d.h, out_h)).collect();
            let xs: Vec<_> = (0..out_w).map(|x| bilinear_taps(x, d.w, out_w)).collect();
            Tensor4::from_fn(od, |b, ch, y, xx| {
                let (y0, y1, ly) = ys[y];
                let (x0, x1, lx) = xs[xx];
                let (ly, lx) = (T::lit(ly), T::lit(lx));
                let one = T::one();
                let top = x.get(b, ch, y0, x0) * (one - lx) + x.get(b, ch, y0, x1) * lx;
                let bot = x.get(b, ch, y1, x0) * (one - lx) + x.get(b, ch, y1, x1) * lx;
                top * (one - ly) + bot * ly
            })
        }
    };
    out.ensure_finite("upsample")?;
    Ok(out)
}

pub fn upsample_backward<T: Scalar>(input: Dims, mode: UpsampleMode, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let od = grad_out.dims();
    let mut dx = Tensor4::zeros(input);
    let gs = grad_out.data();
    let dd = dx.data_mut();
    match mode {
        UpsampleMode::Nearest => {
            let ys: Vec<usize> = (0..od.h).map(|y| nearest_tap(y, input.h, od.h)).collect();
            let xs: Vec<usize> = (0..od.w).map(|x| nearest_tap(x, input.w, od.w)).collect();
            for b in 0..od.n {
                for ch in 0..od.c {
                    for y in 0..od.h {
                        for x in 0..od.w {
                            dd[input.offset(b, ch, ys[y], xs[x])] += gs[od.offset(b, ch, y, x)];
                        }
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ys: Vec<_> = (0..od.h).map(|y| bilinear_taps(y, input.h, od.h)).collect();
            let xs: Vec<_> = (0..od.w).map(|x| bilinear_taps(x, input.w, od.w)).collect();
            let one = T::one();
            for b in 0..od.n {
                for ch in 0..od.c {
                    for y in 0..od.h {
                        let (y0, y1, ly) = ys[y];
                        let ly = T::lit(ly);
                        for x in 0..od.w {
                            let (x0, x1, lx) = xs[x];
                            let lx = T::lit(lx);
                            let g = gs[od.offset(b, ch, y, x)];
                            dd[input.offset(b, ch, y0, x0)] += g * (one - ly) * (one - lx);
                            dd[input.offset(b, ch, y0, x1)] += g * (one - ly) * lx;
                            dd[input.offset(b, ch, y1, x0)] += g * ly * (one - lx);
                            dd[input.offset(b, ch, y1, x1)] += g * ly * lx;
                        }
                    }
                }
            }
        }
    }
    dx
}
