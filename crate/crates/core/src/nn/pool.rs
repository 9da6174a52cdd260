//! Channel-axis pooling and global spatial averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Per-pixel reduction over channels to `(n, 1, h, w)`. For max pooling the
/// winning channel of each pixel (first one on ties) is returned as well.
pub fn pool_channel<T: Scalar>(x: &Tensor4<T>, mode: PoolMode) -> Result<(Tensor4<T>, Vec<u32>)> {
    let d = x.dims();
    if d.is_empty() {
        return Err(Error::shape(format!("pool_channel on empty tensor {d}")));
    }
    let od = Dims::new(d.n, 1, d.h, d.w);
    let plane = d.plane();
    let xs = x.data();
    let mut out = Tensor4::zeros(od);
    let mut argmax = Vec::new();
    if mode == PoolMode::Max {
        argmax = vec![0u32; od.len()];
    }
    let inv_c = T::one() / T::lit(d.c as f64);
    for b in 0..d.n {
        for i in 0..plane {
            let o = b * plane + i;
            match mode {
                PoolMode::Max => {
                    let mut best = xs[d.offset(b, 0, 0, 0) + i];
                    let mut arg = 0;
                    for ch in 1..d.c {
                        let v = xs[d.offset(b, ch, 0, 0) + i];
                        if v > best {
                            best = v;
                            arg = ch;
                        }
                    }
                    out.data_mut()[o] = best;
                    argmax[o] = arg as u32;
                }
                PoolMode::Avg => {
                    let mut acc = T::zero();
                    for ch in 0..d.c {
                        acc += xs[d.offset(b, ch, 0, 0) + i];
                    }
                    out.data_mut()[o] = if d.c == 1 { acc } else { acc * inv_c };
                }
            }
        }
    }
    out.ensure_finite("pool_channel")?;
    Ok((out, argmax))
}

pub fn pool_channel_backward<T: Scalar>(
    input: Dims,
    mode: PoolMode,
    argmax: &[u32],
    grad_out: &Tensor4<T>,
) -> Tensor4<T> {
    let plane = input.plane();
    let gs = grad_out.data();
    let mut dx = Tensor4::zeros(input);
    let inv_c = T::one() / T::lit(input.c as f64);
    let dd = dx.data_mut();
    for b in 0..input.n {
        for i in 0..plane {
            let g = gs[b * plane + i];
            match mode {
                PoolMode::Max => {
                    let ch = argmax[b * plane + i] as usize;
                    dd[input.offset(b, ch, 0, 0) + i] = g;
                }
                PoolMode::Avg => {
                    let g = if input.c == 1 { g } else { g * inv_c };
                    for ch in 0..input.c {
                        dd[input.offset(b, ch, 0, 0) + i] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Global average pooling to `(n, c, 1, 1)`.
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let d = x.dims();
    if d.h == 0 || d.w == 0 {
        return Err(Error::shape(format!("adaptive_avg_pool on {d}")));
    }
    let plane = d.plane();
    let inv = T::one() / T::lit(plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| {
            let s = p.iter().fold(T::zero(), |a, &v| a + v);
            if plane == 1 {
                s
            } else {
                s * inv
            }
        })
        .collect();
    Tensor4::from_vec(Dims::new(d.n, d.c, 1, 1), data)
}

pub fn adaptive_avg_pool_backward<T: Scalar>(input: Dims, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let plane = input.plane();
    let inv = T::one() / T::lit(plane as f64);
    let mut data = Vec::with_capacity(input.len());
    for &g in grad_out.data() {
        let g = if plane == 1 { g } else { g * inv };
        data.extend(std::iter::repeat_n(g, plane));
    }
    Tensor4::from_vec(input, data).expect("dims match")
}
