//! Pointwise activations and the channel-axis softmax.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
}

/// Logistic function kept strictly inside `(0, 1)` even when `exp` saturates.
#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    s.max(T::min_positive_value()).min(T::one() - T::epsilon())
}

pub fn activate<T: Scalar>(x: &Tensor4<T>, kind: Activation) -> Result<Tensor4<T>> {
    let alpha = T::lit(LEAKY_SLOPE);
    let out = match kind {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::LeakyRelu => x.map(|v| if v > T::zero() { v } else { alpha * v }),
        Activation::Sigmoid => x.map(sigmoid),
    };
    out.ensure_finite("activation")?;
    Ok(out)
}

/// `grad_out * f'(x)`; sigmoid uses its own output.
pub fn activate_backward<T: Scalar>(
    x: &Tensor4<T>,
    out: &Tensor4<T>,
    kind: Activation,
    grad_out: &Tensor4<T>,
) -> Tensor4<T> {
    let alpha = T::lit(LEAKY_SLOPE);
    let data = match kind {
        Activation::Relu => x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
        Activation::LeakyRelu => x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > T::zero() { g } else { alpha * g })
            .collect(),
        Activation::Sigmoid => out
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect(),
    };
    Tensor4::from_vec(x.dims(), data).expect("same dims")
}

/// Softmax across channels at every `(batch, y, x)`, with max subtraction.
pub fn softmax_channels<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let d = x.dims();
    let plane = d.plane();
    let xs = x.data();
    let mut out = Tensor4::zeros(d);
    let os = out.data_mut();
    let mut buf = vec![T::zero(); d.c];
    for b in 0..d.n {
        for i in 0..plane {
            let at = |ch: usize| d.offset(b, ch, 0, 0) + i;
            let mut m = xs[at(0)];
            for ch in 1..d.c {
                m = m.max(xs[at(ch)]);
            }
            let mut z = T::zero();
            for (ch, e) in buf.iter_mut().enumerate() {
                *e = (xs[at(ch)] - m).exp();
                z += *e;
            }
            for (ch, e) in buf.iter().enumerate() {
                os[at(ch)] = *e / z;
            }
        }
    }
    out.ensure_finite("softmax")?;
    Ok(out)
}

pub fn softmax_channels_backward<T: Scalar>(out: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let d = out.dims();
    let plane = d.plane();
    let (ss, gs) = (out.data(), grad_out.data());
    let mut dx = Tensor4::zeros(d);
    let dd = dx.data_mut();
    for b in 0..d.n {
        for i in 0..plane {
            let at = |ch: usize| d.offset(b, ch, 0, 0) + i;
            let mut dot = T::zero();
            for ch in 0..d.c {
                dot += gs[at(ch)] * ss[at(ch)];
            }
            for ch in 0..d.c {
                dd[at(ch)] = ss[at(ch)] * (gs[at(ch)] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn t(v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(Dims::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_values() {
        assert_eq!(
            activate(&t(&[-1.0, 2.0]), Activation::Relu).unwrap().data(),
            &[0.0, 2.0]
        );
        assert_eq!(activate(&t(&[0.0]), Activation::Sigmoid).unwrap().data(), &[0.5]);
        let l = activate(&t(&[-2.0]), Activation::LeakyRelu).unwrap();
        assert!((l.data()[0] + 0.02).abs() < 1e-17);
    }

    #[test]
    fn sigmoid_is_strictly_inside_unit_interval() {
        for v in [-1e4, -800.0, -40.0, 40.0, 800.0, 1e4] {
            let s = sigmoid(v);
            assert!(s > 0.0 && s < 1.0, "{v} -> {s}");
            let s = sigmoid(v as f32);
            assert!(s > 0.0 && s < 1.0, "{v} -> {s}");
        }
    }

    fn seeded(d: Dims) -> Tensor4<f64> {
        Tensor4::from_vec(d, (0..d.len()).map(|i| ((i * 37 % 23) as f64) * 0.3 - 3.0).collect()).unwrap()
    }

    #[test]
    fn softmax_properties() {
        let c = Tensor4::full(Dims::new(1, 4, 2, 2), 3.0f64);
        let s = softmax_channels(&c).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = seeded(Dims::new(2, 5, 3, 3));
        let a = softmax_channels(&x).unwrap();
        let b = softmax_channels(&x.map(|v| v + 17.25)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);

        let d = x.dims();
        for bb in 0..2 {
            for y in 0..3 {
                for xx in 0..3 {
                    let z: f64 = (0..5).map(|ch| x.get(bb, ch, y, xx).exp()).sum();
                    for ch in 0..5 {
                        let want = x.get(bb, ch, y, xx).exp() / z;
                        assert!((a.get(bb, ch, y, xx) - want).abs() < 1e-12);
                    }
                    let total: f64 = (0..5).map(|ch| a.data()[d.offset(bb, ch, y, xx)]).sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
