//! Batch normalisation over `(n, h, w)` per channel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Everything the backward rule and the running-stat update need.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    /// Normalised input `(x - mean) * inv_std`.
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics (train mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub train: bool,
}

fn per_channel<T: Scalar>(t: &Tensor4<T>, c: usize, what: &str) -> Result<()> {
    if t.dims() != Dims::new(1, c, 1, 1) {
        return Err(Error::shape(format!(
            "batch_norm {what} is {}, expected 1x{c}x1x1",
            t.dims()
        )));
    }
    Ok(())
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta`. Train mode uses biased batch
/// statistics; eval mode uses the running ones.
pub fn batch_norm<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    beta: &Tensor4<T>,
    running_mean: &Tensor4<T>,
    running_var: &Tensor4<T>,
    train: bool,
    eps: f64,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    let d = x.dims();
    for (t, what) in [
        (gamma, "gamma"),
        (beta, "beta"),
        (running_mean, "running mean"),
        (running_var, "running variance"),
    ] {
        per_channel(t, d.c, what)?;
    }
    let plane = d.plane();
    let count = d.n * plane;
    if count == 0 {
        return Err(Error::shape(format!("batch_norm on empty tensor {d}")));
    }
    let eps = T::lit(eps);
    let inv_count = T::one() / T::lit(count as f64);
    let xs = x.data();
    let mut mean = vec![T::zero(); d.c];
    let mut var = vec![T::zero(); d.c];
    if train {
        for ch in 0..d.c {
            let mut acc = T::zero();
            for b in 0..d.n {
                for &v in &xs[d.offset(b, ch, 0, 0)..][..plane] {
                    acc += v;
                }
            }
            let m = acc * inv_count;
            let mut sq = T::zero();
            for b in 0..d.n {
                for &v in &xs[d.offset(b, ch, 0, 0)..][..plane] {
                    sq += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = sq * inv_count;
        }
    } else {
        mean.copy_from_slice(running_mean.data());
        var.copy_from_slice(running_var.data());
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor4::zeros(d);
    let mut out = Tensor4::zeros(d);
    {
        let xh = xhat.data_mut();
        for b in 0..d.n {
            for ch in 0..d.c {
                let o = d.offset(b, ch, 0, 0);
                for i in o..o + plane {
                    xh[i] = (xs[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
    }
    {
        let xh = xhat.data();
        let os = out.data_mut();
        for b in 0..d.n {
            for ch in 0..d.c {
                let (g, be) = (gamma.data()[ch], beta.data()[ch]);
                let o = d.offset(b, ch, 0, 0);
                for i in o..o + plane {
                    os[i] = g * xh[i] + be;
                }
            }
        }
    }
    out.ensure_finite("batch_norm")?;
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            batch_mean: if train { mean } else { Vec::new() },
            batch_var: if train { var } else { Vec::new() },
            train,
        },
    ))
}

/// Running statistics after one momentum step towards the batch statistics.
pub fn updated_running_stats<T: Scalar>(
    running_mean: &Tensor4<T>,
    running_var: &Tensor4<T>,
    cache: &BatchNormCache<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let m = T::lit(BN_MOMENTUM);
    let keep = T::one() - m;
    let mean = Tensor4::from_vec(
        running_mean.dims(),
        running_mean
            .data()
            .iter()
            .zip(&cache.batch_mean)
            .map(|(&r, &b)| keep * r + m * b)
            .collect(),
    )
    .expect("same dims");
    let var = Tensor4::from_vec(
        running_var.dims(),
        running_var
            .data()
            .iter()
            .zip(&cache.batch_var)
            .map(|(&r, &b)| keep * r + m * b)
            .collect(),
    )
    .expect("same dims");
    (mean, var)
}

pub struct BatchNormGrads<T> {
    pub input: Tensor4<T>,
    pub gamma: Tensor4<T>,
    pub beta: Tensor4<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    gamma: &Tensor4<T>,
    cache: &BatchNormCache<T>,
    grad_out: &Tensor4<T>,
) -> BatchNormGrads<T> {
    let d = grad_out.dims();
    let plane = d.plane();
    let count = T::lit((d.n * plane) as f64);
    let gs = grad_out.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![T::zero(); d.c];
    let mut dbeta = vec![T::zero(); d.c];
    for ch in 0..d.c {
        for b in 0..d.n {
            let o = d.offset(b, ch, 0, 0);
            for i in o..o + plane {
                dbeta[ch] += gs[i];
                dgamma[ch] += gs[i] * xh[i];
            }
        }
    }
    let mut dx = Tensor4::zeros(d);
    let dd = dx.data_mut();
    for ch in 0..d.c {
        let g = gamma.data()[ch];
        let is = cache.inv_std[ch];
        for b in 0..d.n {
            let o = d.offset(b, ch, 0, 0);
            for i in o..o + plane {
                dd[i] = if cache.train {
                    g * is / count * (count * gs[i] - dbeta[ch] - xh[i] * dgamma[ch])
                } else {
                    g * is * gs[i]
                };
            }
        }
    }
    let cd = Dims::new(1, d.c, 1, 1);
    BatchNormGrads {
        input: dx,
        gamma: Tensor4::from_vec(cd, dgamma).expect("dims"),
        beta: Tensor4::from_vec(cd, dbeta).expect("dims"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(d: Dims, scale: f64) -> Tensor4<f64> {
        Tensor4::from_vec(
            d,
            (0..d.len())
                .map(|i| scale * (((i * 2654435761) % 1000) as f64 / 500.0 - 1.0) + 0.3 * (i % 5) as f64)
                .collect(),
        )
        .unwrap()
    }

    fn ones(c: usize) -> Tensor4<f64> {
        Tensor4::full(Dims::new(1, c, 1, 1), 1.0)
    }

    fn zeros(c: usize) -> Tensor4<f64> {
        Tensor4::zeros(Dims::new(1, c, 1, 1))
    }

    #[test]
    fn train_mode_standardises() {
        let d = Dims::new(3, 2, 4, 5);
        let x = seeded(d, 20.0);
        let (y, _) = batch_norm(&x, &ones(2), &zeros(2), &zeros(2), &ones(2), true, BN_EPS).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| (0..20).map(move |i| (b, i)))
                .map(|(b, i)| y.data()[d.offset(b, ch, 0, 0) + i])
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((v - 1.0).abs() < 1e-6, "var {v}");
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let x = seeded(Dims::new(2, 3, 3, 3), 1.0);
        let beta = Tensor4::from_vec(Dims::new(1, 3, 1, 1), vec![0.5, -2.0, 7.0]).unwrap();
        for train in [true, false] {
            let (y, _) = batch_norm(&x, &zeros(3), &beta, &zeros(3), &ones(3), train, BN_EPS).unwrap();
            for b in 0..2 {
                for ch in 0..3 {
                    for i in 0..9 {
                        assert_eq!(y.data()[y.dims().offset(b, ch, 0, 0) + i], beta.data()[ch]);
                    }
                }
            }
        }
    }

    #[test]
    fn eval_mode_closed_form() {
        let d = Dims::new(2, 2, 3, 3);
        let x = seeded(d, 3.0);
        let gamma = Tensor4::from_vec(Dims::new(1, 2, 1, 1), vec![1.5, -0.5]).unwrap();
        let beta = Tensor4::from_vec(Dims::new(1, 2, 1, 1), vec![0.1, 0.2]).unwrap();
        let rm = Tensor4::from_vec(Dims::new(1, 2, 1, 1), vec![0.3, -0.7]).unwrap();
        let rv = Tensor4::from_vec(Dims::new(1, 2, 1, 1), vec![2.0, 0.25]).unwrap();
        let (y, _) = batch_norm(&x, &gamma, &beta, &rm, &rv, false, BN_EPS).unwrap();
        let want = Tensor4::from_fn(d, |b, ch, yy, xx| {
            (x.get(b, ch, yy, xx) - rm.data()[ch]) / (rv.data()[ch] + BN_EPS).sqrt() * gamma.data()[ch]
                + beta.data()[ch]
        });
        assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn running_stats_move_by_momentum() {
        let x = seeded(Dims::new(2, 1, 2, 2), 1.0);
        let (_, cache) = batch_norm(&x, &ones(1), &zeros(1), &zeros(1), &ones(1), true, BN_EPS).unwrap();
        let (m, v) = updated_running_stats(&zeros(1), &ones(1), &cache);
        assert!((m.data()[0] - 0.1 * cache.batch_mean[0]).abs() < 1e-15);
        assert!((v.data()[0] - (0.9 + 0.1 * cache.batch_var[0])).abs() < 1e-15);
    }
}
