//! Multi-scale feature enhancement with adaptive dilated convolution.
//!
//! An adaptive convolution predicts a softmax-normalised `k x k` kernel at
//! every pixel from the input itself and applies it to the dilated
//! neighbourhood of that pixel. The enhancement module splits its input into
//! four channel slabs, runs one adaptive convolution per slab at its own
//! dilation rate, adds a global-average branch, and fuses everything with a
//! 1x1 convolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv};
use crate::nn::adaptive::AdaptiveGeometry;
use crate::nn::conv::ConvSpec;
use crate::nn::upsample::UpsampleMode;
use crate::nn::Activation;
use crate::params::{join, Bound, ConvInit, ParamInit};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::Dims;

pub const ADAPTIVE_KERNEL: usize = 3;

/// Dual-branch adaptive dilated convolution.
#[derive(Clone, Debug)]
pub struct AdaptiveConv {
    pub in_channels: usize,
    pub geometry: AdaptiveGeometry,
    compress: Conv,
    norm: BatchNorm,
}

impl AdaptiveConv {
    pub fn new(prefix: &str, in_channels: usize, dilation: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{in_channels} channels not divisible by {groups} kernel groups"
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        let kk = ADAPTIVE_KERNEL * ADAPTIVE_KERNEL;
        Ok(AdaptiveConv {
            in_channels,
            geometry: AdaptiveGeometry {
                kernel: ADAPTIVE_KERNEL,
                dilation,
                groups,
            },
            compress: Conv::new(
                join(prefix, "compress"),
                ConvSpec::same(in_channels, groups * kk, ADAPTIVE_KERNEL, dilation).without_bias(),
                ConvInit::FanIn,
            ),
            norm: BatchNorm::new(join(prefix, "norm"), groups * kk),
        })
    }

    pub fn declare<T: Scalar>(&self, init: &mut ParamInit<'_, T>) -> Result<()> {
        self.compress.declare(init)?;
        self.norm.declare(init)
    }

    pub fn norm_name(&self) -> &str {
        &self.norm.name
    }

    /// Per-pixel kernels `(n, groups, k*k, h*w)`, each summing to one.
    pub fn predict_kernels<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: ValueId) -> Result<ValueId> {
        let d = tape.dims(x)?;
        if d.c != self.in_channels {
            return Err(Error::shape(format!(
                "adaptive conv expects {} channels, got {d}",
                self.in_channels
            )));
        }
        let g = self.geometry.groups;
        let kk = ADAPTIVE_KERNEL * ADAPTIVE_KERNEL;
        let compressed = self.compress.forward(tape, bound, x)?;
        let normed = self.norm.forward(tape, bound, compressed)?;
        let per_group = tape.reshape(normed, Dims::new(d.n * g, kk, d.h, d.w))?;
        let soft = tape.softmax_channels(per_group)?;
        tape.reshape(soft, self.geometry.kernel_dims(d))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: ValueId) -> Result<ValueId> {
        let kernels = self.predict_kernels(tape, bound, x)?;
        tape.adaptive_conv_apply(x, kernels, self.geometry)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsfemConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation_rates: Vec<usize>,
    #[serde(default = "one")]
    pub groups: usize,
}

fn one() -> usize {
    1
}

impl MsfemConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        MsfemConfig {
            in_channels,
            out_channels,
            dilation_rates: vec![1, 2, 3, 4],
            groups: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.len() != 4 {
            return Err(Error::Config(format!(
                "enhancement module needs exactly 4 dilation rates, got {:?}",
                self.dilation_rates
            )));
        }
        if self.in_channels == 0 || !self.in_channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "enhancement input width {} is not a positive multiple of 4",
                self.in_channels
            )));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("enhancement output width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Msfem {
    cfg: MsfemConfig,
    branches: Vec<AdaptiveConv>,
    fuse: Conv,
}

impl Msfem {
    pub fn new(prefix: &str, cfg: &MsfemConfig) -> Result<Self> {
        cfg.validate()?;
        let slab = cfg.in_channels / 4;
        let branches = cfg
            .dilation_rates
            .iter()
            .enumerate()
            .map(|(i, &r)| AdaptiveConv::new(&join(prefix, &format!("branch{i}")), slab, r, cfg.groups))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv::new(
            join(prefix, "fuse"),
            ConvSpec::same(3 * cfg.in_channels, cfg.out_channels, 1, 1),
            ConvInit::FanIn,
        );
        Ok(Msfem {
            cfg: cfg.clone(),
            branches,
            fuse,
        })
    }

    pub fn config(&self) -> &MsfemConfig {
        &self.cfg
    }

    pub fn branches(&self) -> &[AdaptiveConv] {
        &self.branches
    }

    pub fn fuse_name(&self) -> &str {
        &self.fuse.name
    }

    pub fn declare<T: Scalar>(&self, init: &mut ParamInit<'_, T>) -> Result<()> {
        for b in &self.branches {
            b.declare(init)?;
        }
        self.fuse.declare(init)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, y: ValueId) -> Result<ValueId> {
        let d = tape.dims(y)?;
        if d.c != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "enhancement module expects {} channels, got {d}",
                self.cfg.in_channels
            )));
        }
        let slab = d.c / 4;
        let mut parts = vec![y];
        for (i, branch) in self.branches.iter().enumerate() {
            let part = tape.slice_channels(y, i * slab, slab)?;
            let a = branch.forward(tape, bound, part)?;
            parts.push(tape.activation(a, Activation::LeakyRelu)?);
        }
        let pooled = tape.adaptive_avg_pool(y)?;
        parts.push(tape.upsample(pooled, d.h, d.w, UpsampleMode::Nearest)?);
        let cat = tape.concat_channels(&parts)?;
        self.fuse.forward(tape, bound, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ModuleParams};
    use crate::tape::Mode;
    use crate::tensor::Tensor4;

    fn seeded(d: Dims, k: f64) -> Tensor4<f64> {
        Tensor4::from_vec(d, (0..d.len()).map(|i| (i as f64 * k).sin()).collect()).unwrap()
    }

    #[test]
    fn kernels_sum_to_one() {
        let m = AdaptiveConv::new("a", 4, 2, 2).unwrap();
        let mut p = ModuleParams::new();
        let mut rng = seeded_rng(5);
        m.declare(&mut ParamInit::new(&mut p, &mut rng)).unwrap();
        let mut tape = Tape::new(Mode::Train);
        let b = p.bind(&mut tape);
        let x = tape.constant(seeded(Dims::new(2, 4, 5, 5), 0.71));
        let k = m.predict_kernels(&mut tape, &b, x).unwrap();
        let kv = tape.value(k).unwrap();
        assert_eq!(kv.dims(), Dims::new(2, 2, 9, 25));
        for b in 0..2 {
            for g in 0..2 {
                for p in 0..25 {
                    let s: f64 = (0..9).map(|q| kv.get(b, g, q, p)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_gamma_gives_uniform_kernels() {
        let m = AdaptiveConv::new("a", 2, 1, 1).unwrap();
        let mut p = ModuleParams::new();
        let mut rng = seeded_rng(5);
        m.declare(&mut ParamInit::new(&mut p, &mut rng)).unwrap();
        p.set("a.norm.gamma", Tensor4::zeros(Dims::new(1, 9, 1, 1))).unwrap();
        let mut tape = Tape::new(Mode::Train);
        let b = p.bind(&mut tape);
        let x = tape.constant(seeded(Dims::new(1, 2, 4, 4), 0.3));
        let k = m.predict_kernels(&mut tape, &b, x).unwrap();
        assert!(tape
            .value(k)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn channel_bookkeeping() {
        let cfg = MsfemConfig::new(8, 5);
        let m = Msfem::new("m", &cfg).unwrap();
        let mut p = ModuleParams::new();
        let mut rng = seeded_rng(2);
        m.declare(&mut ParamInit::new(&mut p, &mut rng)).unwrap();
        assert_eq!(p.get("m.fuse.weight").unwrap().dims(), Dims::new(5, 24, 1, 1));
        let mut tape = Tape::new(Mode::Train);
        let b = p.bind(&mut tape);
        let y = tape.constant(seeded(Dims::new(1, 8, 6, 6), 0.13));
        let out = m.forward(&mut tape, &b, y).unwrap();
        assert_eq!(tape.dims(out).unwrap(), Dims::new(1, 5, 6, 6));
    }

    #[test]
    fn config_contract() {
        let mut cfg = MsfemConfig::new(6, 4);
        assert!(cfg.validate().is_err());
        cfg.in_channels = 8;
        cfg.dilation_rates = vec![1, 2, 3];
        assert!(Msfem::new("m", &cfg).is_err());
    }
}
