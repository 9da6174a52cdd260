//! Spatial pyramid attention gate.
//!
//! The input is summarised by per-pixel channel max and mean, passed through
//! three parallel dilated 3x3 convolutions with ReLU, fused by a 1x1
//! convolution and squashed by a sigmoid into a one-channel map that rescales
//! every channel of the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::nn::conv::ConvSpec;
use crate::nn::pool::PoolMode;
use crate::params::{join, Bound, ConvInit, ParamInit};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};

pub const SLPA_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlpaConfig {
    pub dilation_rates: Vec<usize>,
    pub branch_channels: usize,
}

impl Default for SlpaConfig {
    fn default() -> Self {
        SlpaConfig {
            dilation_rates: vec![1, 2, 3],
            branch_channels: 1,
        }
    }
}

impl SlpaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.len() != 3 {
            return Err(Error::Config(format!(
                "attention gate needs exactly 3 dilation rates, got {:?}",
                self.dilation_rates
            )));
        }
        if self.dilation_rates.contains(&0) || self.branch_channels == 0 {
            return Err(Error::Config(format!(
                "rates and branch width must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Gated output and the attention map that produced it.
#[derive(Clone, Copy, Debug)]
pub struct SlpaOutput {
    pub features: ValueId,
    pub attention: ValueId,
}

#[derive(Clone, Debug)]
pub struct Slpa {
    branches: Vec<Conv>,
    fuse: Conv,
}

impl Slpa {
    pub fn new(prefix: &str, cfg: &SlpaConfig) -> Result<Self> {
        cfg.validate()?;
        let bc = cfg.branch_channels;
        let branches = cfg
            .dilation_rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                Conv::new(
                    join(prefix, &format!("branch{i}")),
                    ConvSpec::same(2, bc, SLPA_KERNEL, r),
                    ConvInit::FanIn,
                )
            })
            .collect();
        let fuse = Conv::new(join(prefix, "fuse"), ConvSpec::same(3 * bc, 1, 1, 1), ConvInit::Zero);
        Ok(Slpa { branches, fuse })
    }

    pub fn declare<T: Scalar>(&self, init: &mut ParamInit<'_, T>) -> Result<()> {
        for b in &self.branches {
            b.declare(init)?;
        }
        self.fuse.declare(init)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: ValueId) -> Result<SlpaOutput> {
        let mx = tape.pool_channel(x, PoolMode::Max)?;
        let avg = tape.pool_channel(x, PoolMode::Avg)?;
        let pooled = tape.concat_channels(&[mx, avg])?;
        let mut branch_out = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let f = b.forward(tape, bound, pooled)?;
            branch_out.push(tape.relu(f)?);
        }
        let z = tape.concat_channels(&branch_out)?;
        let logits = self.fuse.forward(tape, bound, z)?;
        let attention = tape.activation(logits, crate::nn::Activation::Sigmoid)?;
        let features = tape.mul(x, attention)?;
        Ok(SlpaOutput { features, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ModuleParams};
    use crate::tape::Mode;
    use crate::tensor::{Dims, Tensor4};

    fn build(cfg: &SlpaConfig, seed: u64) -> (Slpa, ModuleParams<f64>) {
        let m = Slpa::new("slpa", cfg).unwrap();
        let mut p = ModuleParams::new();
        let mut rng = seeded_rng(seed);
        m.declare(&mut ParamInit::new(&mut p, &mut rng)).unwrap();
        (m, p)
    }

    #[test]
    fn zero_init_halves_features() {
        let (m, p) = build(&SlpaConfig::default(), 1);
        let mut tape = Tape::new(Mode::Train);
        let b = p.bind(&mut tape);
        let xv = Tensor4::from_fn(Dims::new(2, 16, 8, 8), |b, c, y, x| {
            ((b * 7 + c * 3 + y * 5 + x) as f64).sin()
        });
        let x = tape.constant(xv.clone());
        let out = m.forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.dims(out.attention).unwrap(), Dims::new(2, 1, 8, 8));
        assert!(tape.value(out.attention).unwrap().data().iter().all(|&v| v == 0.5));
        assert_eq!(tape.value(out.features).unwrap(), &xv.scale(0.5));
    }

    #[test]
    fn rate_count_is_enforced() {
        for rates in [vec![1, 2], vec![1, 2, 3, 4], vec![]] {
            let cfg = SlpaConfig {
                dilation_rates: rates,
                ..SlpaConfig::default()
            };
            assert!(matches!(Slpa::new("s", &cfg), Err(Error::Config(_))));
        }
    }
}
