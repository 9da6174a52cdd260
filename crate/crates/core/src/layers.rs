//! Named convolution and batch-norm layers that declare their parameters and
//! look them up again when recording a forward pass.

use crate::error::Result;
use crate::nn::conv::ConvSpec;
use crate::params::{join, Bound, ConvInit, ParamInit};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
    pub init: ConvInit,
}

impl Conv {
    pub fn new(name: impl Into<String>, spec: ConvSpec, init: ConvInit) -> Self {
        Conv {
            name: name.into(),
            spec,
            init,
        }
    }

    pub fn declare<T: Scalar>(&self, init: &mut ParamInit<'_, T>) -> Result<()> {
        init.conv(&self.name, &self.spec, self.init)
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> Option<String> {
        self.spec.bias.then(|| join(&self.name, "bias"))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: ValueId) -> Result<ValueId> {
        let w = bound.get(&self.weight_name())?;
        let b = self.bias_name().map(|n| bound.get(&n)).transpose()?;
        tape.conv2d(x, w, b, &self.spec)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn declare<T: Scalar>(&self, init: &mut ParamInit<'_, T>) -> Result<()> {
        init.batch_norm(&self.name, self.channels)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: ValueId) -> Result<ValueId> {
        let get = |s: &str| bound.get(&join(&self.name, s));
        tape.batch_norm(
            x,
            get("gamma")?,
            get("beta")?,
            get("running_mean")?,
            get("running_var")?,
        )
    }
}
