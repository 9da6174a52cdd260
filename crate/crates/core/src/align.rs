//! Top-down fusion with deformable alignment.
//!
//! The coarse feature is upsampled to the lateral's size, a zero-initialised
//! 3x3 convolution over both operands predicts sampling offsets, and a
//! deformable convolution (identity-initialised) resamples the upsampled
//! feature before it is added to the lateral. At initialisation this is the
//! plain `upsample + lateral` fusion.

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::nn::conv::ConvSpec;
use crate::nn::deform::DeformSpec;
use crate::nn::upsample::UpsampleMode;
use crate::params::{join, Bound, ConvInit, ParamInit};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};

pub const ALIGN_KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub struct AlignFuse {
    width: usize,
    mode: UpsampleMode,
    /// `None` when alignment is switched off.
    align: Option<(Conv, Conv)>,
}

impl AlignFuse {
    pub fn new(prefix: &str, width: usize, aligned: bool, mode: UpsampleMode) -> Self {
        let align = aligned.then(|| {
            let offsets = Conv::new(
                join(prefix, "offset"),
                ConvSpec::same(2 * width, 2 * ALIGN_KERNEL * ALIGN_KERNEL, ALIGN_KERNEL, 1),
                ConvInit::Zero,
            );
            let deform = Conv::new(
                join(prefix, "deform"),
                ConvSpec::same(width, width, ALIGN_KERNEL, 1),
                ConvInit::Identity,
            );
            (offsets, deform)
        });
        AlignFuse { width, mode, align }
    }

    pub fn is_aligned(&self) -> bool {
        self.align.is_some()
    }

    pub fn declare<T: Scalar>(&self, init: &mut ParamInit<'_, T>) -> Result<()> {
        if let Some((offsets, deform)) = &self.align {
            offsets.declare(init)?;
            deform.declare(init)?;
        }
        Ok(())
    }

    pub fn deform_spec(&self) -> DeformSpec {
        DeformSpec::same(self.width, self.width, ALIGN_KERNEL, 1)
    }

    /// Offset field `(n, 2*k*k, h, w)` predicted from both fusion operands.
    pub fn predict_offsets<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        up: ValueId,
        lateral: ValueId,
    ) -> Result<ValueId> {
        let (offsets, _) = self
            .align
            .as_ref()
            .ok_or_else(|| Error::Config("offset prediction on an unaligned fusion".into()))?;
        let (ud, ld) = (tape.dims(up)?, tape.dims(lateral)?);
        if ud != ld {
            return Err(Error::shape(format!("offset inputs differ: {ud} vs {ld}")));
        }
        let both = tape.concat_channels(&[up, lateral])?;
        offsets.forward(tape, bound, both)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        top: ValueId,
        lateral: ValueId,
    ) -> Result<ValueId> {
        let (td, ld) = (tape.dims(top)?, tape.dims(lateral)?);
        if td.c != self.width || ld.c != self.width || td.n != ld.n {
            return Err(Error::shape(format!(
                "fusion of {td} into {ld} needs {} channels on both sides",
                self.width
            )));
        }
        let halves = |coarse: usize, fine: usize| coarse == fine / 2 || coarse == fine.div_ceil(2);
        if !halves(td.h, ld.h) || !halves(td.w, ld.w) {
            return Err(Error::shape(format!("{td} is not half the spatial size of {ld}")));
        }
        let up = tape.upsample(top, ld.h, ld.w, self.mode)?;
        let Some((_, deform)) = &self.align else {
            return tape.add(up, lateral);
        };
        let off = self.predict_offsets(tape, bound, up, lateral)?;
        let w = bound.get(&deform.weight_name())?;
        let b = deform.bias_name().map(|n| bound.get(&n)).transpose()?;
        let aligned = tape.deform_conv2d(up, off, w, b, &self.deform_spec())?;
        tape.add(aligned, lateral)
    }
}
