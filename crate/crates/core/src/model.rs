//! The complete detector: backbone, feature pyramid and dense head.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, StageSpec};
use crate::detector::{
    build_targets, decode_detections, detection_loss, DecodeParams, Head, LevelOutput, LossBreakdown,
};
use crate::error::{Error, Result};
use crate::eval::{Detection, GroundTruthBox};
use crate::fpn::{Pyramid, PyramidConfig};
use crate::params::{seeded_rng, Bound, ModuleParams, ParamInit};
use crate::scalar::Scalar;
use crate::slpa::SlpaConfig;
use crate::tape::{Mode, Tape, ValueId};
use crate::tensor::Tensor4;

/// Model shape and the three module toggles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub use_slpa: bool,
    pub use_msfem: bool,
    pub use_align: bool,
    /// Output widths of the four backbone stages; the stem uses the first.
    pub backbone_widths: Vec<usize>,
    #[serde(default = "one")]
    pub blocks_per_stage: usize,
    pub pyramid_width: usize,
    pub num_classes: usize,
    #[serde(default = "default_slpa_rates")]
    pub slpa_rates: Vec<usize>,
    #[serde(default = "default_msfem_rates")]
    pub msfem_rates: Vec<usize>,
}

fn one() -> usize {
    1
}

fn default_slpa_rates() -> Vec<usize> {
    SlpaConfig::default().dilation_rates
}

fn default_msfem_rates() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_slpa: false,
            use_msfem: false,
            use_align: false,
            backbone_widths: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            pyramid_width: 64,
            num_classes: 3,
            slpa_rates: default_slpa_rates(),
            msfem_rates: default_msfem_rates(),
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> Result<BackboneConfig> {
        if self.backbone_widths.len() != 4 {
            return Err(Error::Config(format!(
                "backbone_widths needs 4 entries, got {:?}",
                self.backbone_widths
            )));
        }
        Ok(BackboneConfig {
            stem_channels: self.backbone_widths[0],
            stages: self
                .backbone_widths
                .iter()
                .map(|&w| StageSpec {
                    blocks: self.blocks_per_stage,
                    out_channels: w,
                    stride: 2,
                })
                .collect(),
            use_slpa: self.use_slpa,
            slpa: SlpaConfig {
                dilation_rates: self.slpa_rates.clone(),
                ..SlpaConfig::default()
            },
        })
    }

    pub fn pyramid(&self) -> PyramidConfig {
        PyramidConfig {
            use_msfem: self.use_msfem,
            use_align: self.use_align,
            msfem_rates: self.msfem_rates.clone(),
            ..PyramidConfig::new(self.backbone_widths.clone(), self.pyramid_width)
        }
    }
}

pub struct Detector {
    cfg: ModelConfig,
    pub backbone: Backbone,
    pub pyramid: Pyramid,
    pub head: Head,
}

/// Everything one forward pass records.
pub struct ForwardPass {
    pub bound: Bound,
    pub features: Vec<ValueId>,
    pub pyramid: Vec<ValueId>,
    pub outputs: Vec<LevelOutput>,
}

impl Detector {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Detector {
            cfg: cfg.clone(),
            backbone: Backbone::new("backbone", &cfg.backbone()?)?,
            pyramid: Pyramid::new("fpn", &cfg.pyramid())?,
            head: Head::new("head", cfg.pyramid_width, cfg.num_classes)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ModuleParams<T>> {
        let mut params = ModuleParams::new();
        let mut rng = seeded_rng(seed);
        let mut init = ParamInit::new(&mut params, &mut rng);
        self.backbone.declare(&mut init)?;
        self.pyramid.declare(&mut init)?;
        self.head.declare(&mut init)?;
        Ok(params)
    }

    /// Checks that `params` has exactly this model's names and shapes.
    pub fn check_params<T: Scalar>(&self, params: &ModuleParams<T>) -> Result<()> {
        let expected: ModuleParams<T> = self.init_params(0)?;
        for e in expected.entries() {
            let got = params.get(&e.name)?;
            if got.dims() != e.tensor.dims() {
                return Err(Error::shape(format!(
                    "parameter {} is {}, model expects {}",
                    e.name,
                    got.dims(),
                    e.tensor.dims()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| expected.position(n).is_err()) {
            return Err(Error::UnknownParam(extra.to_string()));
        }
        Ok(())
    }

    pub fn forward_bound<T: Scalar>(&self, tape: &mut Tape<T>, bound: Bound, images: ValueId) -> Result<ForwardPass> {
        let features = self.backbone.forward(tape, &bound, images)?;
        let pyramid = self.pyramid.forward(tape, &bound, &features)?;
        let outputs = self.head.forward(tape, &bound, &pyramid)?;
        Ok(ForwardPass {
            bound,
            features,
            pyramid,
            outputs,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ModuleParams<T>,
        images: &Tensor4<T>,
    ) -> Result<ForwardPass> {
        let bound = params.bind(tape);
        let x = tape.constant(images.clone());
        self.forward_bound(tape, bound, x)
    }

    /// Records the loss for `gts` (one list per image) on top of a forward pass.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pass: &ForwardPass,
        gts: &[Vec<GroundTruthBox>],
    ) -> Result<(ValueId, LossBreakdown)> {
        let sizes = pass
            .outputs
            .iter()
            .map(|o| tape.dims(o.class_logits).map(|d| (d.h, d.w)))
            .collect::<Result<Vec<_>>>()?;
        let n = tape.dims(pass.outputs[0].class_logits)?.n;
        if gts.len() != n {
            return Err(Error::shape(format!(
                "{} annotation lists for a batch of {n}",
                gts.len()
            )));
        }
        let targets = build_targets(gts, &sizes, self.cfg.num_classes)?;
        detection_loss(tape, &pass.outputs, targets)
    }

    /// Eval-mode inference; detections carry their batch index as image id.
    pub fn detect<T: Scalar>(
        &self,
        params: &ModuleParams<T>,
        images: &Tensor4<T>,
        decode: &DecodeParams,
    ) -> Result<Vec<Vec<Detection>>> {
        let mut tape = Tape::new(Mode::Eval);
        let pass = self.forward(&mut tape, params, images)?;
        let levels = pass
            .outputs
            .iter()
            .map(|o| Ok((tape.value(o.class_logits)?, tape.value(o.box_deltas)?)))
            .collect::<Result<Vec<_>>>()?;
        decode_detections(&levels, decode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn small() -> ModelConfig {
        ModelConfig {
            backbone_widths: vec![4, 4, 8, 8],
            pyramid_width: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn untrained_model_detects_nothing() {
        let m = Detector::new(&small()).unwrap();
        let p = m.init_params::<f32>(1).unwrap();
        let img = Tensor4::from_fn(Dims::new(2, 3, 64, 64), |_, c, y, x| {
            ((c * 7 + y * 3 + x) % 11) as f32 / 11.0
        });
        let dets = m.detect(&p, &img, &DecodeParams::default()).unwrap();
        assert_eq!(dets.len(), 2);
        assert!(dets.iter().all(Vec::is_empty));
    }

    #[test]
    fn check_params_reports_mismatch() {
        let m = Detector::new(&small()).unwrap();
        let p = m.init_params::<f32>(1).unwrap();
        m.check_params(&p).unwrap();
        let wider = Detector::new(&ModelConfig {
            pyramid_width: 8,
            ..small()
        })
        .unwrap();
        let err = wider.check_params(&p).unwrap_err().to_string();
        assert!(err.contains("fpn.") || err.contains("head."), "{err}");
    }
}
