//! Miniature four-stage residual backbone with an optional attention gate
//! after every stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv};
use crate::nn::conv::ConvSpec;
use crate::params::{join, Bound, ConvInit, ParamInit};
use crate::scalar::Scalar;
use crate::slpa::{Slpa, SlpaConfig};
use crate::tape::{Tape, ValueId};

/// Total downsampling from image to the coarsest stage.
pub const BACKBONE_STRIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub use_slpa: bool,
    #[serde(default)]
    pub slpa: SlpaConfig,
}

impl BackboneConfig {
    /// One basic block per stride-2 stage with the given widths.
    pub fn toy(widths: [usize; 4]) -> Self {
        BackboneConfig {
            stem_channels: widths[0],
            stages: widths
                .iter()
                .map(|&w| StageSpec {
                    blocks: 1,
                    out_channels: w,
                    stride: 2,
                })
                .collect(),
            use_slpa: false,
            slpa: SlpaConfig::default(),
        }
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.out_channels).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::Config(format!(
                "backbone needs 4 stages, got {}",
                self.stages.len()
            )));
        }
        if self.stages.iter().any(|s| s.stride != 2) {
            return Err(Error::Config("every backbone stage must downsample by 2".into()));
        }
        if self.stem_channels == 0 || self.stages.iter().any(|s| s.blocks == 0 || s.out_channels == 0) {
            return Err(Error::Config(format!(
                "backbone widths and depths must be positive: {self:?}"
            )));
        }
        if self.use_slpa {
            self.slpa.validate()?;
        }
        Ok(())
    }
}

struct Block {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    skip: Option<(Conv, BatchNorm)>,
}

impl Block {
    fn new(prefix: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let conv = |name: &str, spec: ConvSpec| Conv::new(join(prefix, name), spec.without_bias(), ConvInit::FanIn);
        let skip = (stride != 1 || cin != cout).then(|| {
            (
                conv("skip", ConvSpec::same(cin, cout, 1, 1).with_stride(stride)),
                BatchNorm::new(join(prefix, "skip_bn"), cout),
            )
        });
        Block {
            conv1: conv("conv1", ConvSpec::same(cin, cout, 3, 1).with_stride(stride)),
            bn1: BatchNorm::new(join(prefix, "bn1"), cout),
            conv2: conv("conv2", ConvSpec::same(cout, cout, 3, 1)),
            bn2: BatchNorm::new(join(prefix, "bn2"), cout),
            skip,
        }
    }

    fn declare<T: Scalar>(&self, init: &mut ParamInit<'_, T>) -> Result<()> {
        self.conv1.declare(init)?;
        self.bn1.declare(init)?;
        self.conv2.declare(init)?;
        self.bn2.declare(init)?;
        if let Some((c, b)) = &self.skip {
            c.declare(init)?;
            b.declare(init)?;
        }
        Ok(())
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: ValueId) -> Result<ValueId> {
        let h = self.conv1.forward(tape, bound, x)?;
        let h = self.bn1.forward(tape, bound, h)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, bound, h)?;
        let h = self.bn2.forward(tape, bound, h)?;
        let s = match &self.skip {
            Some((c, b)) => {
                let s = c.forward(tape, bound, x)?;
                b.forward(tape, bound, s)?
            }
            None => x,
        };
        let sum = tape.add(h, s)?;
        tape.relu(sum)
    }
}

pub struct Backbone {
    cfg: BackboneConfig,
    stem: Conv,
    stem_bn: BatchNorm,
    stages: Vec<Vec<Block>>,
    gates: Vec<Slpa>,
}

impl Backbone {
    pub fn new(prefix: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv::new(
            join(prefix, "stem"),
            ConvSpec::same(IMAGE_CHANNELS, cfg.stem_channels, 3, 1)
                .with_stride(2)
                .without_bias(),
            ConvInit::FanIn,
        );
        let stem_bn = BatchNorm::new(join(prefix, "stem_bn"), cfg.stem_channels);
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::new();
        for (si, s) in cfg.stages.iter().enumerate() {
            let blocks = (0..s.blocks)
                .map(|bi| {
                    let stride = if bi == 0 { s.stride } else { 1 };
                    let block = Block::new(
                        &join(prefix, &format!("stage{}.block{bi}", si + 1)),
                        cin,
                        s.out_channels,
                        stride,
                    );
                    cin = s.out_channels;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        let gates = if cfg.use_slpa {
            (0..cfg.stages.len())
                .map(|si| Slpa::new(&join(prefix, &format!("stage{}.slpa", si + 1)), &cfg.slpa))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Backbone {
            cfg: cfg.clone(),
            stem,
            stem_bn,
            stages,
            gates,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn declare<T: Scalar>(&self, init: &mut ParamInit<'_, T>) -> Result<()> {
        self.stem.declare(init)?;
        self.stem_bn.declare(init)?;
        for (si, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                b.declare(init)?;
            }
            if let Some(g) = self.gates.get(si) {
                g.declare(init)?;
            }
        }
        Ok(())
    }

    /// Stage outputs at strides 4, 8, 16 and 32.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, image: ValueId) -> Result<Vec<ValueId>> {
        let d = tape.dims(image)?;
        if d.c != IMAGE_CHANNELS || d.h == 0 || d.w == 0 || d.h % BACKBONE_STRIDE != 0 || d.w % BACKBONE_STRIDE != 0 {
            return Err(Error::shape(format!(
                "backbone input {d} must have {IMAGE_CHANNELS} channels and sides divisible by {BACKBONE_STRIDE}"
            )));
        }
        let x = self.stem.forward(tape, bound, image)?;
        let x = self.stem_bn.forward(tape, bound, x)?;
        let mut x = tape.relu(x)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for (si, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(tape, bound, x)?;
            }
            if let Some(g) = self.gates.get(si) {
                x = g.forward(tape, bound, x)?.features;
            }
            outs.push(x);
        }
        Ok(outs)
    }
}
