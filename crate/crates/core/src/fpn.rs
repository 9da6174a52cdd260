//! Feature pyramid: 1x1 laterals, optional enhancement on the coarsest
//! lateral, aligned top-down fusion and 3x3 smoothing.

use serde::{Deserialize, Serialize};

use crate::align::AlignFuse;
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::msfem::{Msfem, MsfemConfig};
use crate::nn::conv::ConvSpec;
use crate::nn::upsample::UpsampleMode;
use crate::params::{join, Bound, ConvInit, ParamInit};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};

pub const PYRAMID_LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    pub lateral_width: usize,
    /// Channel widths of the four backbone outputs, finest first.
    pub levels: Vec<usize>,
    pub use_msfem: bool,
    pub use_align: bool,
    #[serde(default = "default_msfem_rates")]
    pub msfem_rates: Vec<usize>,
    #[serde(default = "default_upsample")]
    pub upsample: UpsampleMode,
}

fn default_msfem_rates() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

fn default_upsample() -> UpsampleMode {
    UpsampleMode::Nearest
}

impl PyramidConfig {
    pub fn new(levels: Vec<usize>, lateral_width: usize) -> Self {
        PyramidConfig {
            lateral_width,
            levels,
            use_msfem: false,
            use_align: false,
            msfem_rates: default_msfem_rates(),
            upsample: default_upsample(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != PYRAMID_LEVELS {
            return Err(Error::Config(format!(
                "pyramid needs {PYRAMID_LEVELS} input widths, got {:?}",
                self.levels
            )));
        }
        if self.lateral_width == 0 || self.levels.contains(&0) {
            return Err(Error::Config(format!("pyramid widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

enum Top {
    Lateral(Conv),
    Enhanced(Box<Msfem>),
}

pub struct Pyramid {
    cfg: PyramidConfig,
    laterals: Vec<Conv>,
    top: Top,
    fusions: Vec<AlignFuse>,
    smooth: Vec<Conv>,
}

impl Pyramid {
    pub fn new(prefix: &str, cfg: &PyramidConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.lateral_width;
        let lateral = |i: usize| {
            Conv::new(
                join(prefix, &format!("lateral{}", i + 2)),
                ConvSpec::same(cfg.levels[i], w, 1, 1),
                ConvInit::FanIn,
            )
        };
        let laterals = (0..PYRAMID_LEVELS - 1).map(lateral).collect();
        let top = if cfg.use_msfem {
            let mcfg = MsfemConfig {
                dilation_rates: cfg.msfem_rates.clone(),
                ..MsfemConfig::new(cfg.levels[PYRAMID_LEVELS - 1], w)
            };
            Top::Enhanced(Box::new(Msfem::new(&join(prefix, "msfem"), &mcfg)?))
        } else {
            Top::Lateral(lateral(PYRAMID_LEVELS - 1))
        };
        let fusions = (0..PYRAMID_LEVELS - 1)
            .map(|i| AlignFuse::new(&join(prefix, &format!("fuse{}", i + 2)), w, cfg.use_align, cfg.upsample))
            .collect();
        let smooth = (0..PYRAMID_LEVELS)
            .map(|i| {
                Conv::new(
                    join(prefix, &format!("smooth{}", i + 2)),
                    ConvSpec::same(w, w, 3, 1),
                    ConvInit::FanIn,
                )
            })
            .collect();
        Ok(Pyramid {
            cfg: cfg.clone(),
            laterals,
            top,
            fusions,
            smooth,
        })
    }

    pub fn config(&self) -> &PyramidConfig {
        &self.cfg
    }

    pub fn declare<T: Scalar>(&self, init: &mut ParamInit<'_, T>) -> Result<()> {
        for l in &self.laterals {
            l.declare(init)?;
        }
        match &self.top {
            Top::Lateral(c) => c.declare(init)?,
            Top::Enhanced(m) => m.declare(init)?,
        }
        for f in &self.fusions {
            f.declare(init)?;
        }
        for s in &self.smooth {
            s.declare(init)?;
        }
        Ok(())
    }

    /// Maps backbone outputs (finest first) to pyramid levels of the same
    /// spatial sizes.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, features: &[ValueId]) -> Result<Vec<ValueId>> {
        if features.len() != PYRAMID_LEVELS {
            return Err(Error::shape(format!(
                "pyramid takes {PYRAMID_LEVELS} feature maps, got {}",
                features.len()
            )));
        }
        for pair in features.windows(2) {
            let (fine, coarse) = (tape.dims(pair[0])?, tape.dims(pair[1])?);
            if coarse.h != fine.h / 2 || coarse.w != fine.w / 2 {
                return Err(Error::shape(format!("pyramid level {coarse} is not half of {fine}")));
            }
        }
        let last = PYRAMID_LEVELS - 1;
        let mut pre = match &self.top {
            Top::Lateral(c) => c.forward(tape, bound, features[last])?,
            Top::Enhanced(m) => m.forward(tape, bound, features[last])?,
        };
        let mut out = vec![self.smooth[last].forward(tape, bound, pre)?];
        for i in (0..last).rev() {
            let lat = self.laterals[i].forward(tape, bound, features[i])?;
            pre = self.fusions[i].forward(tape, bound, pre, lat)?;
            out.push(self.smooth[i].forward(tape, bound, pre)?);
        }
        out.reverse();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ModuleParams};
    use crate::tape::Mode;
    use crate::tensor::{Dims, Tensor4};

    #[test]
    fn ablation_lattice_shapes() {
        for (m, a) in [(false, false), (true, false), (false, true), (true, true)] {
            let cfg = PyramidConfig {
                use_msfem: m,
                use_align: a,
                ..PyramidConfig::new(vec![4, 8, 8, 8], 4)
            };
            let pyr = Pyramid::new("fpn", &cfg).unwrap();
            let mut p = ModuleParams::<f64>::new();
            let mut rng = seeded_rng(3);
            pyr.declare(&mut ParamInit::new(&mut p, &mut rng)).unwrap();
            let mut tape = Tape::new(Mode::Train);
            let b = p.bind(&mut tape);
            let feats: Vec<_> = [(4, 16), (8, 8), (8, 4), (8, 2)]
                .iter()
                .map(|&(c, s)| tape.constant(Tensor4::full(Dims::new(1, c, s, s), 0.1)))
                .collect();
            let out = pyr.forward(&mut tape, &b, &feats).unwrap();
            let sizes: Vec<_> = out.iter().map(|&o| tape.dims(o).unwrap()).collect();
            assert_eq!(sizes, [16, 8, 4, 2].map(|s| Dims::new(1, 4, s, s)).to_vec());
        }
    }

    #[test]
    fn rejects_wrong_ratio() {
        let pyr = Pyramid::new("fpn", &PyramidConfig::new(vec![2, 2, 2, 2], 2)).unwrap();
        let mut p = ModuleParams::<f64>::new();
        let mut rng = seeded_rng(3);
        pyr.declare(&mut ParamInit::new(&mut p, &mut rng)).unwrap();
        let mut tape = Tape::new(Mode::Train);
        let b = p.bind(&mut tape);
        let feats: Vec<_> = [16, 8, 8, 2]
            .iter()
            .map(|&s| tape.constant(Tensor4::full(Dims::new(1, 2, s, s), 0.1)))
            .collect();
        assert!(pyr.forward(&mut tape, &b, &feats).is_err());
    }
}
