//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod coco_oracle;

use rand::Rng;
use sodm::config::{DataSource, OptimizerConfig, RunConfig};
use sodm::model::ModelConfig;
use sodm::params::seeded_rng;
use sodm::synth::{Dataset, Profile};
use sodm::{Dims, Tensor4};

pub const TRAIN_IMAGES: usize = 8;
pub const TRAIN_DATA_SEED: u64 = 42;

/// Seeded values uniform in `[-scale, scale)`.
pub fn random_tensor(dims: Dims, seed: u64, scale: f64) -> Tensor4<f64> {
    let mut rng = seeded_rng(seed);
    let data = (0..dims.len()).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor4::from_vec(dims, data).unwrap()
}

pub fn max_abs_diff(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.max_abs_diff(b).unwrap()
}

/// Toy detector with the three module toggles.
pub fn toy_model(use_slpa: bool, use_msfem: bool, use_align: bool) -> ModelConfig {
    ModelConfig {
        use_slpa,
        use_msfem,
        use_align,
        backbone_widths: vec![8, 16, 16, 32],
        pyramid_width: 16,
        ..ModelConfig::default()
    }
}

/// The overfit run: eight small-object scenes, 800 momentum-SGD steps.
pub fn overfit_config(use_slpa: bool, use_msfem: bool, use_align: bool) -> RunConfig {
    RunConfig {
        model: toy_model(use_slpa, use_msfem, use_align),
        optimizer: OptimizerConfig {
            learning_rate: 0.02,
            momentum: 0.9,
            iterations: 800,
            seed: 7,
            warmup_iterations: 700,
            checkpoint_every: 0,
        },
        data: DataSource::Generated {
            profile: Profile::Small,
            images: TRAIN_IMAGES,
            seed: TRAIN_DATA_SEED,
        },
        eval: Default::default(),
    }
}

pub fn overfit_data() -> Dataset {
    Dataset::generate(&Profile::Small.specs(TRAIN_IMAGES, TRAIN_DATA_SEED)).unwrap()
}

/// Length of the strictly decreasing prefix of `losses`.
pub fn decreasing_prefix(losses: &[f64]) -> usize {
    losses.windows(2).take_while(|w| w[1] < w[0]).count() + usize::from(!losses.is_empty())
}
