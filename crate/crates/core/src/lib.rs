//! Small-object detection building blocks on a CPU reverse-mode tape.
//!
//! The kernels in [`nn`] are plain functions over [`Tensor4`]; [`tape::Tape`]
//! records them for reverse-mode differentiation; the model modules
//! ([`slpa`], [`msfem`], [`align`], [`fpn`], [`backbone`], [`detector`])
//! compose them into a trainable detector.

pub mod align;
pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fpn;
pub mod gradcheck;
pub mod gradsuite;
pub mod layers;
pub mod model;
pub mod msfem;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod slpa;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod threads;
pub mod train;

pub use error::{Error, Result};
pub use params::ModuleParams;
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Mode, Tape, ValueId};
pub use tensor::{Broadcast, Dims, Tensor4};

pub type Tensor4f = Tensor4<f32>;
pub type Tensor4d = Tensor4<f64>;
pub type Tapef = Tape<f32>;
pub type Taped = Tape<f64>;
pub type Paramsf = ModuleParams<f32>;
pub type Paramsd = ModuleParams<f64>;
