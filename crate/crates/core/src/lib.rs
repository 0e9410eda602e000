//! Interactive segmentation with click-guided attention.
//!
//! The core is generic over the floating-point scalar; [`f64`] aliases are
//! exported at the crate root and `*32` aliases cover single precision.

pub mod affinity;
pub mod autodiff;
pub mod checkpoint;
pub mod click;
pub mod click_attention;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod interaction;
pub mod mask;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use click::{Click, ClickSet, Polarity};
pub use config::{ModelConfig, NUM_STAGES};
pub use error::{Error, Result};
pub use mask::Mask;
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Model = model::Model<f64>;
pub type Prediction = model::Prediction<f64>;
pub type Sample = dataset::Sample<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Model32 = model::Model<f32>;
