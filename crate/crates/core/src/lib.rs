//! Hybrid convolution + transformer facial action unit detection on a
//! self-contained reverse-mode autograd engine.

pub mod autograd;
pub mod classifiers;
pub mod config;
pub mod conv_head;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fan_stub;
pub mod gradcheck;
pub mod gradsuite;
pub mod layers;
pub mod model;
pub mod okd;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use model::{FanTrans, ModelConfig, Variant};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
pub use transformer::DropMode;
