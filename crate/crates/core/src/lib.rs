//! Generalised image outpainting with a shifted-window transformer
//! encoder/decoder, a recurrent bottleneck predictor that grows the centre
//! feature map outward, and adversarial training.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod ops;
pub mod params;
pub mod selftest;
pub mod swin;
pub mod tensor;
pub mod training;
pub mod tsp;

pub use autograd::{Bound, Gradients, Tape, Var};
pub use config::Config;
pub use error::{Error, Result};
pub use geometry::{make_masked_input, MaskedSample, OutpaintGeometry};
pub use params::ParamSet;
pub use tensor::Tensor;
