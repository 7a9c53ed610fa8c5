//! Face anti-spoofing with a gated positional self-attention backbone,
//! discretized liveness regression and adversarial domain generalization.

pub mod backbone;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod protocol;
pub mod raster;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result, TensorError};
pub use raster::Image;
pub use tensor::{DType, Real, Tape, Tensor, Var};
