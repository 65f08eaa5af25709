//! Optical-flow guided HDR video reconstruction from alternating exposures.
//!
//! The crate is generic over the floating point type; `f32` is used for
//! inference and training, `f64` for gradient checks.

pub mod data;
pub mod train;
mod error;
mod gemm;
pub mod flow;
pub mod gradcheck;
pub mod hdr;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod ops;
pub mod pipeline;
pub mod scalar;
pub mod store;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use flow::FlowField;
pub use hdr::{ExposureSchedule, LdrFrame, LuminanceMask, RadianceFrame};
pub use ops::ConvSpec;
pub use scalar::Scalar;
pub use store::{TapeParams, WeightStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type TensorF = Tensor<f32>;
pub type TensorD = Tensor<f64>;
