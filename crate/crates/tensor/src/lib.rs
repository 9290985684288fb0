//! Small dense-tensor engine: reverse-mode autodiff over a recorded tape,
//! SGD with momentum, warmup/cosine schedules, EMA tracking and a
//! manifest-plus-blob checkpoint format.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the `*64` aliases
//! below are what the rest of the workspace uses.

pub mod checkpoint;
pub mod ema;
mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod schedule;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use ema::EmaState;
pub use error::{Result, TensorError};
pub use graph::{softmax_along, Graph, Var};
pub use optim::Sgd;
pub use params::{Bound, Params};
pub use scalar::Scalar;
pub use schedule::{ScheduleShape, ScheduleSpec};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Params64 = Params<f64>;
pub type Params32 = Params<f32>;
