//! World-model reinforcement learning on small memory tasks.
//!
//! A latent dynamics model (recurrent or transformer backbone) is trained on
//! replayed episodes; an actor and critic then learn from imagined rollouts.
//! Everything runs on a small tape autodiff in [`graph`].

pub mod agent;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod imagine;
pub mod params;
pub mod replay;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{AdamConfig, GradResult, ParameterStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Store32 = ParameterStore<f32>;
pub type Store64 = ParameterStore<f64>;
