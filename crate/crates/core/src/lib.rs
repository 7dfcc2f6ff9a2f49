//! Trajectory-conditioned video diffusion at desk scale.
//!
//! The crate covers the whole pipeline: a small reverse-mode tensor engine,
//! optical-flow I/O, trajectory sampling from dense flow, condition encoders,
//! a multiscale-fusion UNet, diffusion training and sampling, a synthetic
//! sprite-video dataset, and trajectory-following metrics.

pub mod autograd;
pub mod checkpoint;
pub mod conditions;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod param;
pub mod sprites;
pub mod tensor;
pub mod trajectory;
pub mod unet;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
