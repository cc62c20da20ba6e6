//! Self-guided flow matching on low-dimensional data.
//!
//! A small MLP velocity field is trained by regressing onto the velocity of a
//! probability path (constant-velocity, variance-preserving or
//! variance-exploding). Alongside it, the network's own intermediate features
//! are clustered online against learnable prototypes with a few Sinkhorn-Knopp
//! rounds, and the prototypes are fed back as conditions. At sampling time,
//! classifier-free guidance steers towards a chosen prototype.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod ot;
pub mod paths;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
