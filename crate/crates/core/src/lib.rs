//! Active rotating filters (ARFs) and oriented response networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`ops`], [`optim`]: dense arrays, standard CNN kernels, Adadelta.
//! * [`arf`]: ARF storage and rotation (exact and fast paths).
//! * [`orconv`]: oriented response convolution, forward and collective backward.
//! * [`encoding`]: ORAlign and ORPooling.
//! * [`network`]: topologies, training, checkpoints, gradient checking.
//! * [`dataset`]: IDX loading and rotated MNIST variants.
//! * [`config`], [`experiment`], [`image`]: run configuration, end-to-end
//!   experiments, PGM rendering.

pub mod arf;
pub mod config;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod experiment;
pub mod image;
pub mod network;
pub mod ops;
pub mod optim;
pub mod orconv;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
