//! Odd-one-out (O3N) self-supervised video representation learning at desk
//! scale: synthetic sprite corpora, temporal clip encoders, a multi-branch
//! shared-weight network trained to spot the out-of-order clip, and
//! transfer of the learned trunk to supervised action classification.

pub mod checkpoint;
pub mod cli;
pub mod clipenc;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod transfer;
pub mod video;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{ParamSet, Tensor};
