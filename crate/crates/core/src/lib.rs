//! Scribble-supervised vessel segmentation with adversarial attention gates
//! and inter-layer divergence deep supervision.

pub mod checkpoint;
pub mod data;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod network;
pub mod nn;
pub mod optim;
pub mod par;
pub mod scribble;
pub mod seed;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
