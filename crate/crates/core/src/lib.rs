//! Filter pruning with knockoff features as a scientific control.
//!
//! Real inputs and their knockoff counterparts are pushed through a frozen
//! pretrained network. At every prunable layer the next consumer sees a
//! per-channel convex mix of the two feature streams; the mixing weights are
//! trained against the labels, and filters whose real features fail to beat
//! their knockoffs are removed.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod knockoff;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod pruning;
pub mod report;
pub mod rng;
pub mod selection;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
