//! Neural-network training in which each activation's backward factor is
//! chosen independently of its forward function.

pub mod datasets;
pub mod error;
pub mod grad_sources;
pub mod harness;
pub mod layers;
pub mod training;
pub mod verification;
pub mod numerics;

pub use error::{Error, Result};
pub use grad_sources::{Activation, BackwardContext, GradientSource, Normalization, SourceKind};
pub use numerics::{RandomStream, Tensor};
pub use training::Reduction;
