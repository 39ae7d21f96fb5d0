//! Dense-tensor network engine whose forward and backward passes respect a
//! freeze boundary.

mod arch;
pub mod kernels;
mod layer;
mod loss;
mod model;

pub use arch::{ArchitectureSpec, LayerSpec};
pub use kernels::ConvGeom;
pub use layer::{Layer, LayerKind, ResidualBlock};
pub use loss::cross_entropy;
pub use model::{Freezing, Model, ShadowEval, ShadowParams};

