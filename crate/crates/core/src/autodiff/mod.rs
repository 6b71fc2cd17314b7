//! Reverse-mode automatic differentiation over dense matrices, plus the
//! layer and optimizer pieces needed to train small networks.

mod layer;
mod optim;
mod params;
mod tape;

pub use layer::{apply_stack, forward_stack, Activation, DenseLayer};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
