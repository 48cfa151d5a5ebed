//! Minimal dense reverse-mode autodiff: the layer set and optimiser used by
//! the network (affine, batch norm, leaky ReLU, softmax, Adam).

mod adam;
mod checkpoint;
mod graph;
mod layers;

pub use adam::AdamState;
pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_VERSION};
pub use graph::{pairwise_sq_dist, Graph, Matrix, ParamId, ParamStore, Parameter, Var};
pub use layers::{AffineLayer, BatchNormLayer, Mode, LEAKY_SLOPE};
