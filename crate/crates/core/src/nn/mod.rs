//! Numeric substrate for the model: dense matrices, a reverse-mode tape,
//! layer primitives and the optimizer.

pub mod check;
pub mod layers;
pub mod matrix;
pub mod params;
pub mod tape;

pub use check::{bce_loss, finite_difference_check, relative_error};
pub use layers::{gcn_layer_forward, BiLstm, GcnStack, MlpHead};
pub use matrix::Matrix;
pub use params::{AdamConfig, Bound, ParamGroup, Parameter, ParameterStore};
pub use tape::{Gradients, Tape, Var};
