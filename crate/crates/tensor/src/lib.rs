//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The engine offers exactly the primitives the RveRNet backbones and head
//! need: convolution, affine maps, attention, layer normalization, softmax,
//! label-smoothed cross-entropy and a handful of shape operations. Gradients
//! are verified against central finite differences with [`grad_check`].

mod attention;
pub mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod linalg;
pub mod ops;
mod scalar;
mod tensor;

pub use attention::{multi_head_self_attention, AttentionParams};
pub use checkpoint::{Checkpoint, CheckpointEntry};
pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use ops::conv::{ConvSpec, Padding};
pub use scalar::{DType, Float};
pub use tensor::Tensor;
