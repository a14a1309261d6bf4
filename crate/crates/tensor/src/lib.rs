//! Small dense-tensor numerics for desk-scale models: 64-bit row-major
//! tensors, a define-by-run tape for reverse-mode differentiation, the
//! fused attention kernel used by both encoders, and RAdam with cosine decay.

pub mod error;
pub mod fd;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use kernels::{AttentionGroup, AttentionLayout};
pub use optim::{cosine_lr, radam_step, OptimizerState, RAdamConfig};
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
