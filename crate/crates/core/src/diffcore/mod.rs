//! Dense double-precision tensors, the primitives the pipeline needs, a
//! reverse-mode tape over them and the AdamW optimizer.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference, max_relative_error, relative_error};
pub use ops::{
    conv1d_temporal, cosine_rows, cosine_sim, cross_entropy, cross_entropy_one_hot, entropy, glu, mean_pool, softmax,
};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use tape::{Gradients, OpKind, Tape, Var, ALL_KINDS};
pub use tensor::{argmax, Tensor};
