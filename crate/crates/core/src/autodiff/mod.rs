//! Numeric substrate: tensors, the reverse-mode tape, layers, optimizer.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod serialize;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use nn::{
    Bound, Forward, Initializer, Linear, Mlp2, Mode, Norm, NormKind, NormMode, ParamId, ParamSet,
};
pub use optim::{lr_schedule, AdamW, AdamWConfig, ParamGrads};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
