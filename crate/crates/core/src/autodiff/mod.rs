//! Dense f64 tensors with a dynamic reverse-mode tape.
//!
//! A [`Tape`] records every primitive executed through a [`Var`]; calling
//! [`Tape::backward`] replays the record in reverse and returns the gradient
//! of every parameter that was placed on the tape. Trainable values live in a
//! [`ParamStore`] and are updated between tapes by an [`Optimizer`].

mod optim;
mod param;
mod tape;
mod tensor;

pub use optim::{OptimConfig, Optimizer, OptimizerKind};
pub use param::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{matmul, Tensor};
