//! Minimal dense-tensor compute core with reverse-mode differentiation.
//!
//! Everything is `f64` and row-major. The tape is rebuilt for every forward
//! pass; parameters live in a [`ParamStore`] between steps and are lifted
//! onto the tape as leaves. Deliberately small: just enough operations for
//! toy-scale convolutional encoder-decoders and the losses in this crate.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{sgd_step, Adam};
pub use params::{load_checkpoint, save_checkpoint, BoundParams, ParamStore};
pub use tape::{softmax_slice, Tape, Var};
pub use tensor::Tensor;
