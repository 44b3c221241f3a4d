//! Neural Turing Machine laboratory.
//!
//! A reverse-mode autodiff tape over dense `f64` tensors, the NTM cell with
//! three memory initialization schemes, an LSTM baseline, generators for the
//! Copy, Repeat Copy and Associative Recall tasks, and a training harness that
//! records validation learning curves.

pub mod checkpoint;
pub mod controllers;
pub mod error;
pub mod experiment;
pub mod model;
pub mod ntm;
pub mod params;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{ModelError, TensorError};
pub use model::{ModelSpec, SequenceModel};
pub use ntm::{InitScheme, NtmConfig, NtmModel};
pub use params::ParamStore;
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::Tensor;
