pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distributions;
pub mod elbo;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod optim;
pub mod prior;
pub mod tensor;
pub mod trainer;
pub mod vade;
pub mod verify;

pub use autodiff::{Gradients, Op, Tape, Var};
pub use error::{Error, Result, TensorError};
pub use tensor::Tensor;
