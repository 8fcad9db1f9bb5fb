pub mod container;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod attack;
pub mod data;
pub mod metric_opt;
pub mod models;
pub mod normal;
pub mod optim;
pub mod smoothing;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
