pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
