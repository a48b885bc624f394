pub mod attacks;
pub mod config;
pub mod epidemic;
pub mod error;
pub mod fedtrain;
pub mod hypergraph;
pub mod io;
pub mod macro_model;
pub mod metrics;
pub mod mobility;
pub mod optim;
pub mod pipeline;
pub mod pseudoloc;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
