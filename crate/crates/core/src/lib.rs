pub mod analysis;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod sparo;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
