pub mod design;
pub mod error;
pub mod exec;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod mse;
pub mod nelder_mead;
pub mod phase_space;
pub mod process;
pub mod simulator;
pub mod reconstruction;

pub use error::{Error, Result};
