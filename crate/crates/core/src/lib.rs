pub mod cli;
pub mod data;
pub mod error;
pub mod joint;
pub mod landmark;
pub mod lmm;
pub mod metrics;
pub mod numerics;
pub mod predict;
pub mod sim;

pub use error::{Error, Result};
