pub mod autodiff;
pub mod container;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod tta;

pub use error::{Error, Result};
