pub mod config;
pub mod error;
pub mod features;
pub mod io;
pub mod model;
pub mod objectives;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
