pub mod alignment;
pub mod channel;
pub mod cli;
pub mod env;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod extraction;
pub mod extrapolator;

pub use error::{Error, Result};
