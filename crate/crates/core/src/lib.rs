pub mod crf;
pub mod error;
pub mod features;
pub mod forward;
pub mod harness;
pub mod imagio;
pub mod nets;
pub mod objectives;

pub use error::{Error, Result};
