pub mod checkpoint;
pub mod ctc;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod probe;
pub mod report;
pub mod ssl;
pub mod strategies;

pub use error::{Error, Result};
