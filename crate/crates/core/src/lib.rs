pub mod dataset;
pub mod ego;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod image;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod seed;
pub mod streams;
pub mod synth;
pub mod training;

pub use error::{Error, FitError, Result};
