pub mod adapt;
pub mod baselines;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod ranking;
pub mod run;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
