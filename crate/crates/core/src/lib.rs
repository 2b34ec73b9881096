pub mod asyncsim;
pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod incentive;
pub mod model;
pub mod optim;
pub mod seeds;

pub use error::{Error, Result};
