pub mod dgp;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod inference;
pub mod lambda;
pub mod mc;
pub mod panel;
pub mod propensity;
pub mod qr;
pub mod rng;

pub use error::{Error, Result};
