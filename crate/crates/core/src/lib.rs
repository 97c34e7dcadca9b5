pub mod agent;
pub mod calibration;
pub mod cli;
pub mod config;
pub mod contract;
pub mod error;
pub mod hjb;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod optim;
pub mod principal;
pub mod rng;

pub use error::{Error, Result};
