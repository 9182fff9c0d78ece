pub mod adsa;
pub mod autodiff;
pub mod bench;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod mamba;
pub mod model;
pub mod params;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
