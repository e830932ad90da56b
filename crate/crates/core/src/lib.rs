pub mod block;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod experiments;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
