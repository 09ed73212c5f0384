pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod dp;
pub mod error;
pub mod layers;
pub mod model;
pub mod protocols;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
