pub mod arch;
pub mod autograd;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod params;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
