pub mod autograd;
#[cfg(feature = "cli")]
pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernels;
pub mod model;
pub mod params;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
