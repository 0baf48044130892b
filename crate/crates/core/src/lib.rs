pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod net;
pub mod style;
pub mod trainer;

pub use error::{Error, Result};
