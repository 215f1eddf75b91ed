#[cfg(test)]
#[macro_use]
mod test_macros;

pub mod capture;
pub mod control;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod netdyn;
pub mod perception;
pub mod seed;
pub mod world;

pub use error::{Error, Result};
