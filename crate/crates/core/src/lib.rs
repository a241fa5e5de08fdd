#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod jpm;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod sie;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
