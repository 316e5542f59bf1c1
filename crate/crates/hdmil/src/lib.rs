pub mod datamodel;
pub mod dmin;
pub mod cka;
pub mod error;
pub mod lipn;
pub mod rngutil;
pub mod synthgen;
pub mod tape;

pub use error::{Error, Result};
