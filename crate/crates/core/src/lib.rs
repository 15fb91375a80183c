mod binio;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;
#[doc(hidden)]
pub mod testing;

pub use error::{Error, Result};
