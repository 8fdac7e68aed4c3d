pub mod error;
pub mod eval;
pub mod io;
pub mod robust_scale;
pub mod rtb;
pub mod twoblock;
pub mod weighting;

pub use error::{Block, Error, Result};
