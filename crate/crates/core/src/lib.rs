pub mod analysis;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod interp;
pub mod par;
pub mod perm;
pub mod reference;
pub mod rng;
pub mod transformer;

pub use error::{Error, Result};
pub use perm::{Parity, Permutation};
