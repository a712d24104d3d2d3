//! Doubly reflected backward recursions with a default time.
//!
//! The lattice tier (`filtration`, `solver`, `links`, `dynkin`) works on a
//! full binomial path tree enlarged by a grid-valued default time, so every
//! conditional expectation is exact. The `montecarlo` tier covers the Cox
//! regime at simulation scale.

pub mod dynkin;
pub mod error;
pub mod filtration;
pub mod links;
pub mod montecarlo;
pub mod solver;

pub use error::{Error, Result};
