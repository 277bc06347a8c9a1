//! Full-range partial-to-partial point-cloud registration with
//! rotation-invariant features and a hierarchical graph network.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod geom;
pub mod io;
pub mod matching;
pub mod net;
pub mod rifeat;
pub mod train;

pub use error::{Error, Result};
