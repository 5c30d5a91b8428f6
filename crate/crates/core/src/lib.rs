//! Multi-echo MR reconstruction with a low-rank subspace model and a
//! hierarchical deep generative prior.

pub mod encoding;
pub mod error;
pub mod generator;
pub mod inversion;
pub mod io;
pub mod numerics;
pub mod phantom;
pub mod recon;
pub mod series;
pub mod subspace;

pub use error::{Error, Result};
