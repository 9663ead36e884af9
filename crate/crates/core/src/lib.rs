//! Cone-beam CT reconstruction with a plug-and-play multi-slice
//! artifact-reduction prior.

pub mod analysis;
pub mod config;
pub mod error;
pub mod fdk;
pub mod geometry;
pub mod io;
pub mod pnp;
pub mod prior;
pub mod projector;
pub mod simulator;

pub use error::{Error, Result};
