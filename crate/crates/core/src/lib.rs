//! Blind hyperspectral unmixing with an autoencoder whose abundances are
//! pulled toward a Dirichlet prior by an entropic optimal-transport
//! (Sinkhorn divergence) penalty.

pub mod data;
pub mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod nfindr;
pub mod numerics;
pub mod optim;
pub mod plot;
pub mod sinkhorn;
pub mod trainer;

pub use error::{Error, Result};
