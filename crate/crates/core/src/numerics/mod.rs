//! Dense matrices, the seeded random stream, and the samplers built on it.

mod matrix;
mod rng;
mod sample;

pub use matrix::{mat_mul, Matrix};
pub use rng::Rng;
pub use sample::{
    sample_dirichlet, sample_dirichlet_into, sample_gamma, sample_gaussian, xavier_bound, xavier_uniform,
    DirichletSpec,
};
