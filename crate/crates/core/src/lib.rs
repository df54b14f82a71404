//! Physics-informed equation learning for 2D+t reaction–diffusion data.
//!
//! The pipeline bins cell coordinates into density tensors ([`grid`]), jointly
//! trains density, diffusion and growth networks against data and PDE residual
//! losses ([`binn`]), averages the learned rate functions across training splits
//! ([`ensemble`]), distils them into closed-form expressions ([`sr`]) and checks
//! the result by forward-solving the PDE ([`solver`], [`eval`]).

pub mod autodiff;
pub mod binn;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod grid;
pub mod mlp;
pub mod rng;
pub mod solver;
pub mod sr;
pub mod synth;

pub use error::{Error, Result};
