//! Block-structured Cartesian mesh incompressible flow solver with immersed
//! rigid bodies, hybrid rank/thread parallelism and compressed checkpoints.

pub mod cli;
pub mod decomp;
pub mod error;
pub mod field;
pub mod halo;
pub mod interaction;
pub mod io;
pub mod lagrangian;
pub mod loadbalance;
pub mod mesh;
pub mod parallel;
pub mod solver;
pub mod transport;

pub use error::{Error, Result};
