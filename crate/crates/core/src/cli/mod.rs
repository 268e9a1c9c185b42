//! Batch driver: case files, the time loop, validation and reports.

pub mod config;
pub mod reports;
pub mod run;
pub mod sphere;

use crate::error::Error;

/// Process exit status for an error: 1 usage, 2 numerics, 3 storage.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Mesh(_)
        | Error::Grading { .. }
        | Error::Geometry(_)
        | Error::InvalidRank { .. } => 1,
        Error::Io(_) | Error::Checkpoint(_) => 3,
        _ => 2,
    }
}
