//! Checkpoint container, per-cube compression and VTK export.

pub mod checkpoint;
pub mod compress;
pub mod vtk;
pub mod wavelet;

pub use checkpoint::{
    load_flow, read_checkpoint, read_header, save_flow, write_checkpoint, CheckpointData,
    Compression, StateMeta,
};
pub use compress::{compress_cube, decompress_cube, Mode};
