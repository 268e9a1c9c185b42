use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("grading violation: cubes {fine} (level {fine_level}) and {coarse} (level {coarse_level}) touch")]
    Grading {
        fine: usize,
        fine_level: u8,
        coarse: usize,
        coarse_level: u8,
    },

    #[error("transport is closed")]
    TransportClosed,

    #[error("rank {rank} out of range for {size} ranks")]
    InvalidRank { rank: usize, size: usize },

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("exchange of field `{0}` is already in flight")]
    ExchangeInFlight(&'static str),

    #[error("particle {id} at {pos:?} lies outside the mesh")]
    ParticleOutside { id: u64, pos: [f64; 3] },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("partitioning failed: {0}")]
    Partition(String),

    #[error("numerics: {0}")]
    Numerics(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
