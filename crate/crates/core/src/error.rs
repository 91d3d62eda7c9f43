use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index sets do not partition the {len} positions: {detail}")]
    NotAPartition { len: usize, detail: String },

    #[error("ordering violates the {constraint} constraint")]
    OrderingConstraint { constraint: &'static str },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("time {t} is outside [0, 1]")]
    TimeOutOfRange { t: f64 },

    #[error("diffusion weight is singular at t = {t} when alpha0 = 1")]
    Singularity { t: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("clean sequence contains the mask token at position {position}")]
    MaskInCleanSequence { position: usize },

    #[error("reverse posterior needs alpha_s > alpha_t (got alpha_s = {alpha_s}, alpha_t = {alpha_t})")]
    PosteriorOrder { alpha_s: f64, alpha_t: f64 },

    #[error("index sets are not pairwise disjoint: position {position} appears twice")]
    NotDisjoint { position: usize },

    #[error("cache coherence violation: {0}")]
    CacheCoherence(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite loss at step {step} (ar = {ar}, mdm = {mdm})")]
    Divergence { step: u64, ar: f64, mdm: f64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} does not match supported version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("malformed dataset file: {0}")]
    Dataset(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
