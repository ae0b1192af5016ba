//! Error type shared across the crate.
//!
//! One flat enum: the crate surface is small enough that per-module error
//! types would mostly be conversion noise. [`Error::is_usage`] exists so the
//! CLI can map variants onto its exit-code contract without matching on
//! every case at the call site.

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A split does not hold enough classes to sample an N-way episode.
    #[error("not enough classes: split has {have}, episode needs {need}")]
    InsufficientClasses { have: usize, need: usize },

    /// A class in the sampled-from split cannot cover K support + Q query clips.
    #[error("class {class_id} has {have} clips, episode needs {need} per class")]
    InsufficientClipsPerClass { class_id: u32, have: usize, need: usize },

    /// The subaction vocabulary cannot produce enough distinct ordered tuples.
    #[error("only {available} distinct subaction orderings exist, the class list needs {requested}")]
    TooFewDistinctOrderings { available: u128, requested: usize },

    /// A class id outside the bank (or archive) was referenced.
    #[error("unknown class id {0}")]
    UnknownClass(u32),

    /// A clip id that is not present in the archive was referenced.
    #[error("unknown clip id {0}")]
    UnknownClip(u32),

    /// A binary file does not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    /// A binary file declares a format version this build does not read.
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    /// A binary file ended before the declared record did.
    #[error("truncated record: {0}")]
    TruncatedRecord(String),

    /// Bytes remain after the final declared record.
    #[error("{0} trailing bytes after final record")]
    TrailingData(usize),

    /// A tensor or clip carried NaN or infinite entries.
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),

    /// Tensor dimensions disagree with what the operation requires.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Spatial pooling grid does not fit the frame.
    #[error("bad pooling grid: n={n} for {h}x{w} frames")]
    BadGrid { n: usize, h: usize, w: usize },

    /// A frame embedding had (numerically) zero norm, so cosine distance is undefined.
    #[error("frame {0} has zero norm; cosine distance undefined")]
    ZeroNormFrame(usize),

    /// Episode layout does not match what the model parameters were built for.
    #[error("episode size mismatch: model built for {expected} clips per forward, episode has {found}")]
    EpisodeSizeMismatch { expected: usize, found: usize },

    /// Softmax temperature must be strictly positive.
    #[error("temperature must be > 0, got {0}")]
    NonPositiveTemperature(f64),

    /// A query label is outside `0..n_way`.
    #[error("label {label} out of range for {n_way}-way episode")]
    LabelOutOfRange { label: usize, n_way: usize },

    /// Run-config file problems: unknown or duplicate keys, bad values, out-of-range fields.
    #[error("config: {0}")]
    Config(String),

    /// Checkpoint contents disagree with the model the config describes.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors the CLI treats as usage/config mistakes (exit code 1)
    /// rather than data errors (exit code 2).
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::NonPositiveTemperature(_) | Error::BadGrid { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
