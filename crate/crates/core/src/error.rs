use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] ndgrad::GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),

    // codecs
    #[error("matrix is not a rotation (orthogonality error {orth:.2e}, det {det:.4})")]
    NotARotation { orth: f64, det: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("model not loaded: {0}")]
    ModelNotLoaded(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    // network
    #[error("frame count mismatch: {0}")]
    FrameCountMismatch(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("rotary embedding needs an even head dimension, got {0}")]
    OddHeadDim(usize),

    // flow matching
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("time {0} outside [0, 1]")]
    TOutOfRange(f32),
    #[error("misaligned batch: {0}")]
    MisalignedBatch(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("ODE state became non-finite at step {0}")]
    NonFiniteState(usize),

    // corpus
    #[error("bad lexicon: {0}")]
    BadLexicon(String),
    #[error("corrupt record: {0}")]
    CorruptRecord(String),

    // text front end
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(char),
    #[error("empty text")]
    EmptyText,

    // metrics
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate covariance")]
    DegenerateCovariance,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("no motion beats detected")]
    NoMotionBeats,
    #[error("empty input")]
    EmptyInput,

    // harness
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("corpus unreadable at {path}: {reason}")]
    CorpusUnreadable { path: PathBuf, reason: String },
    #[error("loss diverged (non-finite) at step {0}")]
    DivergedLoss(u64),
    #[error("missing variant {0}")]
    MissingVariant(String),
    #[error("corpus has no participant streams")]
    NoParticipantStreams,
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
