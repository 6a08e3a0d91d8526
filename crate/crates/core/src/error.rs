use numkernel::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CxsError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("unknown concept {concept} (vocabulary of {vocab})")]
    UnknownConcept { concept: usize, vocab: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("budget {budget} outside [0, {tiles}]")]
    InvalidBudget { budget: usize, tiles: usize },
    #[error("target OBR {0} outside [0, 1]")]
    InvalidTarget(f64),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("duplicate tile index {0}")]
    DuplicateTile(usize),
    #[error("tile index {tile} out of range for {tiles} tiles")]
    TileOutOfRange { tile: usize, tiles: usize },
    #[error("cutoff k must be at least 1, got {0}")]
    InvalidCutoff(usize),
    #[error("duplicate item {0} in ranking")]
    DuplicateItem(usize),
    #[error("unknown resolution {0:?}")]
    UnknownResolution(String),
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error("match entries must be +1 or -1, found {0}")]
    InvalidMatch(f64),
    #[error("unknown predictor variant {0:?}")]
    UnknownVariant(String),
    #[error("unmatched budgets: learned OBR {learned:.4}, random OBR {random:.4}")]
    UnmatchedBudget { learned: f64, random: f64 },
    #[error("tile {0} is observed; the diagnostic needs a completed tile")]
    ObservedTile(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("untrained pipeline: {0}")]
    Untrained(String),
}

pub type Result<T> = std::result::Result<T, CxsError>;
