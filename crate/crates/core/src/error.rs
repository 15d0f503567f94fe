use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the pruning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{0} requires at least 2 samples, got {1}")]
    TooFewSamples(&'static str, usize),

    #[error("CKA overshoot {0:e} exceeds tolerance")]
    CkaOvershoot(f64),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("block {stage}.{position} is not removable: {reason}")]
    NotCandidate {
        stage: usize,
        position: usize,
        reason: String,
    },

    #[error("nothing prunable: no candidate blocks remain")]
    NothingPrunable,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("empty dataset")]
    EmptyData,

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("csv {path}: line {line}: {msg}")]
    Csv {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("csv {path}: missing label column {column:?}")]
    MissingColumn { path: PathBuf, column: String },

    #[error("csv {0}: file has no data rows")]
    EmptyCsv(PathBuf),

    #[error("filter pruning fraction {fraction} would empty block {stage}.{position}")]
    EmptiesBlock {
        fraction: f64,
        stage: usize,
        position: usize,
    },

    #[error("no matchable layer/filter pairs within {0:.1}% neuron tolerance")]
    NoMatchedPairs(f64),

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported version {0}")]
    BadVersion(u16),

    #[error("checkpoint: truncated ({0})")]
    Truncated(&'static str),

    #[error("checkpoint: CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("checkpoint header: {0}")]
    Header(String),

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by the user's configuration or input files rather than
    /// by the run itself.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidArch(_)
                | Error::Csv { .. }
                | Error::MissingColumn { .. }
                | Error::EmptyCsv(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
