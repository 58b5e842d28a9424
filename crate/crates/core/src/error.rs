use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,
    #[error("zero-norm embedding: cosine similarity is undefined")]
    ZeroNorm,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("empty sequence at batch row {0}")]
    EmptySequence(usize),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("layer {layer} out of range 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("pooling mask keeps no positions in row {0}")]
    EmptyMask(usize),
    #[error("not an L3P checkpoint")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("invalid prune spec: {0}")]
    Prune(String),
    #[error("{0}")]
    Selection(String),
    #[error("adapter error: {0}")]
    Adapter(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Data(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("non-finite loss at step {step} (batch tuple ids {batch:?})")]
    Diverged { step: usize, batch: Vec<usize> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures of the arithmetic itself (NaN/Inf, undefined cosine, divergence)
    /// as opposed to bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::ZeroNorm | Error::Diverged { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
