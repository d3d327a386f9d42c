use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("parameter layout does not match the model spec")]
    LayoutMismatch,

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("non-finite value in parameter vector at index {index}")]
    NonFinite { index: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("aggregation weights must be non-negative and sum to 1 (sum = {sum})")]
    InvalidWeights { sum: f64 },

    #[error("no client has at least {minimum} samples")]
    NoClientsLeft { minimum: usize },

    #[error("could not give every client an example after {attempts} Dirichlet draws")]
    RedrawBudgetExhausted { attempts: usize },

    #[error("local training diverged in round {round} on client {client_id}")]
    Divergence { round: u64, client_id: usize },

    #[error("server aggregation produced non-finite parameters in round {round}")]
    ServerDivergence { round: u64 },

    #[error("client reported zero local steps")]
    ZeroSteps,

    #[error("sample ledger is empty")]
    EmptyLedger,

    #[error("proximal term is enabled but no anchor model was supplied")]
    MissingAnchor,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::ServerDivergence { .. })
    }
}
