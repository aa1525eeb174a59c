//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Watermark payload has the wrong length or malformed bits.
    #[error("payload shape: {0}")]
    PayloadShape(String),

    /// Spectrogram / activation dimensions do not match a module's configuration.
    #[error("feature shape: {0}")]
    FeatureShape(String),

    /// Invalid configuration value or incompatible module wiring.
    #[error("configuration: {0}")]
    Config(String),

    /// Argument outside its mathematical domain.
    #[error("domain: {0}")]
    Domain(String),

    /// Gradient layout mismatch between flatten/unflatten participants.
    #[error("gradient layout: {0}")]
    Layout(String),

    /// Structural mismatch between paired model outputs.
    #[error("structural: {0}")]
    Structural(String),

    /// Training-step ordering contract violated.
    #[error("sequencing: {0}")]
    Sequencing(String),

    /// Input data could not be read or is not usable.
    #[error("ingestion: {0}")]
    Ingestion(String),

    /// A loss became non-finite during training.
    #[error("divergence at iteration {iteration}: {term} is not finite")]
    Divergence { iteration: u64, term: String },

    /// Checkpoint or manifest contents are invalid.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for CLI reporting.
    ///
    /// 0 success, 2 usage/config, 3 payload or shape, 4 ingestion, 5 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::PayloadShape(_)
            | Error::FeatureShape(_)
            | Error::Layout(_)
            | Error::Structural(_)
            | Error::Sequencing(_) => 3,
            Error::Ingestion(_) | Error::Io(_) | Error::Checkpoint(_) => 4,
            Error::Divergence { .. } => 5,
        }
    }
}
