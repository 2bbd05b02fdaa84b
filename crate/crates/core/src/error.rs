//! Error and result types shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument is outside the operation's contract (bad label, zero batch
    /// size, negative epsilon, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A value left the mathematical domain of the operation (non-positive
    /// probability, non-finite loss outside training, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A byte stream does not look like the format it claims to be.
    #[error("format error: {0}")]
    Format(String),

    /// Two parts of one data source disagree (image/label counts, ...).
    #[error("inconsistent data: {0}")]
    Consistency(String),

    /// Checkpoint container written by an unsupported format revision.
    #[error("checkpoint version mismatch: file has v{found}, this build reads v{supported}")]
    CheckpointVersion { found: u32, supported: u32 },

    /// Checkpoint parameter records do not match the declared model spec.
    #[error("checkpoint does not match its model spec: {0}")]
    CheckpointSpec(String),

    /// Checkpoint file ends before all declared records were read.
    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    /// Optimization diverged; reported with the epoch where it happened.
    #[error("training failed at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    /// A black-box attack could not satisfy its own preconditions.
    #[error("attack failure: {0}")]
    AttackFailure(String),

    /// Experiment configuration is structurally valid but semantically wrong.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
