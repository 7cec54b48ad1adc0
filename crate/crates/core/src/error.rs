//! Error type shared by every module in the crate.

use alloc::string::String;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not conform to the primitive's algebraic rule.
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got a tensor of {numel} elements")]
    NonScalarBackward { numel: usize },

    /// Remaining ratio must lie in (0, 1].
    #[error("remaining ratio {ratio} outside (0, 1]")]
    InvalidRatio { ratio: f64 },

    /// A layer with zero fan-in cannot be initialized.
    #[error("layer {layer} has zero fan-in")]
    ZeroFanIn { layer: usize },

    /// A label is outside [0, class_count).
    #[error("label {label} out of range for {classes} classes (sample {sample})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        sample: usize,
    },

    /// Attack or schedule parameters violate their invariants.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The loss became NaN or infinite; the run is aborted rather than clamped.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// Ticket sets for EOT/ensemble attacks and R2S policies must be nonempty.
    #[error("empty ticket set for {op}")]
    EmptyTicketSet { op: &'static str },

    /// Source network classes differ from the target task and reinit was not requested.
    #[error("class count mismatch: source has {have}, task needs {need}; pass reinit_last")]
    ClassCountMismatch { have: usize, need: usize },

    /// A checkpoint byte stream failed validation.
    #[error("bad checkpoint at byte {offset}: {what}")]
    BadCheckpoint { offset: usize, what: String },

    /// A network-spec id string could not be resolved to a preset.
    #[error("unknown network id {0:?}")]
    UnknownNetworkId(String),

    /// Dataset split is empty or inconsistent with the network.
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
}
