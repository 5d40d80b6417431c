//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("depth {depth} out of range 1..={max}")]
    DepthOutOfRange { depth: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid activation distribution: {0}")]
    InvalidDistribution(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("stale forward trace: network was modified after the forward pass")]
    StaleTrace,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset error: {0}")]
    Data(String),

    #[error("idx file has bad magic 0x{found:08x} (expected 0x{expected:08x})")]
    IdxBadMagic { found: u32, expected: u32 },

    #[error("idx file truncated: needed {needed} bytes, got {got}")]
    IdxTruncated { needed: usize, got: usize },

    #[error("idx image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("device {device_id}: {source}")]
    Device {
        device_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach device attribution to an error propagating out of local training.
    pub fn for_device(self, device_id: usize) -> Self {
        Error::Device {
            device_id,
            source: Box::new(self),
        }
    }
}
