use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("layer {layer}: {message}")]
    LayerShape { layer: usize, message: String },

    #[error("mask has {got} entries but the model has {expected} trainable layers")]
    MaskLength { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated file, need {needed} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },

    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("not enough samples: {0}")]
    InsufficientSamples(String),

    #[error("class {class} ran out of samples ({needed} needed, {available} left)")]
    ClassExhausted {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("psi is undefined: the tail sum starting at width {width} is zero")]
    ZeroTailSum { width: usize },

    #[error(
        "convex run diverged at round {round} (gap {gap:.3e} vs initial {initial:.3e}); \
         try a larger lambda or smaller step scale"
    )]
    Divergence {
        round: usize,
        gap: f64,
        initial: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
