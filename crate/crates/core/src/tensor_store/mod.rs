//! On-disk data model: UBT tensors and dataset manifests.

mod manifest;
mod tensor;

use std::path::{Path, PathBuf};

pub use manifest::{
    load_manifest, DatasetManifest, Labels, Logits, ManifestDoc, Split, SplitDoc, SplitRole,
    SOFT_LABEL_TOL,
};
pub use tensor::{load_tensor, save_tensor, DType, Tensor, TensorData, MAGIC, MAX_RANK};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not a UBT1 file")]
    BadMagic,
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("rank {0} exceeds the maximum of 8")]
    RankTooLarge(usize),
    #[error("non-zero header padding")]
    BadPadding,
    #[error("truncated header")]
    Truncated,
    #[error("dimension product overflows")]
    DimOverflow,
    #[error("size mismatch: dims call for {expected} values, payload holds {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("non-finite value in a tensor that must be finite")]
    NonFinite,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("soft labels: {0}")]
    SoftLabel(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("split {split:?}: {source}")]
    Split {
        split: String,
        #[source]
        source: Box<TensorError>,
    },
}

impl TensorError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TensorError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
